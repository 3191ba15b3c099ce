#pragma once

#include <string>
#include <vector>

#include "dpformer/model.hpp"

namespace dpformer {

struct GradcheckEntry {
    std::string name;
    double rel_err = 0.0;
};

struct GradcheckReport {
    std::vector<GradcheckEntry> entries;
    double worst = 0.0;

    bool ok(double tol = 1e-3) const { return worst <= tol; }
};

// Finite-difference check of the full composed training loss on a
// two-task micro model, with prototype routing pinned so the probes stay
// on one smooth branch. Covers every named parameter, frozen ones
// included.
GradcheckReport model_gradcheck(unsigned seed = 7, bool verbose = false);

}  // namespace dpformer
