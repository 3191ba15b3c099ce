#pragma once

#include <functional>

#include "dpformer/tensor.hpp"

namespace dpformer {

// Central-difference gradient estimate: per element (f(x+h) - f(x-h)) / 2h.
// f must return finite values near x (NumericError otherwise). The probe
// works on a clone, so the caller's tensor is never disturbed.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h = 1e-5);

// Largest elementwise relative error between two same-shape tensors, with
// |a-b| / max(floor, |a|, |b|) so near-zero entries compare absolutely.
double max_rel_err(const Tensor& a, const Tensor& b, double floor = 1e-6);

}  // namespace dpformer
