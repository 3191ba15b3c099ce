#pragma once

#include <optional>
#include <string>

#include "dpformer/adamw.hpp"
#include "dpformer/model.hpp"

namespace dpformer {

// Optimizer payload carried alongside the model when a checkpoint is
// written mid-stream; slot order mirrors trainable_params().
struct OptimizerSnapshot {
    std::int64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
};

struct CheckpointExtras {
    std::optional<OptimizerSnapshot> optimizer;
    std::optional<Rng::State> rng;
};

// Binary, little-endian, versioned. Parameter data is written as raw
// doubles so a load reproduces forward outputs bit for bit.
void save_checkpoint(const std::string& path, const ModelState& m,
                     const CheckpointExtras& extras = {});

struct LoadedCheckpoint {
    ModelState model;
    CheckpointExtras extras;
};

// Rebuilds the model from the stored config and task history, then fills
// every named parameter. Wrong magic or version is a FormatError; a
// parameter whose stored shape disagrees with the rebuilt model is a
// DimensionError naming it.
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace dpformer
