#pragma once

#include <utility>
#include <vector>

#include "dpformer/encoder.hpp"

namespace dpformer {

// Class prototype pool plus the MSA encoder that fuses the selected and
// average prototypes with the patch tokens. The first frozen_count
// prototypes are frozen history: they still receive adjoints through the
// pool average, but the optimizer never sees them.
struct ClassPromptModule {
    std::vector<Tensor> prototypes;  // [1, D] each, one per class seen
    std::vector<int> created_task;   // task index that created each prototype
    int frozen_count = 0;
    int grown_for_task = 0;
    EncoderLayer enc;

    static ClassPromptModule init(Rng& rng, std::int64_t d, int heads);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
    void collect_trainable(std::vector<Tensor>& out) const;
    std::int64_t pool_param_count() const;
};

// Cosine-similarity argmax over the pool; ties go to the lowest index.
// Zero-norm prototypes are skipped (with a stderr warning); a zero-norm
// query or an all-zero pool is a contract violation.
std::pair<int, Tensor> select_class_prototype(const Tensor& pooled,
                                              const ClassPromptModule& m);

Tensor average_class_prototype(Tape& tape, const ClassPromptModule& m);

// theta* + theta_avg prepended per sample, then one MSA encoder layer.
// pinned overrides the per-sample selection (gradient-check support);
// selected_out reports the indices actually used.
TokenSequence class_prompt_forward(Tape& tape, const TokenSequence& zl,
                                   const ClassPromptModule& m,
                                   const std::vector<int>* pinned = nullptr,
                                   std::vector<int>* selected_out = nullptr);

// Task 1 creates new_class_count trainable prototypes; later tasks freeze
// the whole existing pool first. Calling twice for one task throws
// LifecycleError.
void grow_class_pool(ClassPromptModule& m, int new_class_count, int task, Rng& rng);

}  // namespace dpformer
