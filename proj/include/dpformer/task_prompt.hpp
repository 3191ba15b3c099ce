#pragma once

#include <vector>

#include "dpformer/encoder.hpp"

namespace dpformer {

// Task prototype pool, the linear selector that routes each sample to one
// of them, and the MSA encoder that fuses omega* and omega_avg with the
// class-prompted tokens. Only the newest prototype trains; the selector
// keeps all rows trainable and grows by one row per task.
struct TaskPromptModule {
    std::vector<Tensor> prototypes;  // omega_1..omega_t, [1, D] each
    int frozen_count = 0;
    int grown_for_task = 0;
    Tensor sel_w;  // [t, D]
    Tensor sel_b;  // [1, t]
    EncoderLayer enc;

    static TaskPromptModule init(Rng& rng, std::int64_t d, int heads);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
    void collect_trainable(std::vector<Tensor>& out) const;
    std::int64_t pool_param_count() const;
    int task_count() const { return static_cast<int>(prototypes.size()); }
};

struct TaskSelection {
    int index = 0;
    Tensor prototype;  // value of the chosen omega
    Tensor logits;     // [1, t], off tape
};

// Linear selector scores the pooled summary; argmax picks the prototype
// (ties to the lowest index). Selection never looks at the omegas.
TaskSelection select_task_prototype(const Tensor& pooled, const TaskPromptModule& m);

Tensor average_task_prototype(Tape& tape, const TaskPromptModule& m);

// omega* + omega_avg prepended per sample, then one MSA encoder layer.
// logits_out (when given) receives the taped [B, t] selector scores so a
// supervision term can train the selector.
TokenSequence task_prompt_forward(Tape& tape, const TokenSequence& z_cls,
                                  const TaskPromptModule& m,
                                  const std::vector<int>* pinned = nullptr,
                                  std::vector<int>* selected_out = nullptr,
                                  Tensor* logits_out = nullptr,
                                  bool selector_detached = false);

// Task 1 creates omega_1 and the one-row selector; each later task freezes
// the previous omegas, appends a fresh one, and adds a selector row.
void grow_task_pool(TaskPromptModule& m, int task, Rng& rng);

}  // namespace dpformer
