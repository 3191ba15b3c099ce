#pragma once

#include <vector>

#include "dpformer/blocks.hpp"

namespace dpformer {

// Label head over every class seen so far. Starts empty; each task appends
// one row per new class and keeps the old rows bitwise intact.
struct LabelClassifier {
    Tensor w;  // [classes_seen, D]
    Tensor b;  // [1, classes_seen]

    std::int64_t classes() const { return w.defined() ? w.rows() : 0; }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
    std::int64_t param_count() const { return w.defined() ? w.numel() + b.numel() : 0; }
};

// Auxiliary head, rebuilt fresh for every task: one slot per current-task
// class plus the extra slot at index 0 that marks rehearsal samples.
struct AuxClassifier {
    Tensor w;  // [task_classes + 1, D]
    Tensor b;  // [1, task_classes + 1]

    static AuxClassifier init(Rng& rng, std::int64_t d, std::int64_t task_classes);
    std::int64_t slots() const { return w.rows(); }
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
    std::int64_t param_count() const { return w.numel() + b.numel(); }
};

struct LossWeights {
    double alpha = 0.0;
    double lambda = 0.1;

    // alpha is the fraction of classes that are old news by task t.
    static LossWeights for_task(std::int64_t prev_classes, std::int64_t total_classes,
                                double lambda = 0.1);
};

struct ClassifyResult {
    Tensor label_probs;  // [B, classes_seen]
    Tensor aux_probs;    // [B, task_classes + 1]; undefined without an aux head
    Tensor pooled;       // [B, D]
};

// Mean over all tokens (prompts included), then softmax heads.
ClassifyResult classify(Tape& tape, const TokenSequence& z, const LabelClassifier& label,
                        const AuxClassifier* aux = nullptr);

// Per-component binary cross entropy over softmax outputs, averaged over
// both the batch and the class axis.
Tensor loss_bce(Tape& tape, const Tensor& probs, const Tensor& onehot);

// KL(current slice, renormalized || teacher slice, renormalized) over the
// first prev_classes components, batch mean. The teacher is a constant.
Tensor loss_kd(Tape& tape, const Tensor& current_probs, const Tensor& teacher_probs,
               std::int64_t prev_classes);

// Same averaging as loss_bce over the aux head's task_classes+1 slots.
Tensor loss_aux(Tape& tape, const Tensor& aux_probs, const Tensor& aux_onehot);

// (1-alpha)*bce + alpha*kd + lambda*aux.
Tensor total_loss(Tape& tape, const Tensor& bce, const Tensor& kd, const Tensor& aux,
                  const LossWeights& w);

// Aux target row for one sample: slot 0 for rehearsal samples, slot
// 1 + (class - prev_classes) for current-task samples.
std::int64_t aux_slot_for(std::int64_t class_index, std::int64_t prev_classes,
                          std::int64_t task_classes);

void grow_label_classifier(LabelClassifier& label, std::int64_t new_class_count,
                           std::int64_t d, Rng& rng);

}  // namespace dpformer
