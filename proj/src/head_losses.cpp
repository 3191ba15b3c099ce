#include "dpformer/head_losses.hpp"

namespace dpformer {

namespace {

constexpr double kLogEps = 1e-12;

void require_onehot(const Tensor& onehot, const char* who) {
    for (std::int64_t r = 0; r < onehot.rows(); ++r) {
        int ones = 0;
        for (std::int64_t c = 0; c < onehot.cols(); ++c) {
            const double v = onehot.at(r, c);
            if (v == 1.0)
                ++ones;
            else if (v != 0.0)
                throw ContractError(std::string(who) + ": target entries must be 0 or 1");
        }
        if (ones != 1) throw ContractError(std::string(who) + ": target row is not one-hot");
    }
}

// Averaged per-component binary cross entropy. Shared by the label and aux
// losses, which differ only in how the targets are built.
Tensor mean_bce(Tape& tape, const Tensor& probs, const Tensor& onehot, const char* who) {
    if (probs.rows() != onehot.rows() || probs.cols() != onehot.cols())
        throw DimensionError(std::string(who) + ": prediction/target shape mismatch");
    require_onehot(onehot, who);
    const std::int64_t b = probs.rows();
    const std::int64_t k = probs.cols();
    Tensor ones = Tensor::full({b, k}, 1.0);
    Tensor log_p = log_clamp(tape, probs, kLogEps);
    Tensor log_not_p = log_clamp(tape, sub(tape, ones, probs), kLogEps);
    Tensor hit = mul(tape, onehot, log_p);
    Tensor miss = mul(tape, sub(tape, ones, onehot), log_not_p);
    Tensor summed = sum_all(tape, add(tape, hit, miss));
    return scale(tape, summed, -1.0 / static_cast<double>(b * k));
}

}  // namespace

void LabelClassifier::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    if (!w.defined()) return;
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

AuxClassifier AuxClassifier::init(Rng& rng, std::int64_t d, std::int64_t task_classes) {
    if (task_classes < 1) throw ContractError("aux head: need at least one class");
    AuxClassifier aux;
    aux.w = gaussian_init(rng, {task_classes + 1, d}, kInitStd);
    aux.b = gaussian_init(rng, {1, task_classes + 1}, kInitStd);
    aux.w.set_requires_grad(true);
    aux.b.set_requires_grad(true);
    return aux;
}

void AuxClassifier::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".w", w});
    out.push_back({prefix + ".b", b});
}

LossWeights LossWeights::for_task(std::int64_t prev_classes, std::int64_t total_classes,
                                  double lambda) {
    if (total_classes < 1) throw ContractError("loss weights: no classes");
    if (prev_classes < 0 || prev_classes >= total_classes)
        throw ContractError("loss weights: previous classes must be in [0, total)");
    LossWeights w;
    w.alpha = static_cast<double>(prev_classes) / static_cast<double>(total_classes);
    w.lambda = lambda;
    return w;
}

ClassifyResult classify(Tape& tape, const TokenSequence& z, const LabelClassifier& label,
                        const AuxClassifier* aux) {
    if (label.classes() == 0) throw LifecycleError("classify: label head has no rows");
    if (label.w.cols() != z.dim())
        throw DimensionError("classify: label head width != token width");
    ClassifyResult r;
    r.pooled = patch_avg_pool(tape, z);
    r.label_probs =
        softmax_rows(tape, add_row_bias(tape, matmul_nt(tape, r.pooled, label.w), label.b));
    if (aux) {
        if (aux->w.cols() != z.dim())
            throw DimensionError("classify: aux head width != token width");
        r.aux_probs =
            softmax_rows(tape, add_row_bias(tape, matmul_nt(tape, r.pooled, aux->w), aux->b));
    }
    return r;
}

Tensor loss_bce(Tape& tape, const Tensor& probs, const Tensor& onehot) {
    return mean_bce(tape, probs, onehot, "loss_bce");
}

Tensor loss_kd(Tape& tape, const Tensor& current_probs, const Tensor& teacher_probs,
               std::int64_t prev_classes) {
    if (prev_classes < 1)
        throw ContractError("loss_kd: no previous classes, skip the term at the first task");
    if (current_probs.rows() != teacher_probs.rows())
        throw DimensionError("loss_kd: batch size mismatch");
    if (current_probs.cols() < prev_classes || teacher_probs.cols() < prev_classes)
        throw DimensionError("loss_kd: fewer outputs than previous classes");
    const std::int64_t b = current_probs.rows();

    Tensor p_slice = col_slice(tape, current_probs, 0, prev_classes);
    Tensor p = div_colvec(tape, p_slice, row_sum(tape, p_slice));
    Tensor q_slice = col_slice(tape, teacher_probs, 0, prev_classes);
    Tensor q = div_colvec(tape, q_slice, row_sum(tape, q_slice));

    Tensor log_ratio = sub(tape, log_clamp(tape, p, kLogEps), log_clamp(tape, q, kLogEps));
    Tensor summed = sum_all(tape, mul(tape, p, log_ratio));
    return scale(tape, summed, 1.0 / static_cast<double>(b));
}

Tensor loss_aux(Tape& tape, const Tensor& aux_probs, const Tensor& aux_onehot) {
    return mean_bce(tape, aux_probs, aux_onehot, "loss_aux");
}

Tensor total_loss(Tape& tape, const Tensor& bce, const Tensor& kd, const Tensor& aux,
                  const LossWeights& w) {
    if (!(w.alpha >= 0.0 && w.alpha < 1.0))
        throw ContractError("total_loss: alpha must lie in [0, 1)");
    Tensor mixed = add(tape, scale(tape, bce, 1.0 - w.alpha), scale(tape, kd, w.alpha));
    return add(tape, mixed, scale(tape, aux, w.lambda));
}

std::int64_t aux_slot_for(std::int64_t class_index, std::int64_t prev_classes,
                          std::int64_t task_classes) {
    if (class_index < 0 || class_index >= prev_classes + task_classes)
        throw ContractError("aux_slot_for: class index out of range");
    if (class_index < prev_classes) return 0;
    return 1 + (class_index - prev_classes);
}

void grow_label_classifier(LabelClassifier& label, std::int64_t new_class_count,
                           std::int64_t d, Rng& rng) {
    if (new_class_count < 1) throw ContractError("grow_label_classifier: nothing to add");
    const std::int64_t old = label.classes();
    Tensor w({old + new_class_count, d}, true);
    Tensor b({1, old + new_class_count}, true);
    for (std::int64_t r = 0; r < old; ++r) {
        b.at(r) = label.b.at(r);
        for (std::int64_t c = 0; c < d; ++c) w.at(r, c) = label.w.at(r, c);
    }
    Tensor fresh_w = gaussian_init(rng, {new_class_count, d}, kInitStd);
    Tensor fresh_b = gaussian_init(rng, {1, new_class_count}, kInitStd);
    for (std::int64_t r = 0; r < new_class_count; ++r) {
        b.at(old + r) = fresh_b.at(r);
        for (std::int64_t c = 0; c < d; ++c) w.at(old + r, c) = fresh_w.at(r, c);
    }
    label.w = w;
    label.b = b;
}

}  // namespace dpformer
