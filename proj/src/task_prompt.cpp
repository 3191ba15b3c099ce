#include "dpformer/task_prompt.hpp"

#include <cstring>

namespace dpformer {

TaskPromptModule TaskPromptModule::init(Rng& rng, std::int64_t d, int heads) {
    TaskPromptModule m;
    m.enc = make_msa_encoder_layer(rng, d, heads);
    return m;
}

void TaskPromptModule::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < prototypes.size(); ++i)
        out.push_back({prefix + ".proto" + std::to_string(i), prototypes[i]});
    out.push_back({prefix + ".selector.w", sel_w});
    out.push_back({prefix + ".selector.b", sel_b});
    collect_encoder_layer(enc, prefix + ".enc", out);
}

void TaskPromptModule::collect_trainable(std::vector<Tensor>& out) const {
    for (std::size_t i = static_cast<std::size_t>(frozen_count); i < prototypes.size(); ++i)
        out.push_back(prototypes[i]);
    out.push_back(sel_w);
    out.push_back(sel_b);
    std::vector<NamedTensor> named;
    collect_encoder_layer(enc, "", named);
    for (auto& nt : named) out.push_back(nt.tensor);
}

std::int64_t TaskPromptModule::pool_param_count() const {
    std::int64_t n = 0;
    for (const Tensor& p : prototypes) n += p.numel();
    if (sel_w.defined()) n += sel_w.numel() + sel_b.numel();
    return n;
}

TaskSelection select_task_prototype(const Tensor& pooled, const TaskPromptModule& m) {
    if (m.prototypes.empty()) throw ContractError("select_task_prototype: empty pool");
    if (!m.sel_w.defined() || m.sel_w.rows() != static_cast<std::int64_t>(m.prototypes.size()))
        throw LifecycleError("select_task_prototype: selector rows != pool size");
    if (pooled.rows() != 1 || pooled.cols() != m.sel_w.cols())
        throw DimensionError("select_task_prototype: query shape mismatch");
    const std::int64_t t = m.sel_w.rows();
    const std::int64_t d = m.sel_w.cols();
    TaskSelection sel;
    sel.logits = Tensor({1, t});
    for (std::int64_t r = 0; r < t; ++r) {
        double acc = m.sel_b.at(r);
        for (std::int64_t c = 0; c < d; ++c) acc += m.sel_w.at(r, c) * pooled.at(c);
        sel.logits.at(r) = acc;
        // Softmax is monotone, so the argmax of the logits is the argmax of
        // the softmax; strict > keeps ties at the lowest index.
        if (r == 0 || acc > sel.logits.at(sel.index)) sel.index = static_cast<int>(r);
    }
    sel.prototype = m.prototypes[static_cast<std::size_t>(sel.index)];
    return sel;
}

Tensor average_task_prototype(Tape& tape, const TaskPromptModule& m) {
    if (m.prototypes.empty()) throw ContractError("average_task_prototype: empty pool");
    return average_of(tape, m.prototypes);
}

TokenSequence task_prompt_forward(Tape& tape, const TokenSequence& z_cls,
                                  const TaskPromptModule& m,
                                  const std::vector<int>* pinned,
                                  std::vector<int>* selected_out,
                                  Tensor* logits_out,
                                  bool selector_detached) {
    if (m.prototypes.empty()) throw ContractError("task_prompt_forward: empty pool");
    if (m.prototypes.front().cols() != z_cls.dim())
        throw DimensionError("task_prompt_forward: prototype width != token width");
    if (m.sel_w.rows() != static_cast<std::int64_t>(m.prototypes.size()))
        throw LifecycleError("task_prompt_forward: selector rows != pool size");
    const std::int64_t b = z_cls.batch;
    const std::int64_t n = z_cls.length;
    if (pinned && static_cast<std::int64_t>(pinned->size()) != b)
        throw ContractError("task_prompt_forward: pinned index count != batch");

    // The selector normally reads the pooled summary through the tape, so
    // its supervision also pushes task-discrimination pressure back into
    // the features. Detaching snaps the summary to a constant and trains
    // the selector head alone, which is useful for isolating that effect.
    Tensor pooled = patch_avg_pool(tape, z_cls);
    if (selector_detached) {
        Tensor snap({pooled.rows(), pooled.cols()});
        std::memcpy(snap.data(), pooled.data(),
                    static_cast<std::size_t>(pooled.numel()) * sizeof(double));
        pooled = snap;
    }
    Tensor logits = add_row_bias(tape, matmul_nt(tape, pooled, m.sel_w), m.sel_b);
    if (logits_out) *logits_out = logits;

    std::vector<int> idx(static_cast<std::size_t>(b));
    for (std::int64_t s = 0; s < b; ++s) {
        if (pinned) {
            const int j = (*pinned)[static_cast<std::size_t>(s)];
            if (j < 0 || j >= static_cast<int>(m.prototypes.size()))
                throw ContractError("task_prompt_forward: pinned index out of range");
            idx[static_cast<std::size_t>(s)] = j;
        } else {
            int best = 0;
            for (std::int64_t r = 1; r < logits.cols(); ++r)
                if (logits.at(s, r) > logits.at(s, best)) best = static_cast<int>(r);
            idx[static_cast<std::size_t>(s)] = best;
        }
    }
    if (selected_out) *selected_out = idx;

    Tensor chosen = gather_rows_from(tape, m.prototypes, idx);
    Tensor avg = average_task_prototype(tape, m);
    TokenSequence prompted;
    prompted.tokens = concat_prompt(tape, chosen, avg, z_cls.tokens, b, n);
    prompted.batch = b;
    prompted.length = n + 2;
    return encoder_layer_forward(tape, prompted, m.enc);
}

void grow_task_pool(TaskPromptModule& m, int task, Rng& rng) {
    if (task < 1) throw ContractError("grow_task_pool: task index starts at 1");
    if (task <= m.grown_for_task)
        throw LifecycleError("grow_task_pool: already grown for task " +
                             std::to_string(m.grown_for_task));
    const std::int64_t d = m.enc.ln1.gain.cols();
    m.frozen_count = static_cast<int>(m.prototypes.size());

    Tensor proto = gaussian_init(rng, {1, d}, kInitStd);
    proto.set_requires_grad(true);
    m.prototypes.push_back(proto);

    const std::int64_t t = static_cast<std::int64_t>(m.prototypes.size());
    Tensor w({t, d}, true);
    Tensor bias({1, t}, true);
    Tensor row = gaussian_init(rng, {1, d}, kInitStd);
    Tensor row_b = gaussian_init(rng, {1, 1}, kInitStd);
    for (std::int64_t r = 0; r + 1 < t; ++r) {
        bias.at(r) = m.sel_b.at(r);
        for (std::int64_t c = 0; c < d; ++c) w.at(r, c) = m.sel_w.at(r, c);
    }
    for (std::int64_t c = 0; c < d; ++c) w.at(t - 1, c) = row.at(c);
    bias.at(t - 1) = row_b.at(0);
    m.sel_w = w;
    m.sel_b = bias;
    m.grown_for_task = task;
}

}  // namespace dpformer
