#include "dpformer/class_prompt.hpp"

#include <cmath>
#include <iostream>

namespace dpformer {

ClassPromptModule ClassPromptModule::init(Rng& rng, std::int64_t d, int heads) {
    ClassPromptModule m;
    m.enc = make_msa_encoder_layer(rng, d, heads);
    return m;
}

void ClassPromptModule::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < prototypes.size(); ++i)
        out.push_back({prefix + ".proto" + std::to_string(i), prototypes[i]});
    collect_encoder_layer(enc, prefix + ".enc", out);
}

void ClassPromptModule::collect_trainable(std::vector<Tensor>& out) const {
    for (std::size_t i = static_cast<std::size_t>(frozen_count); i < prototypes.size(); ++i)
        out.push_back(prototypes[i]);
    std::vector<NamedTensor> named;
    collect_encoder_layer(enc, "", named);
    for (auto& nt : named) out.push_back(nt.tensor);
}

std::int64_t ClassPromptModule::pool_param_count() const {
    std::int64_t n = 0;
    for (const Tensor& p : prototypes) n += p.numel();
    return n;
}

std::pair<int, Tensor> select_class_prototype(const Tensor& pooled,
                                              const ClassPromptModule& m) {
    if (m.prototypes.empty()) throw ContractError("select_class_prototype: empty pool");
    if (pooled.rows() != 1) throw DimensionError("select_class_prototype: query must be a row");
    const std::int64_t d = pooled.cols();
    double qn = 0.0;
    for (std::int64_t i = 0; i < d; ++i) qn += pooled.at(i) * pooled.at(i);
    qn = std::sqrt(qn);
    if (qn == 0.0) throw ContractError("select_class_prototype: zero-norm query");

    int best = -1;
    double best_cs = 0.0;
    for (std::size_t j = 0; j < m.prototypes.size(); ++j) {
        const Tensor& proto = m.prototypes[j];
        if (proto.cols() != d)
            throw DimensionError("select_class_prototype: prototype width mismatch");
        double pn = 0.0, dot = 0.0;
        for (std::int64_t i = 0; i < d; ++i) {
            pn += proto.at(i) * proto.at(i);
            dot += pooled.at(i) * proto.at(i);
        }
        pn = std::sqrt(pn);
        if (pn == 0.0) {
            std::cerr << "warning: class prototype " << j
                      << " has zero norm, skipping in selection\n";
            continue;
        }
        const double cs = dot / (qn * pn);
        if (best < 0 || cs > best_cs) {
            best = static_cast<int>(j);
            best_cs = cs;
        }
    }
    if (best < 0) throw ContractError("select_class_prototype: every prototype has zero norm");
    return {best, m.prototypes[static_cast<std::size_t>(best)]};
}

Tensor average_class_prototype(Tape& tape, const ClassPromptModule& m) {
    if (m.prototypes.empty()) throw ContractError("average_class_prototype: empty pool");
    return average_of(tape, m.prototypes);
}

TokenSequence class_prompt_forward(Tape& tape, const TokenSequence& zl,
                                   const ClassPromptModule& m,
                                   const std::vector<int>* pinned,
                                   std::vector<int>* selected_out) {
    if (m.prototypes.empty()) throw ContractError("class_prompt_forward: empty pool");
    if (m.prototypes.front().cols() != zl.dim())
        throw DimensionError("class_prompt_forward: prototype width != token width");
    const std::int64_t b = zl.batch;
    const std::int64_t n = zl.length;
    const std::int64_t d = zl.dim();
    if (pinned && static_cast<std::int64_t>(pinned->size()) != b)
        throw ContractError("class_prompt_forward: pinned index count != batch");

    // Selection is discrete routing over an off-tape pooled summary; only
    // the chosen prototype's value enters the graph.
    std::vector<int> idx(static_cast<std::size_t>(b));
    if (pinned) {
        for (std::int64_t s = 0; s < b; ++s) {
            const int j = (*pinned)[static_cast<std::size_t>(s)];
            if (j < 0 || j >= static_cast<int>(m.prototypes.size()))
                throw ContractError("class_prompt_forward: pinned index out of range");
            idx[static_cast<std::size_t>(s)] = j;
        }
    } else {
        Tensor probe({1, d});
        for (std::int64_t s = 0; s < b; ++s) {
            for (std::int64_t c = 0; c < d; ++c) {
                double acc = 0.0;
                for (std::int64_t r = 0; r < n; ++r) acc += zl.tokens.at(s * n + r, c);
                probe.at(c) = acc / static_cast<double>(n);
            }
            idx[static_cast<std::size_t>(s)] = select_class_prototype(probe, m).first;
        }
    }
    if (selected_out) *selected_out = idx;

    Tensor chosen = gather_rows_from(tape, m.prototypes, idx);
    Tensor avg = average_class_prototype(tape, m);
    TokenSequence prompted;
    prompted.tokens = concat_prompt(tape, chosen, avg, zl.tokens, b, n);
    prompted.batch = b;
    prompted.length = n + 2;
    return encoder_layer_forward(tape, prompted, m.enc);
}

void grow_class_pool(ClassPromptModule& m, int new_class_count, int task, Rng& rng) {
    if (new_class_count < 1) throw ContractError("grow_class_pool: need at least one class");
    if (task < 1) throw ContractError("grow_class_pool: task index starts at 1");
    if (task <= m.grown_for_task)
        throw LifecycleError("grow_class_pool: already grown for task " +
                             std::to_string(m.grown_for_task));
    const std::int64_t d = m.enc.ln1.gain.cols();
    m.frozen_count = static_cast<int>(m.prototypes.size());
    for (int i = 0; i < new_class_count; ++i) {
        Tensor proto = gaussian_init(rng, {1, d}, kInitStd);
        proto.set_requires_grad(true);
        m.prototypes.push_back(proto);
        m.created_task.push_back(task);
    }
    m.grown_for_task = task;
}

}  // namespace dpformer
