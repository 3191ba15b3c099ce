#include "dpformer/model.hpp"

#include <numeric>

namespace dpformer {

namespace {

Tensor clone_keep_grad_flag(const Tensor& t) {
    if (!t.defined()) return Tensor();
    Tensor c = t.clone();
    c.set_requires_grad(t.requires_grad());
    return c;
}

LayerNormParams clone_ln(const LayerNormParams& p) {
    LayerNormParams c;
    c.gain = clone_keep_grad_flag(p.gain);
    c.bias = clone_keep_grad_flag(p.bias);
    return c;
}

MlpParams clone_mlp(const MlpParams& p) {
    MlpParams c;
    c.w1 = clone_keep_grad_flag(p.w1);
    c.b1 = clone_keep_grad_flag(p.b1);
    c.w2 = clone_keep_grad_flag(p.w2);
    c.b2 = clone_keep_grad_flag(p.b2);
    return c;
}

AttentionParams clone_attn(const AttentionParams& p) {
    AttentionParams c;
    c.wq = clone_keep_grad_flag(p.wq);
    c.bq = clone_keep_grad_flag(p.bq);
    c.wk = clone_keep_grad_flag(p.wk);
    c.bk = clone_keep_grad_flag(p.bk);
    c.wv = clone_keep_grad_flag(p.wv);
    c.bv = clone_keep_grad_flag(p.bv);
    c.wo = clone_keep_grad_flag(p.wo);
    c.bo = clone_keep_grad_flag(p.bo);
    return c;
}

EncoderLayer clone_layer(const EncoderLayer& l) {
    EncoderLayer c;
    c.ln1 = clone_ln(l.ln1);
    c.attn = clone_attn(l.attn);
    c.ln2 = clone_ln(l.ln2);
    c.mlp = clone_mlp(l.mlp);
    c.cfg = l.cfg;
    return c;
}

}  // namespace

ModelState ModelState::init(Rng& rng, const ModelConfig& cfg) {
    if (cfg.dim < 1 || cfg.dim % cfg.heads != 0)
        throw ConfigError("model: dim must be a positive multiple of heads");
    ModelState m;
    m.cfg = cfg;
    m.tok = Tokenizer::init(rng, cfg.channels, cfg.height, cfg.width, cfg.dim,
                            cfg.tokenizer_stages);
    auto [hp, wp] = m.tok.output_extent();
    m.encoder = EncoderStack::init(rng, cfg.layers, cfg.dim, cfg.heads, cfg.attention, hp, wp,
                                   cfg.kernel);
    if (cfg.class_prompt) m.cls = ClassPromptModule::init(rng, cfg.dim, cfg.heads);
    if (cfg.task_prompt) m.tsk = TaskPromptModule::init(rng, cfg.dim, cfg.heads);
    return m;
}

void ModelState::begin_task(std::int64_t new_classes, Rng& rng) {
    if (new_classes < 1) throw ContractError("begin_task: need at least one new class");
    ++current_task;
    classes_per_task.push_back(new_classes);
    if (cls) grow_class_pool(*cls, static_cast<int>(new_classes), current_task, rng);
    if (tsk) grow_task_pool(*tsk, current_task, rng);
    grow_label_classifier(label, new_classes, cfg.dim, rng);
    if (cfg.aux_head) aux = AuxClassifier::init(rng, cfg.dim, new_classes);
}

ModelState ModelState::deep_clone() const {
    ModelState c;
    c.cfg = cfg;
    c.classes_per_task = classes_per_task;
    c.current_task = current_task;

    c.tok = tok;
    for (std::size_t i = 0; i < tok.stages.size(); ++i) {
        c.tok.stages[i].w = clone_keep_grad_flag(tok.stages[i].w);
        c.tok.stages[i].b = clone_keep_grad_flag(tok.stages[i].b);
    }
    for (const EncoderLayer& l : encoder.layers) c.encoder.layers.push_back(clone_layer(l));

    if (cls) {
        ClassPromptModule cc;
        for (const Tensor& p : cls->prototypes) cc.prototypes.push_back(clone_keep_grad_flag(p));
        cc.created_task = cls->created_task;
        cc.frozen_count = cls->frozen_count;
        cc.grown_for_task = cls->grown_for_task;
        cc.enc = clone_layer(cls->enc);
        c.cls = std::move(cc);
    }
    if (tsk) {
        TaskPromptModule tc;
        for (const Tensor& p : tsk->prototypes) tc.prototypes.push_back(clone_keep_grad_flag(p));
        tc.frozen_count = tsk->frozen_count;
        tc.grown_for_task = tsk->grown_for_task;
        tc.sel_w = clone_keep_grad_flag(tsk->sel_w);
        tc.sel_b = clone_keep_grad_flag(tsk->sel_b);
        tc.enc = clone_layer(tsk->enc);
        c.tsk = std::move(tc);
    }
    c.label.w = clone_keep_grad_flag(label.w);
    c.label.b = clone_keep_grad_flag(label.b);
    if (aux) {
        AuxClassifier ac;
        ac.w = clone_keep_grad_flag(aux->w);
        ac.b = clone_keep_grad_flag(aux->b);
        c.aux = std::move(ac);
    }
    return c;
}

std::vector<NamedTensor> ModelState::named_params() const {
    std::vector<NamedTensor> out;
    tok.collect("tokenizer", out);
    encoder.collect("encoder", out);
    if (cls) cls->collect("class_prompt", out);
    if (tsk) tsk->collect("task_prompt", out);
    label.collect("label", out);
    if (aux) aux->collect("aux", out);
    return out;
}

std::vector<Tensor> ModelState::trainable_params() const {
    std::vector<Tensor> out;
    std::vector<NamedTensor> core;
    tok.collect("tokenizer", core);
    encoder.collect("encoder", core);
    for (auto& nt : core) out.push_back(nt.tensor);
    if (cls) cls->collect_trainable(out);
    if (tsk) tsk->collect_trainable(out);
    if (label.w.defined()) {
        out.push_back(label.w);
        out.push_back(label.b);
    }
    if (aux) {
        out.push_back(aux->w);
        out.push_back(aux->b);
    }
    return out;
}

std::int64_t ModelState::param_count() const {
    std::int64_t n = 0;
    for (const NamedTensor& nt : named_params()) n += nt.tensor.numel();
    return n;
}

std::int64_t ModelState::prompt_param_count() const {
    std::int64_t n = 0;
    if (cls) n += cls->pool_param_count();
    if (tsk) n += tsk->pool_param_count();
    return n;
}

std::int64_t ModelState::total_classes() const {
    return std::accumulate(classes_per_task.begin(), classes_per_task.end(),
                           static_cast<std::int64_t>(0));
}

std::int64_t ModelState::task_classes() const {
    return classes_per_task.empty() ? 0 : classes_per_task.back();
}

ForwardResult model_forward(Tape& tape, const ModelState& m, const Tensor& images,
                            std::int64_t batch, const ForwardOptions& opt) {
    if (m.current_task == 0) throw LifecycleError("model_forward: no task started");
    TokenSequence z = tokenize(tape, images, batch, m.tok);
    z = encode(tape, z, m.encoder);

    ForwardResult r;
    r.encoder_pooled = patch_avg_pool(tape, z);
    if (m.cls) z = class_prompt_forward(tape, z, *m.cls, opt.pin_class, &r.class_sel);
    if (m.tsk)
        z = task_prompt_forward(tape, z, *m.tsk, opt.pin_task, &r.task_sel, &r.task_logits,
                                opt.selector_detached);

    ClassifyResult heads = classify(tape, z, m.label, m.aux ? &*m.aux : nullptr);
    r.label_probs = heads.label_probs;
    r.aux_probs = heads.aux_probs;
    r.pooled = heads.pooled;
    return r;
}

std::vector<int> predict(const ModelState& m, const Tensor& images, std::int64_t batch) {
    Tape tape(false);
    ForwardResult r = model_forward(tape, m, images, batch);
    std::vector<int> out(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b) {
        int best = 0;
        for (std::int64_t c = 1; c < r.label_probs.cols(); ++c)
            if (r.label_probs.at(b, c) > r.label_probs.at(b, best)) best = static_cast<int>(c);
        out[static_cast<std::size_t>(b)] = best;
    }
    return out;
}

}  // namespace dpformer
