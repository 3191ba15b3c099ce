#include "dpformer/gradcheck.hpp"

#include <algorithm>
#include <cstdio>

#include "dpformer/finite_diff.hpp"

namespace dpformer {

namespace {

// One combined objective exercising every loss path: label BCE, the
// distillation term against a frozen task-1 teacher, the aux head, the
// selector cross entropy, and the prototype-routing cross entropy.
double composed_loss(Tape& tape, const ModelState& m, const Tensor& images,
                     const Tensor& labels6, const Tensor& teacher_probs, const Tensor& aux_y,
                     const Tensor& task_y, const Tensor& proto_y, const ForwardOptions& opt) {
    ForwardResult fr = model_forward(tape, m, images, 2, opt);
    Tensor bce = loss_bce(tape, fr.label_probs, labels6);
    Tensor kd = loss_kd(tape, fr.label_probs, teacher_probs, 3);
    Tensor ax = loss_aux(tape, fr.aux_probs, aux_y);
    LossWeights w = LossWeights::for_task(3, 6);
    Tensor total = total_loss(tape, bce, kd, ax, w);
    Tensor sel_logp = log_clamp(tape, softmax_rows(tape, fr.task_logits), 1e-12);
    Tensor sel_ce = scale(tape, sum_all(tape, mul(tape, task_y, sel_logp)), -0.5);
    Tensor full = add(tape, total, scale(tape, sel_ce, 0.1));
    Tensor scores = cosine_scores(tape, fr.encoder_pooled, m.cls->prototypes);
    Tensor route_logp =
        log_clamp(tape, softmax_rows(tape, scale(tape, scores, 10.0)), 1e-12);
    Tensor route_ce = scale(tape, sum_all(tape, mul(tape, proto_y, route_logp)), -0.5);
    full = add(tape, full, scale(tape, route_ce, 0.7));
    if (tape.recording()) tape.backward(full);
    return full.scalar_value();
}

}  // namespace

GradcheckReport model_gradcheck(unsigned seed, bool verbose) {
    Rng rng(seed);
    ModelConfig cfg;
    cfg.channels = 1;
    cfg.height = 3;
    cfg.width = 3;
    cfg.dim = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.kernel = 7;
    cfg.attention = AttentionKind::DiNA;
    cfg.tokenizer_stages = {{3, 1}};

    ModelState m = ModelState::init(rng, cfg);
    m.begin_task(3, rng);
    ModelState teacher = m.deep_clone();
    m.begin_task(3, rng);

    Tensor images({2, 9});
    for (std::int64_t i = 0; i < images.numel(); ++i) images.data()[i] = rng.uniform();
    // Sample 0 plays a rehearsal sample of class 1; sample 1 is a
    // current-task sample of class 4.
    Tensor labels6({2, 6});
    labels6.at(0, 1) = 1.0;
    labels6.at(1, 4) = 1.0;
    Tensor aux_y({2, 4});
    aux_y.at(0, aux_slot_for(1, 3, 3)) = 1.0;
    aux_y.at(1, aux_slot_for(4, 3, 3)) = 1.0;
    Tensor task_y({2, 2});
    task_y.at(0, 0) = 1.0;
    task_y.at(1, 1) = 1.0;
    Tensor proto_y({2, 6});
    proto_y.at(0, 1) = 1.0;
    proto_y.at(1, 4) = 1.0;

    Tape off(false);
    Tensor teacher_probs =
        model_forward(off, teacher, images, 2).label_probs.clone();

    std::vector<int> pin_class = {1, 4};
    std::vector<int> pin_task = {0, 1};
    ForwardOptions opt;
    opt.pin_class = &pin_class;
    opt.pin_task = &pin_task;
    opt.selector_detached = false;

    Tape tape;
    composed_loss(tape, m, images, labels6, teacher_probs, aux_y, task_y, proto_y, opt);

    GradcheckReport report;
    for (const NamedTensor& nt : m.named_params()) {
        Tensor target = nt.tensor;
        Tensor analytic(target.shape());
        for (std::int64_t i = 0; i < target.numel(); ++i)
            analytic.data()[i] = target.grad_at(i);

        auto probe = [&](const Tensor& value) {
            Tensor saved = target.clone();
            target.copy_data_from(value);
            Tape t(false);
            const double v =
                composed_loss(t, m, images, labels6, teacher_probs, aux_y, task_y, proto_y, opt);
            target.copy_data_from(saved);
            return v;
        };
        Tensor numeric =
            finite_diff_grad([&](const Tensor& p) { return probe(p); }, target, 1e-5);
        const double err = max_rel_err(analytic, numeric);
        report.entries.push_back({nt.name, err});
        report.worst = std::max(report.worst, err);
        if (verbose) std::printf("%-32s rel_err %.3e\n", nt.name.c_str(), err);
    }
    return report;
}

}  // namespace dpformer
