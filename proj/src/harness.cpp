#include "dpformer/harness.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dpformer/head_losses.hpp"

namespace dpformer {

namespace {

// Cosine similarities live in [-1, 1]; dividing by this spreads them enough
// for a softmax over the pool to commit to one prototype.
constexpr double kRoutingTemperature = 0.1;

struct TrainItem {
    std::uint32_t sample = 0;
    int class_index = 0;
    int source_task = 0;
};

// Fills one row of the batch tensor, optionally flipped and shifted by one
// pixel with zero padding.
void write_image(double* dst, const float* src, std::int64_t c, std::int64_t h, std::int64_t w,
                 bool flip, std::int64_t dy, std::int64_t dx) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
        for (std::int64_t y = 0; y < h; ++y) {
            for (std::int64_t x = 0; x < w; ++x) {
                const std::int64_t sy = y + dy;
                std::int64_t sx = (flip ? w - 1 - x : x) + dx;
                double v = 0.0;
                if (sy >= 0 && sy < h && sx >= 0 && sx < w)
                    v = src[(ch * h + sy) * w + sx];
                dst[(ch * h + y) * w + x] = v;
            }
        }
    }
}

Tensor batch_images(const Dataset& data, const std::vector<TrainItem>& items,
                    std::size_t begin, std::size_t end, bool augment, Rng& rng) {
    const std::int64_t pix = data.pixel_count();
    Tensor images({static_cast<std::int64_t>(end - begin), pix});
    for (std::size_t i = begin; i < end; ++i) {
        bool flip = false;
        std::int64_t dy = 0, dx = 0;
        if (augment) {
            flip = rng.uniform() < 0.5;
            dy = rng.uniform_int(3) - 1;
            dx = rng.uniform_int(3) - 1;
        }
        write_image(images.data() + static_cast<std::int64_t>(i - begin) * pix,
                    data.image(items[i].sample), data.channels, data.height, data.width, flip,
                    dy, dx);
    }
    return images;
}

}  // namespace

CILScenario split_tasks(Dataset train, Dataset test, int steps, Rng& rng) {
    if (steps < 1) throw ConfigError("split_tasks: need at least one step");
    if (train.channels != test.channels || train.height != test.height ||
        train.width != test.width)
        throw ConfigError("split_tasks: train/test geometry mismatch");
    const std::int64_t classes = train.num_classes();
    if (classes < 1) throw ConfigError("split_tasks: empty training set");
    if (classes % steps != 0)
        throw ConfigError("split_tasks: " + std::to_string(classes) +
                          " classes not divisible by " + std::to_string(steps) + " steps");

    CILScenario sc;
    sc.order.resize(static_cast<std::size_t>(classes));
    for (std::int64_t c = 0; c < classes; ++c) sc.order[static_cast<std::size_t>(c)] = static_cast<int>(c);
    shuffle(rng, sc.order);
    sc.label_to_index.assign(static_cast<std::size_t>(classes), -1);
    for (std::int64_t i = 0; i < classes; ++i)
        sc.label_to_index[static_cast<std::size_t>(sc.order[static_cast<std::size_t>(i)])] =
            static_cast<int>(i);

    const std::int64_t per_task = classes / steps;
    sc.tasks.resize(static_cast<std::size_t>(steps));
    for (int t = 0; t < steps; ++t) {
        for (std::int64_t j = 0; j < per_task; ++j)
            sc.tasks[static_cast<std::size_t>(t)].class_indices.push_back(
                static_cast<int>(t * per_task + j));
    }
    for (std::size_t i = 0; i < train.size(); ++i) {
        const std::uint16_t raw = train.labels[i];
        if (raw >= classes) throw ContractError("split_tasks: train label out of range");
        const int idx = sc.label_to_index[raw];
        sc.tasks[static_cast<std::size_t>(idx / per_task)].train_samples.push_back(
            static_cast<std::uint32_t>(i));
    }
    for (std::size_t i = 0; i < test.size(); ++i) {
        const std::uint16_t raw = test.labels[i];
        if (raw >= classes) throw ContractError("split_tasks: test label out of range");
        const int idx = sc.label_to_index[raw];
        sc.tasks[static_cast<std::size_t>(idx / per_task)].test_samples.push_back(
            static_cast<std::uint32_t>(i));
    }
    sc.train = std::move(train);
    sc.test = std::move(test);
    return sc;
}

std::vector<std::int64_t> RehearsalBuffer::per_class_counts(std::int64_t classes) const {
    std::vector<std::int64_t> counts(static_cast<std::size_t>(classes), 0);
    for (const BufferEntry& e : entries) {
        if (e.class_index >= 0 && e.class_index < classes)
            ++counts[static_cast<std::size_t>(e.class_index)];
    }
    return counts;
}

void buffer_update(RehearsalBuffer& buffer, const CILScenario& sc, int task, Rng& rng) {
    if (task < 1 || task > sc.task_count()) throw ContractError("buffer_update: bad task index");
    const std::int64_t seen =
        static_cast<std::int64_t>(task) * sc.classes_per_task();
    if (buffer.capacity < seen)
        throw ConfigError("buffer_update: capacity " + std::to_string(buffer.capacity) +
                          " below " + std::to_string(seen) + " seen classes");
    const std::int64_t quota = buffer.capacity / seen;
    const std::int64_t remainder = buffer.capacity % seen;
    auto class_quota = [&](std::int64_t j) { return quota + (j < remainder ? 1 : 0); };

    // Down-sample what the buffer already holds, class by class.
    std::vector<std::vector<BufferEntry>> kept(static_cast<std::size_t>(seen));
    for (const BufferEntry& e : buffer.entries)
        kept[static_cast<std::size_t>(e.class_index)].push_back(e);
    for (std::int64_t j = 0; j < seen; ++j) {
        auto& k = kept[static_cast<std::size_t>(j)];
        const std::int64_t q = class_quota(j);
        if (static_cast<std::int64_t>(k.size()) > q) {
            shuffle(rng, k);
            k.resize(static_cast<std::size_t>(q));
        }
    }

    // Admit the finished task's classes.
    const TaskSplit& split = sc.tasks[static_cast<std::size_t>(task - 1)];
    for (int cls : split.class_indices) {
        std::vector<std::uint32_t> candidates;
        for (std::uint32_t s : split.train_samples) {
            if (sc.label_to_index[sc.train.labels[s]] == cls) candidates.push_back(s);
        }
        shuffle(rng, candidates);
        const std::int64_t q =
            std::min<std::int64_t>(class_quota(cls), static_cast<std::int64_t>(candidates.size()));
        auto& k = kept[static_cast<std::size_t>(cls)];
        k.clear();
        for (std::int64_t i = 0; i < q; ++i) k.push_back({candidates[static_cast<std::size_t>(i)], cls, task});
    }

    buffer.entries.clear();
    for (std::int64_t j = 0; j < seen; ++j)
        for (const BufferEntry& e : kept[static_cast<std::size_t>(j)]) buffer.entries.push_back(e);
    if (static_cast<std::int64_t>(buffer.entries.size()) > buffer.capacity)
        throw ContractError("buffer_update: capacity overrun");
}

ModelState train_task(ModelState& m, const CILScenario& sc, int task,
                      const RehearsalBuffer& buffer, const ModelState* teacher,
                      const TrainConfig& cfg, Rng& rng) {
    if (m.current_task != task) throw LifecycleError("train_task: model not grown for this task");
    if ((task >= 2) != (teacher != nullptr))
        throw ContractError("train_task: teacher required exactly from the second task on");

    const std::int64_t prev = m.prev_classes();
    const std::int64_t total = m.total_classes();
    const std::int64_t cur = m.task_classes();
    const bool use_kd = cfg.kd && task >= 2;
    const bool use_aux = cfg.aux && m.aux.has_value() && (task >= 2 || cfg.aux_at_task1);
    const bool use_selector = cfg.selector_supervision && m.tsk.has_value();
    // Dropping the distillation term also drops its mixture weight, so the
    // label loss runs at full strength.
    const LossWeights weights = LossWeights::for_task(use_kd ? prev : 0, total, cfg.lambda);

    std::vector<TrainItem> items;
    const TaskSplit& split = sc.tasks[static_cast<std::size_t>(task - 1)];
    for (std::uint32_t s : split.train_samples)
        items.push_back({s, sc.label_to_index[sc.train.labels[s]], task});
    for (const BufferEntry& e : buffer.entries) items.push_back({e.sample, e.class_index, e.source_task});

    AdamW opt(m.trainable_params(), cfg.opt);
    const std::int64_t batches_per_epoch =
        static_cast<std::int64_t>((items.size() + static_cast<std::size_t>(cfg.batch) - 1) /
                                  static_cast<std::size_t>(cfg.batch));
    const std::int64_t total_steps = std::max<std::int64_t>(1, cfg.epochs * batches_per_epoch);
    std::int64_t step_no = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle(rng, items);
        for (std::size_t start = 0; start < items.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t stop = std::min(items.size(), start + static_cast<std::size_t>(cfg.batch));
            const std::int64_t b = static_cast<std::int64_t>(stop - start);
            Tensor images = batch_images(sc.train, items, start, stop, cfg.augment, rng);

            Tensor onehot({b, total});
            for (std::int64_t i = 0; i < b; ++i)
                onehot.at(i, items[start + static_cast<std::size_t>(i)].class_index) = 1.0;

            Tensor teacher_probs;
            if (use_kd) {
                Tape off(false);
                teacher_probs = model_forward(off, *teacher, images, b).label_probs;
            }

            std::vector<int> cls_idx(static_cast<std::size_t>(b));
            std::vector<int> tsk_idx(static_cast<std::size_t>(b));
            for (std::int64_t i = 0; i < b; ++i) {
                const TrainItem& it = items[start + static_cast<std::size_t>(i)];
                cls_idx[static_cast<std::size_t>(i)] = static_cast<int>(it.class_index);
                tsk_idx[static_cast<std::size_t>(i)] = it.source_task - 1;
            }
            ForwardOptions fo;
            if (cfg.route_by_label) {
                if (m.cls) fo.pin_class = &cls_idx;
                if (m.tsk) fo.pin_task = &tsk_idx;
            }

            Tape tape;
            ForwardResult fr = model_forward(tape, m, images, b, fo);
            Tensor bce = loss_bce(tape, fr.label_probs, onehot);
            Tensor kd = use_kd ? loss_kd(tape, fr.label_probs, teacher_probs, prev)
                               : Tensor::scalar(0.0);
            Tensor ax = Tensor::scalar(0.0);
            if (use_aux) {
                Tensor aux_y({b, cur + 1});
                for (std::int64_t i = 0; i < b; ++i)
                    aux_y.at(i, aux_slot_for(items[start + static_cast<std::size_t>(i)].class_index,
                                             prev, cur)) = 1.0;
                ax = loss_aux(tape, fr.aux_probs, aux_y);
            }
            Tensor loss = total_loss(tape, bce, kd, ax, weights);
            if (use_selector) {
                Tensor task_y({b, static_cast<std::int64_t>(task)});
                for (std::int64_t i = 0; i < b; ++i)
                    task_y.at(i, items[start + static_cast<std::size_t>(i)].source_task - 1) = 1.0;
                Tensor logp = log_clamp(tape, softmax_rows(tape, fr.task_logits), 1e-12);
                Tensor ce = scale(tape, sum_all(tape, mul(tape, task_y, logp)),
                                  -1.0 / static_cast<double>(b));
                loss = add(tape, loss, scale(tape, ce, cfg.selector_weight));
            }
            if (cfg.prototype_alignment && m.cls) {
                // Cross entropy over sharpened cosine scores, the same
                // quantity the selection block ranks at inference. Trainable
                // prototypes are pulled toward their class's features; frozen
                // ones act in reverse and pull features back toward the
                // stored anchor while pushing them off rival anchors.
                Tensor scores = cosine_scores(tape, fr.encoder_pooled, m.cls->prototypes);
                Tensor proto_y({b, static_cast<std::int64_t>(m.cls->prototypes.size())});
                for (std::int64_t i = 0; i < b; ++i)
                    proto_y.at(i, cls_idx[static_cast<std::size_t>(i)]) = 1.0;
                Tensor sharp = scale(tape, scores, 1.0 / kRoutingTemperature);
                Tensor logp = log_clamp(tape, softmax_rows(tape, sharp), 1e-12);
                Tensor ce = scale(tape, sum_all(tape, mul(tape, proto_y, logp)),
                                  -1.0 / static_cast<double>(b));
                loss = add(tape, loss, scale(tape, ce, cfg.align_weight));
            }
            if (!loss.all_finite()) throw NumericError("train_task: non-finite loss");

            tape.backward(loss);
            if (cfg.lr_decay) {
                const double phase = static_cast<double>(step_no) / static_cast<double>(total_steps);
                opt.set_lr(cfg.opt.lr *
                           (0.1 + 0.9 * 0.5 * (1.0 + std::cos(std::numbers::pi * phase))));
            }
            ++step_no;
            opt.step();
            opt.zero_grad();
            // Frozen prototypes sit outside the optimizer but still collect
            // adjoints through the pool averages; discard those.
            if (m.cls)
                for (int j = 0; j < m.cls->frozen_count; ++j)
                    m.cls->prototypes[static_cast<std::size_t>(j)].drop_grad();
            if (m.tsk)
                for (int j = 0; j < m.tsk->frozen_count; ++j)
                    m.tsk->prototypes[static_cast<std::size_t>(j)].drop_grad();
        }
    }
    return m.deep_clone();
}

EvalResult evaluate(const ModelState& m, const CILScenario& sc, int task) {
    if (task < 1 || task > sc.task_count()) throw ContractError("evaluate: bad task index");
    const std::int64_t classes = static_cast<std::int64_t>(task) * sc.classes_per_task();
    if (m.total_classes() < classes)
        throw LifecycleError("evaluate: model has not seen all requested classes");

    EvalResult r;
    r.per_class.assign(static_cast<std::size_t>(classes), 0.0);
    r.per_class_total.assign(static_cast<std::size_t>(classes), 0);
    std::vector<std::int64_t> correct(static_cast<std::size_t>(classes), 0);

    const std::int64_t pix = sc.test.pixel_count();
    constexpr std::int64_t kEvalBatch = 64;
    for (int t = 0; t < task; ++t) {
        const auto& samples = sc.tasks[static_cast<std::size_t>(t)].test_samples;
        for (std::size_t start = 0; start < samples.size();
             start += static_cast<std::size_t>(kEvalBatch)) {
            const std::size_t stop =
                std::min(samples.size(), start + static_cast<std::size_t>(kEvalBatch));
            const std::int64_t b = static_cast<std::int64_t>(stop - start);
            Tensor images({b, pix});
            for (std::int64_t i = 0; i < b; ++i) {
                const float* src = sc.test.image(samples[start + static_cast<std::size_t>(i)]);
                for (std::int64_t p = 0; p < pix; ++p) images.at(i, p) = src[p];
            }
            std::vector<int> pred = predict(m, images, b);
            for (std::int64_t i = 0; i < b; ++i) {
                const int truth =
                    sc.label_to_index[sc.test.labels[samples[start + static_cast<std::size_t>(i)]]];
                ++r.per_class_total[static_cast<std::size_t>(truth)];
                if (pred[static_cast<std::size_t>(i)] == truth)
                    ++correct[static_cast<std::size_t>(truth)];
            }
        }
    }
    std::int64_t all = 0, hit = 0;
    for (std::int64_t j = 0; j < classes; ++j) {
        const std::int64_t n = r.per_class_total[static_cast<std::size_t>(j)];
        r.per_class[static_cast<std::size_t>(j)] =
            n > 0 ? static_cast<double>(correct[static_cast<std::size_t>(j)]) / static_cast<double>(n)
                  : 0.0;
        all += n;
        hit += correct[static_cast<std::size_t>(j)];
    }
    r.overall = all > 0 ? static_cast<double>(hit) / static_cast<double>(all) : 0.0;
    return r;
}

std::pair<std::vector<double>, double> forgetting_scores(const MetricsLog& log, int t) {
    if (t < 2) throw ContractError("forgetting_scores: defined from the second task on");
    if (static_cast<int>(log.rows.size()) < t)
        throw ContractError("forgetting_scores: history missing tasks");
    const std::size_t prev_classes = log.rows[static_cast<std::size_t>(t - 2)].per_class_acc.size();
    const auto& current = log.rows[static_cast<std::size_t>(t - 1)].per_class_acc;
    if (current.size() < prev_classes)
        throw ContractError("forgetting_scores: current row lacks previous classes");

    std::vector<double> f(prev_classes, 0.0);
    double sum = 0.0;
    for (std::size_t j = 0; j < prev_classes; ++j) {
        double best = 0.0;
        bool seen = false;
        for (int mdl = 1; mdl <= t - 1; ++mdl) {
            const auto& acc = log.rows[static_cast<std::size_t>(mdl - 1)].per_class_acc;
            if (j < acc.size()) {
                best = seen ? std::max(best, acc[j]) : acc[j];
                seen = true;
            }
        }
        if (!seen) throw ContractError("forgetting_scores: class never evaluated");
        f[j] = best - current[j];
        sum += f[j];
    }
    return {std::move(f), prev_classes > 0 ? sum / static_cast<double>(prev_classes) : 0.0};
}

ExperimentResult run_experiment_full(Dataset train_data, Dataset test_data,
                                     const ExperimentConfig& cfg) {
    Rng master(cfg.seed);
    Rng split_rng = master.derive(1);
    Rng model_rng = master.derive(2);
    CILScenario sc = split_tasks(std::move(train_data), std::move(test_data), cfg.steps, split_rng);

    ModelConfig mc = cfg.model;
    mc.channels = sc.train.channels;
    mc.height = sc.train.height;
    mc.width = sc.train.width;
    mc.aux_head = cfg.train.aux;
    ModelState m = ModelState::init(model_rng, mc);

    RehearsalBuffer buffer;
    buffer.capacity = cfg.buffer_capacity;
    std::optional<ModelState> snapshot;
    MetricsLog log;

    for (int task = 1; task <= sc.task_count(); ++task) {
        m.begin_task(sc.classes_per_task(), model_rng);
        Rng task_rng = master.derive(100 + static_cast<std::uint64_t>(task));
        snapshot = train_task(m, sc, task, buffer, snapshot ? &*snapshot : nullptr, cfg.train,
                              task_rng);
        EvalResult ev = evaluate(m, sc, task);

        TaskMetrics row;
        row.task = task;
        row.overall_acc = ev.overall;
        row.last_acc = ev.overall;
        row.params = m.param_count();
        row.prompt_params = m.prompt_param_count();
        row.per_class_acc = ev.per_class;
        log.rows.push_back(std::move(row));

        double avg = 0.0;
        for (const TaskMetrics& r : log.rows) avg += r.overall_acc;
        log.rows.back().avg_acc = avg / static_cast<double>(log.rows.size());
        if (task >= 2) {
            auto [f, f_mean] = forgetting_scores(log, task);
            log.rows.back().per_class_f = std::move(f);
            log.rows.back().f_class = f_mean;
            log.rows.back().has_f = true;
        }

        Rng buffer_rng = master.derive(200 + static_cast<std::uint64_t>(task));
        buffer_update(buffer, sc, task, buffer_rng);
    }
    return {std::move(log), std::move(m), master.state()};
}

MetricsLog run_experiment(Dataset train_data, Dataset test_data, const ExperimentConfig& cfg) {
    return run_experiment_full(std::move(train_data), std::move(test_data), cfg).log;
}

}  // namespace dpformer
