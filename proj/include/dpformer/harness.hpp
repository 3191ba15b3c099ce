#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "dpformer/adamw.hpp"
#include "dpformer/dataset.hpp"
#include "dpformer/model.hpp"

namespace dpformer {

// One task's slice of the class-incremental split. Class indices are the
// model's output indices (contiguous in learning order), not the dataset's
// raw labels.
struct TaskSplit {
    std::vector<int> class_indices;
    std::vector<std::uint32_t> train_samples;
    std::vector<std::uint32_t> test_samples;
};

struct CILScenario {
    Dataset train;
    Dataset test;
    std::vector<TaskSplit> tasks;
    std::vector<int> order;           // order[model index] = raw label
    std::vector<int> label_to_index;  // raw label -> model index

    int task_count() const { return static_cast<int>(tasks.size()); }
    std::int64_t classes_per_task() const {
        return tasks.empty() ? 0 : static_cast<std::int64_t>(tasks.front().class_indices.size());
    }
};

// Shuffles the classes with the given generator and deals them into
// `steps` equal disjoint groups.
CILScenario split_tasks(Dataset train, Dataset test, int steps, Rng& rng);

struct BufferEntry {
    std::uint32_t sample = 0;  // index into scenario.train
    int class_index = 0;
    int source_task = 0;       // 1-based
};

struct RehearsalBuffer {
    std::int64_t capacity = 2000;
    std::vector<BufferEntry> entries;

    std::vector<std::int64_t> per_class_counts(std::int64_t classes) const;
};

// End-of-task rebalance: every seen class keeps floor(capacity / seen)
// samples, with the remainder going to the lowest class indices.
void buffer_update(RehearsalBuffer& buffer, const CILScenario& sc, int task, Rng& rng);

struct TrainConfig {
    int epochs = 30;
    std::int64_t batch = 32;
    AdamWConfig opt;
    double lambda = 0.1;
    bool kd = true;
    bool aux = true;
    bool selector_supervision = true;
    double selector_weight = 0.1;
    // During optimization the sample's label picks its prompt (inference keeps
    // similarity search), and a cross-entropy term over the same cosine scores
    // the search ranks teaches each prototype to win exactly its own class.
    // Without these the pool degenerates: one early prototype wins nearly
    // every lookup and the rest never train.
    bool route_by_label = true;
    bool prototype_alignment = true;
    double align_weight = 1.0;
    // Optional cosine decay to 10% of the base rate over each task's steps.
    // Off by default: at small scale the shorter effective schedule costs
    // more accuracy through underfitting than the settled tail returns.
    bool lr_decay = false;
    bool augment = true;
    bool aux_at_task1 = false;
};

// One task's optimization loop: current data plus rehearsal, fresh
// optimizer, distillation against the frozen teacher from the previous
// task. Returns the end-of-task snapshot.
ModelState train_task(ModelState& m, const CILScenario& sc, int task,
                      const RehearsalBuffer& buffer, const ModelState* teacher,
                      const TrainConfig& cfg, Rng& rng);

struct EvalResult {
    std::vector<double> per_class;
    std::vector<std::int64_t> per_class_total;
    double overall = 0.0;
};

// Label-head argmax over every test sample of classes seen through
// `task`; the aux head plays no part here.
EvalResult evaluate(const ModelState& m, const CILScenario& sc, int task);

struct TaskMetrics {
    int task = 0;
    double overall_acc = 0.0;
    double avg_acc = 0.0;
    double last_acc = 0.0;
    double f_class = 0.0;
    bool has_f = false;
    std::int64_t params = 0;
    std::int64_t prompt_params = 0;
    std::vector<double> per_class_acc;
    std::vector<double> per_class_f;  // previous classes only, when has_f
};

struct MetricsLog {
    std::vector<TaskMetrics> rows;
};

// Per-class best-ever-minus-current over models 1..t-1, plus the mean.
std::pair<std::vector<double>, double> forgetting_scores(const MetricsLog& log, int t);

struct ExperimentConfig {
    ModelConfig model;
    TrainConfig train;
    int steps = 5;
    std::int64_t buffer_capacity = 2000;
    unsigned seed = 0;
};

MetricsLog run_experiment(Dataset train_data, Dataset test_data, const ExperimentConfig& cfg);

// Same loop, but hands back the trained model and the master generator's
// end state for checkpointing.
struct ExperimentResult {
    MetricsLog log;
    ModelState model;
    Rng::State rng;
};
ExperimentResult run_experiment_full(Dataset train_data, Dataset test_data,
                                     const ExperimentConfig& cfg);

}  // namespace dpformer
