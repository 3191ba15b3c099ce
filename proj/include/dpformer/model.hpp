#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "dpformer/class_prompt.hpp"
#include "dpformer/encoder.hpp"
#include "dpformer/head_losses.hpp"
#include "dpformer/task_prompt.hpp"

namespace dpformer {

struct ModelConfig {
    std::int64_t channels = 3;
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::int64_t dim = 96;
    int layers = 11;
    int heads = 4;
    int kernel = 7;
    AttentionKind attention = AttentionKind::DiNA;
    bool class_prompt = true;
    bool task_prompt = true;
    bool aux_head = true;
    // (patch, stride) per tokenizer stage, applied in order.
    std::vector<std::pair<std::int64_t, std::int64_t>> tokenizer_stages = {{3, 2}, {3, 2}};
};

// Per-sample routing overrides, used by gradient checks to keep the
// discrete prototype selections fixed while parameters are probed.
struct ForwardOptions {
    const std::vector<int>* pin_class = nullptr;
    const std::vector<int>* pin_task = nullptr;
    // Selector supervision may also shape pooled features, which is what lets
    // a task-prompt-only model hold its own; gradient checks always attach.
    bool selector_detached = false;
};

struct ForwardResult {
    Tensor label_probs;     // [B, classes_seen]
    Tensor aux_probs;       // undefined without an aux head
    Tensor task_logits;     // undefined without the task prompt module
    Tensor pooled;          // [B, D] final pooled features
    Tensor encoder_pooled;  // [B, D] backbone features before the prompt modules
    std::vector<int> class_sel;
    std::vector<int> task_sel;
};

// The whole network: tokenizer, encoder stack, optional prompt modules,
// label head, and the per-task aux head. Disabled modules are absent, not
// bypassed, so ablations change the parameter count.
struct ModelState {
    ModelConfig cfg;
    Tokenizer tok;
    EncoderStack encoder;
    std::optional<ClassPromptModule> cls;
    std::optional<TaskPromptModule> tsk;
    LabelClassifier label;
    std::optional<AuxClassifier> aux;
    std::vector<std::int64_t> classes_per_task;
    int current_task = 0;

    static ModelState init(Rng& rng, const ModelConfig& cfg);

    // Grows pools and the label head for the next task and rebuilds the aux
    // head. Draw order: class prototypes, task prototype + selector row,
    // label rows, aux head.
    void begin_task(std::int64_t new_classes, Rng& rng);

    ModelState deep_clone() const;
    std::vector<NamedTensor> named_params() const;
    std::vector<Tensor> trainable_params() const;  // frozen prototypes excluded
    std::int64_t param_count() const;
    std::int64_t prompt_param_count() const;  // pools and selector only

    std::int64_t total_classes() const;
    std::int64_t task_classes() const;
    std::int64_t prev_classes() const { return total_classes() - task_classes(); }
};

ForwardResult model_forward(Tape& tape, const ModelState& m, const Tensor& images,
                            std::int64_t batch, const ForwardOptions& opt = {});

// Label-head argmax per sample, no tape.
std::vector<int> predict(const ModelState& m, const Tensor& images, std::int64_t batch);

}  // namespace dpformer
