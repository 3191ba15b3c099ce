#pragma once

#include <cstdint>
#include <vector>

#include "dpformer/tensor.hpp"

namespace dpformer {

struct AdamWConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// AdamW with decoupled weight decay: moments see only the raw gradient,
// decay is applied directly to the parameter at update time. A parameter
// with no gradient buffer counts as zero gradient.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, AdamWConfig cfg);

    void step();
    void zero_grad();

    std::int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    const std::vector<Tensor>& params() const { return params_; }

    // Moment buffers, exposed for checkpointing. Shapes mirror params().
    std::vector<std::vector<double>>& moments_m() { return m_; }
    std::vector<std::vector<double>>& moments_v() { return v_; }
    const std::vector<std::vector<double>>& moments_m() const { return m_; }
    const std::vector<std::vector<double>>& moments_v() const { return v_; }
    void set_step_count(std::int64_t n) { step_ = n; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
    AdamWConfig cfg_;
    std::int64_t step_ = 0;
};

}  // namespace dpformer
