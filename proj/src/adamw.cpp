#include "dpformer/adamw.hpp"

#include <cmath>

namespace dpformer {

AdamW::AdamW(std::vector<Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
    // lr zero is legal: a step becomes the identity, which callers use to
    // probe that nothing else mutates parameters.
    if (!(cfg_.lr >= 0.0)) throw ConfigError("adamw: learning rate must be nonnegative");
    if (cfg_.beta1 < 0.0 || cfg_.beta1 >= 1.0 || cfg_.beta2 < 0.0 || cfg_.beta2 >= 1.0)
        throw ConfigError("adamw: betas must lie in [0, 1)");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const Tensor& p : params_) {
        if (!p.defined()) throw ContractError("adamw: undefined parameter");
        m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
        v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    }
}

void AdamW::step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t pi = 0; pi < params_.size(); ++pi) {
        Tensor& p = params_[pi];
        const double* g = p.grad_data();  // nullptr means zero gradient
        double* m = m_[pi].data();
        double* v = v_[pi].data();
        double* w = p.data();
        const std::int64_t n = p.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            const double gi = g ? g[i] : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            w[i] -= cfg_.lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[i]);
        }
    }
}

void AdamW::zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
}

}  // namespace dpformer
