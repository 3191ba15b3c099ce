#include "dpformer/finite_diff.hpp"

#include <algorithm>
#include <cmath>

namespace dpformer {

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h) {
    if (!(h > 0.0)) throw ContractError("finite_diff_grad: h must be positive");
    Tensor probe = x.clone();
    Tensor grad(x.shape());
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double xi = probe.data()[i];
        probe.data()[i] = xi + h;
        const double fp = f(probe);
        probe.data()[i] = xi - h;
        const double fm = f(probe);
        probe.data()[i] = xi;
        if (!std::isfinite(fp) || !std::isfinite(fm))
            throw NumericError("finite_diff_grad: non-finite function value");
        grad.data()[i] = (fp - fm) / (2.0 * h);
    }
    return grad;
}

double max_rel_err(const Tensor& a, const Tensor& b, double floor) {
    if (a.shape() != b.shape()) throw DimensionError("max_rel_err: shape mismatch");
    double worst = 0.0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double av = a.data()[i], bv = b.data()[i];
        const double denom = std::max({floor, std::fabs(av), std::fabs(bv)});
        worst = std::max(worst, std::fabs(av - bv) / denom);
    }
    return worst;
}

}  // namespace dpformer
