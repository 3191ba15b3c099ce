#include "dpformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <string>

#include "gemm.hpp"

namespace dpformer {

namespace {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d <= 0) throw DimensionError("tensor extents must be positive");
        n *= d;
    }
    return n;
}

void require_2d(const Tensor& t, const char* who) {
    if (t.ndim() != 2) throw DimensionError(std::string(who) + ": tensor must be 2-D");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
    if (a.shape() != b.shape()) throw DimensionError(std::string(who) + ": shape mismatch");
}

}  // namespace

struct Tensor::Impl {
    std::vector<std::int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty means absent
    bool has_grad = false;
    bool requires_grad = false;
};

Tensor::Impl& Tensor::impl() {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
}

const Tensor::Impl& Tensor::impl() const {
    if (!impl_) throw ContractError("use of undefined tensor");
    return *impl_;
}

Tensor::Tensor(std::vector<std::int64_t> shape, bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    impl_ = std::make_shared<Impl>();
    impl_->shape = std::move(shape);
    impl_->data.assign(static_cast<std::size_t>(n), 0.0);
    impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape, bool requires_grad) {
    return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.impl().data.begin(), t.impl().data.end(), value);
    return t;
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> data,
                         bool requires_grad) {
    const std::int64_t n = shape_numel(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        throw DimensionError("from_data: element count does not match shape");
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = std::move(shape);
    t.impl_->data = std::move(data);
    t.impl_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_data({1, 1}, {value}, requires_grad);
}

const std::vector<std::int64_t>& Tensor::shape() const { return impl().shape; }
std::int64_t Tensor::ndim() const { return static_cast<std::int64_t>(impl().shape.size()); }
std::int64_t Tensor::numel() const { return static_cast<std::int64_t>(impl().data.size()); }

std::int64_t Tensor::rows() const {
    require_2d(*this, "rows");
    return impl().shape[0];
}

std::int64_t Tensor::cols() const {
    require_2d(*this, "cols");
    return impl().shape[1];
}

double* Tensor::data() { return impl().data.data(); }
const double* Tensor::data() const { return impl().data.data(); }

double& Tensor::at(std::int64_t i) { return impl().data.at(static_cast<std::size_t>(i)); }
double Tensor::at(std::int64_t i) const { return impl().data.at(static_cast<std::size_t>(i)); }

double& Tensor::at(std::int64_t r, std::int64_t c) {
    require_2d(*this, "at");
    return impl().data.at(static_cast<std::size_t>(r * impl().shape[1] + c));
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
    require_2d(*this, "at");
    return impl().data.at(static_cast<std::size_t>(r * impl().shape[1] + c));
}

double Tensor::scalar_value() const {
    if (numel() != 1) throw ContractError("scalar_value: tensor is not scalar");
    return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }
void Tensor::set_requires_grad(bool rg) { impl().requires_grad = rg; }

bool Tensor::has_grad() const { return impl().has_grad; }

void Tensor::ensure_grad() {
    Impl& im = impl();
    if (!im.has_grad) {
        im.grad.assign(im.data.size(), 0.0);
        im.has_grad = true;
    }
}

void Tensor::zero_grad() {
    Impl& im = impl();
    if (im.has_grad) std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

void Tensor::drop_grad() {
    Impl& im = impl();
    im.grad.clear();
    im.grad.shrink_to_fit();
    im.has_grad = false;
}

double* Tensor::grad_data() { return impl().has_grad ? impl().grad.data() : nullptr; }
const double* Tensor::grad_data() const { return impl().has_grad ? impl().grad.data() : nullptr; }

double Tensor::grad_at(std::int64_t i) const {
    const Impl& im = impl();
    return im.has_grad ? im.grad.at(static_cast<std::size_t>(i)) : 0.0;
}

void Tensor::accumulate_grad(const double* g) {
    ensure_grad();
    Impl& im = impl();
    for (std::size_t i = 0; i < im.grad.size(); ++i) im.grad[i] += g[i];
}

Tensor Tensor::clone() const {
    const Impl& im = impl();
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->shape = im.shape;
    t.impl_->data = im.data;
    t.impl_->requires_grad = im.requires_grad;
    return t;
}

void Tensor::copy_data_from(const Tensor& src) {
    require_same_shape(*this, src, "copy_data_from");
    impl().data = src.impl().data;
}

bool Tensor::all_finite() const {
    for (double v : impl().data) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::record(std::function<void()> backward_fn) {
    if (recording_) nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    Tensor seed = loss;
    seed.ensure_grad();
    seed.grad_data()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::clear() { nodes_.clear(); }

// ---------------------------------------------------------------------------
// Primitive ops
// ---------------------------------------------------------------------------

namespace {

bool wants_grad(const Tape& tape, const Tensor& a) { return tape.recording() && a.requires_grad(); }

bool wants_grad(const Tape& tape, const Tensor& a, const Tensor& b) {
    return tape.recording() && (a.requires_grad() || b.requires_grad());
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) throw DimensionError("matmul: inner extents differ");
    Tensor out({m, n}, wants_grad(tape, a, b));
    detail::gemm_nn(a.data(), k, b.data(), n, out.data(), n, m, k, n, false);
    if (out.requires_grad()) {
        tape.record([a = a, b = b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (a.requires_grad()) {
                a.ensure_grad();
                detail::gemm_nt(g, n, b.data(), n, a.grad_data(), k, m, n, k, true);
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                detail::gemm_tn(a.data(), k, g, n, b.grad_data(), n, k, m, n, true);
            }
        });
    }
    return out;
}

Tensor matmul_nt(Tape& tape, const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul_nt");
    require_2d(b, "matmul_nt");
    const std::int64_t m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k) throw DimensionError("matmul_nt: inner extents differ");
    Tensor out({m, n}, wants_grad(tape, a, b));
    detail::gemm_nt(a.data(), k, b.data(), k, out.data(), n, m, k, n, false);
    if (out.requires_grad()) {
        tape.record([a = a, b = b, out, m, k, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (a.requires_grad()) {
                a.ensure_grad();
                detail::gemm_nn(g, n, b.data(), k, a.grad_data(), k, m, n, k, true);
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                detail::gemm_tn(g, n, a.data(), k, b.grad_data(), k, n, m, k, true);
            }
        });
    }
    return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out(a.shape(), wants_grad(tape, a, b));
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (out.requires_grad()) {
        tape.record([a = a, b = b, out]() mutable {
            if (!out.has_grad()) return;
            if (a.requires_grad()) a.accumulate_grad(out.grad_data());
            if (b.requires_grad()) b.accumulate_grad(out.grad_data());
        });
    }
    return out;
}

Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    Tensor out(a.shape(), wants_grad(tape, a, b));
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (out.requires_grad()) {
        tape.record([a = a, b = b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (a.requires_grad()) a.accumulate_grad(g);
            if (b.requires_grad()) {
                b.ensure_grad();
                double* bg = b.grad_data();
                for (std::int64_t i = 0; i < n; ++i) bg[i] -= g[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    Tensor out(a.shape(), wants_grad(tape, a, b));
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (out.requires_grad()) {
        tape.record([a = a, b = b, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (a.requires_grad()) {
                a.ensure_grad();
                double* ag = a.grad_data();
                for (std::int64_t i = 0; i < n; ++i) ag[i] += g[i] * b.data()[i];
            }
            if (b.requires_grad()) {
                b.ensure_grad();
                double* bg = b.grad_data();
                for (std::int64_t i = 0; i < n; ++i) bg[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor scale(Tape& tape, const Tensor& a, double c) {
    Tensor out(a.shape(), wants_grad(tape, a));
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (out.requires_grad()) {
        tape.record([a = a, out, c, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            a.ensure_grad();
            double* ag = a.grad_data();
            for (std::int64_t i = 0; i < n; ++i) ag[i] += g[i] * c;
        });
    }
    return out;
}

Tensor add_row_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
    require_2d(x, "add_row_bias");
    require_2d(bias, "add_row_bias");
    const std::int64_t m = x.rows(), n = x.cols();
    if (bias.rows() != 1 || bias.cols() != n)
        throw DimensionError("add_row_bias: bias must be [1, cols]");
    Tensor out({m, n}, wants_grad(tape, x, bias));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double* outr = out.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) outr[j] = xr[j] + bias.data()[j];
    }
    if (out.requires_grad()) {
        tape.record([x = x, bias = bias, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (x.requires_grad()) x.accumulate_grad(g);
            if (bias.requires_grad()) {
                bias.ensure_grad();
                double* bg = bias.grad_data();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double* gr = g + i * n;
                    for (std::int64_t j = 0; j < n; ++j) bg[j] += gr[j];
                }
            }
        });
    }
    return out;
}

namespace {
constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;
}  // namespace

Tensor gelu(Tape& tape, const Tensor& x) {
    Tensor out(x.shape(), wants_grad(tape, x));
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const double v = x.data()[i];
        out.data()[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double v = x.data()[i];
                const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
                const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
                xg[i] += g[i] * (cdf + v * pdf);
            }
        });
    }
    return out;
}

Tensor log_clamp(Tape& tape, const Tensor& x, double eps) {
    if (eps <= 0.0 || eps >= 0.5) throw ContractError("log_clamp: eps must be in (0, 0.5)");
    Tensor out(x.shape(), wants_grad(tape, x));
    const std::int64_t n = x.numel();
    const double hi = 1.0 - eps;
    for (std::int64_t i = 0; i < n; ++i) {
        out.data()[i] = std::log(std::clamp(x.data()[i], eps, hi));
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, n, eps, hi]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t i = 0; i < n; ++i) {
                const double v = x.data()[i];
                if (v > eps && v < hi) xg[i] += g[i] / v;
            }
        });
    }
    return out;
}

Tensor softmax_rows(Tape& tape, const Tensor& x) {
    require_2d(x, "softmax_rows");
    const std::int64_t m = x.rows(), n = x.cols();
    if (n < 1) throw DimensionError("softmax_rows: empty axis");
    Tensor out({m, n}, wants_grad(tape, x));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double* outr = out.data() + i * n;
        double mx = xr[0];
        for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double sum = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            outr[j] = std::exp(xr[j] - mx);
            sum += outr[j];
        }
        const double inv = 1.0 / sum;
        for (std::int64_t j = 0; j < n; ++j) outr[j] *= inv;
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* yr = out.data() + i * n;
                const double* gr = g + i * n;
                double dot = 0.0;
                for (std::int64_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
                double* xgr = xg + i * n;
                for (std::int64_t j = 0; j < n; ++j) xgr[j] += yr[j] * (gr[j] - dot);
            }
        });
    }
    return out;
}

Tensor sum_all(Tape& tape, const Tensor& x) {
    Tensor out({1, 1}, wants_grad(tape, x));
    const std::int64_t n = x.numel();
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) s += x.data()[i];
    out.data()[0] = s;
    if (out.requires_grad()) {
        tape.record([x = x, out, n]() mutable {
            if (!out.has_grad()) return;
            const double g = out.grad_data()[0];
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t i = 0; i < n; ++i) xg[i] += g;
        });
    }
    return out;
}

Tensor row_sum(Tape& tape, const Tensor& x) {
    require_2d(x, "row_sum");
    const std::int64_t m = x.rows(), n = x.cols();
    Tensor out({m, 1}, wants_grad(tape, x));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double s = 0.0;
        for (std::int64_t j = 0; j < n; ++j) s += xr[j];
        out.data()[i] = s;
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t i = 0; i < m; ++i) {
                double* xgr = xg + i * n;
                for (std::int64_t j = 0; j < n; ++j) xgr[j] += g[i];
            }
        });
    }
    return out;
}

Tensor div_colvec(Tape& tape, const Tensor& x, const Tensor& s) {
    require_2d(x, "div_colvec");
    require_2d(s, "div_colvec");
    const std::int64_t m = x.rows(), n = x.cols();
    if (s.rows() != m || s.cols() != 1) throw DimensionError("div_colvec: scale must be [rows, 1]");
    Tensor out({m, n}, wants_grad(tape, x, s));
    for (std::int64_t i = 0; i < m; ++i) {
        const double inv = 1.0 / s.data()[i];
        const double* xr = x.data() + i * n;
        double* outr = out.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) outr[j] = xr[j] * inv;
    }
    if (out.requires_grad()) {
        tape.record([x = x, s = s, out, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (x.requires_grad()) {
                x.ensure_grad();
                double* xg = x.grad_data();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double inv = 1.0 / s.data()[i];
                    const double* gr = g + i * n;
                    double* xgr = xg + i * n;
                    for (std::int64_t j = 0; j < n; ++j) xgr[j] += gr[j] * inv;
                }
            }
            if (s.requires_grad()) {
                s.ensure_grad();
                double* sg = s.grad_data();
                for (std::int64_t i = 0; i < m; ++i) {
                    const double sv = s.data()[i];
                    const double* gr = g + i * n;
                    const double* xr = x.data() + i * n;
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) acc += gr[j] * xr[j];
                    sg[i] -= acc / (sv * sv);
                }
            }
        });
    }
    return out;
}

Tensor col_slice(Tape& tape, const Tensor& x, std::int64_t c0, std::int64_t c1) {
    require_2d(x, "col_slice");
    const std::int64_t m = x.rows(), n = x.cols();
    if (c0 < 0 || c1 > n || c0 >= c1) throw DimensionError("col_slice: bad column range");
    const std::int64_t w = c1 - c0;
    Tensor out({m, w}, wants_grad(tape, x));
    for (std::int64_t i = 0; i < m; ++i) {
        std::memcpy(out.data() + i * w, x.data() + i * n + c0,
                    static_cast<std::size_t>(w) * sizeof(double));
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, m, n, c0, w]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* gr = g + i * w;
                double* xgr = xg + i * n + c0;
                for (std::int64_t j = 0; j < w; ++j) xgr[j] += gr[j];
            }
        });
    }
    return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
    require_2d(x, "layer_norm");
    const std::int64_t m = x.rows(), n = x.cols();
    if (n < 2) throw DimensionError("layer_norm: feature dim must be >= 2");
    if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n)
        throw DimensionError("layer_norm: gain/bias must be [1, cols]");
    const bool rg =
        tape.recording() && (x.requires_grad() || gain.requires_grad() || bias.requires_grad());
    Tensor out({m, n}, rg);
    // Normalized activations and inverse stds are kept for the backward pass.
    auto xhat = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m * n));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
    for (std::int64_t i = 0; i < m; ++i) {
        const double* xr = x.data() + i * n;
        double mean = 0.0;
        for (std::int64_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::int64_t j = 0; j < n; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        const double istd = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<std::size_t>(i)] = istd;
        double* hr = xhat->data() + i * n;
        double* outr = out.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            hr[j] = (xr[j] - mean) * istd;
            outr[j] = hr[j] * gain.data()[j] + bias.data()[j];
        }
    }
    if (rg) {
        tape.record([x = x, gain = gain, bias = bias, out, xhat, inv_std, m, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (gain.requires_grad()) gain.ensure_grad();
            if (bias.requires_grad()) bias.ensure_grad();
            if (x.requires_grad()) x.ensure_grad();
            for (std::int64_t i = 0; i < m; ++i) {
                const double* gr = g + i * n;
                const double* hr = xhat->data() + i * n;
                if (gain.requires_grad() || bias.requires_grad()) {
                    double* gg = gain.grad_data();
                    double* bg = bias.grad_data();
                    for (std::int64_t j = 0; j < n; ++j) {
                        if (gg) gg[j] += gr[j] * hr[j];
                        if (bg) bg[j] += gr[j];
                    }
                }
                if (x.requires_grad()) {
                    // dxhat = g*gain; dx = istd*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double dh = gr[j] * gain.data()[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                    }
                    mean_dh /= static_cast<double>(n);
                    mean_dh_h /= static_cast<double>(n);
                    const double istd = (*inv_std)[static_cast<std::size_t>(i)];
                    double* xgr = x.grad_data() + i * n;
                    for (std::int64_t j = 0; j < n; ++j) {
                        const double dh = gr[j] * gain.data()[j];
                        xgr[j] += istd * (dh - mean_dh - hr[j] * mean_dh_h);
                    }
                }
            }
        });
    }
    return out;
}

Tensor pool_rows(Tape& tape, const Tensor& x, std::int64_t groups, std::int64_t rows_per_group) {
    require_2d(x, "pool_rows");
    if (groups < 1 || rows_per_group < 1) throw ContractError("pool_rows: empty sequence");
    const std::int64_t n = x.cols();
    if (x.rows() != groups * rows_per_group)
        throw DimensionError("pool_rows: rows != groups * rows_per_group");
    Tensor out({groups, n}, wants_grad(tape, x));
    const double inv = 1.0 / static_cast<double>(rows_per_group);
    for (std::int64_t b = 0; b < groups; ++b) {
        double* outr = out.data() + b * n;
        for (std::int64_t r = 0; r < rows_per_group; ++r) {
            const double* xr = x.data() + (b * rows_per_group + r) * n;
            for (std::int64_t j = 0; j < n; ++j) outr[j] += xr[j];
        }
        for (std::int64_t j = 0; j < n; ++j) outr[j] *= inv;
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, groups, rows_per_group, n, inv]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t b = 0; b < groups; ++b) {
                const double* gr = g + b * n;
                for (std::int64_t r = 0; r < rows_per_group; ++r) {
                    double* xgr = xg + (b * rows_per_group + r) * n;
                    for (std::int64_t j = 0; j < n; ++j) xgr[j] += gr[j] * inv;
                }
            }
        });
    }
    return out;
}

Tensor concat_prompt(Tape& tape, const Tensor& first, const Tensor& second, const Tensor& rest,
                     std::int64_t batch, std::int64_t rows_per_group) {
    require_2d(first, "concat_prompt");
    require_2d(second, "concat_prompt");
    require_2d(rest, "concat_prompt");
    const std::int64_t n = rest.cols();
    if (first.rows() != batch || first.cols() != n)
        throw DimensionError("concat_prompt: first must be [batch, cols]");
    if (second.rows() != 1 || second.cols() != n)
        throw DimensionError("concat_prompt: second must be [1, cols]");
    if (rest.rows() != batch * rows_per_group)
        throw DimensionError("concat_prompt: rest rows != batch * rows_per_group");
    const std::int64_t out_rows = rows_per_group + 2;
    const bool rg = tape.recording() &&
                    (first.requires_grad() || second.requires_grad() || rest.requires_grad());
    Tensor out({batch * out_rows, n}, rg);
    for (std::int64_t b = 0; b < batch; ++b) {
        double* base = out.data() + b * out_rows * n;
        std::memcpy(base, first.data() + b * n, static_cast<std::size_t>(n) * sizeof(double));
        std::memcpy(base + n, second.data(), static_cast<std::size_t>(n) * sizeof(double));
        std::memcpy(base + 2 * n, rest.data() + b * rows_per_group * n,
                    static_cast<std::size_t>(rows_per_group * n) * sizeof(double));
    }
    if (rg) {
        tape.record([first = first, second = second, rest = rest, out, batch, rows_per_group, out_rows, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            if (first.requires_grad()) first.ensure_grad();
            if (second.requires_grad()) second.ensure_grad();
            if (rest.requires_grad()) rest.ensure_grad();
            for (std::int64_t b = 0; b < batch; ++b) {
                const double* base = g + b * out_rows * n;
                if (first.requires_grad()) {
                    double* fg = first.grad_data() + b * n;
                    for (std::int64_t j = 0; j < n; ++j) fg[j] += base[j];
                }
                if (second.requires_grad()) {
                    double* sg = second.grad_data();
                    for (std::int64_t j = 0; j < n; ++j) sg[j] += base[n + j];
                }
                if (rest.requires_grad()) {
                    double* rgp = rest.grad_data() + b * rows_per_group * n;
                    const double* src = base + 2 * n;
                    for (std::int64_t j = 0; j < rows_per_group * n; ++j) rgp[j] += src[j];
                }
            }
        });
    }
    return out;
}

Tensor gather_rows_from(Tape& tape, const std::vector<Tensor>& pool, const std::vector<int>& idx) {
    if (pool.empty()) throw ContractError("gather_rows_from: empty pool");
    const std::int64_t n = pool.front().cols();
    for (const Tensor& p : pool) {
        if (p.rows() != 1 || p.cols() != n)
            throw DimensionError("gather_rows_from: pool entries must be [1, D] with equal D");
    }
    const std::int64_t batch = static_cast<std::int64_t>(idx.size());
    bool any_rg = false;
    for (int i : idx) {
        if (i < 0 || i >= static_cast<int>(pool.size()))
            throw ContractError("gather_rows_from: index out of range");
        any_rg = any_rg || pool[static_cast<std::size_t>(i)].requires_grad();
    }
    Tensor out({batch, n}, tape.recording() && any_rg);
    for (std::int64_t b = 0; b < batch; ++b) {
        std::memcpy(out.data() + b * n, pool[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])].data(),
                    static_cast<std::size_t>(n) * sizeof(double));
    }
    if (out.requires_grad()) {
        tape.record([pool, idx, out, batch, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            for (std::int64_t b = 0; b < batch; ++b) {
                Tensor p = pool[static_cast<std::size_t>(idx[static_cast<std::size_t>(b)])];
                if (!p.requires_grad()) continue;
                p.ensure_grad();
                double* pg = p.grad_data();
                const double* gr = g + b * n;
                for (std::int64_t j = 0; j < n; ++j) pg[j] += gr[j];
            }
        });
    }
    return out;
}

Tensor cosine_scores(Tape& tape, const Tensor& queries, const std::vector<Tensor>& pool) {
    if (pool.empty()) throw ContractError("cosine_scores: empty pool");
    const std::int64_t n = queries.cols();
    for (const Tensor& p : pool) {
        if (p.rows() != 1 || p.cols() != n)
            throw DimensionError("cosine_scores: pool entries must be [1, D] matching the queries");
    }
    const std::int64_t batch = queries.rows();
    const std::int64_t count = static_cast<std::int64_t>(pool.size());
    bool any_rg = queries.requires_grad();
    for (const Tensor& p : pool) any_rg = any_rg || p.requires_grad();

    constexpr double kNormFloor = 1e-12;
    std::vector<double> qn(static_cast<std::size_t>(batch));
    std::vector<double> pn(static_cast<std::size_t>(count));
    for (std::int64_t b = 0; b < batch; ++b) {
        double s = 0.0;
        const double* q = queries.data() + b * n;
        for (std::int64_t j = 0; j < n; ++j) s += q[j] * q[j];
        qn[static_cast<std::size_t>(b)] = std::max(std::sqrt(s), kNormFloor);
    }
    for (std::int64_t i = 0; i < count; ++i) {
        double s = 0.0;
        const double* t = pool[static_cast<std::size_t>(i)].data();
        for (std::int64_t j = 0; j < n; ++j) s += t[j] * t[j];
        pn[static_cast<std::size_t>(i)] = std::max(std::sqrt(s), kNormFloor);
    }

    Tensor out({batch, count}, tape.recording() && any_rg);
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* q = queries.data() + b * n;
        for (std::int64_t i = 0; i < count; ++i) {
            const double* t = pool[static_cast<std::size_t>(i)].data();
            double dot = 0.0;
            for (std::int64_t j = 0; j < n; ++j) dot += q[j] * t[j];
            out.data()[b * count + i] =
                dot / (qn[static_cast<std::size_t>(b)] * pn[static_cast<std::size_t>(i)]);
        }
    }
    if (out.requires_grad()) {
        tape.record([queries = queries, pool, out, qn, pn, batch, count, n]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            for (std::int64_t b = 0; b < batch; ++b) {
                const double* q = queries.data() + b * n;
                const double qnorm = qn[static_cast<std::size_t>(b)];
                for (std::int64_t i = 0; i < count; ++i) {
                    const double gs = g[b * count + i];
                    if (gs == 0.0) continue;
                    Tensor proto = pool[static_cast<std::size_t>(i)];
                    const double* t = proto.data();
                    const double pnorm = pn[static_cast<std::size_t>(i)];
                    const double s = out.data()[b * count + i];
                    if (queries.requires_grad()) {
                        queries.ensure_grad();
                        double* qg = queries.grad_data() + b * n;
                        for (std::int64_t j = 0; j < n; ++j)
                            qg[j] += gs * (t[j] / (qnorm * pnorm) - s * q[j] / (qnorm * qnorm));
                    }
                    if (proto.requires_grad()) {
                        proto.ensure_grad();
                        double* tg = proto.grad_data();
                        for (std::int64_t j = 0; j < n; ++j)
                            tg[j] += gs * (q[j] / (qnorm * pnorm) - s * t[j] / (pnorm * pnorm));
                    }
                }
            }
        });
    }
    return out;
}

Tensor average_of(Tape& tape, const std::vector<Tensor>& pool) {
    if (pool.empty()) throw ContractError("average_of: empty pool");
    const std::int64_t n = pool.front().cols();
    bool any_rg = false;
    for (const Tensor& p : pool) {
        if (p.rows() != 1 || p.cols() != n)
            throw DimensionError("average_of: pool entries must be [1, D] with equal D");
        any_rg = any_rg || p.requires_grad();
    }
    const double inv = 1.0 / static_cast<double>(pool.size());
    Tensor out({1, n}, tape.recording() && any_rg);
    for (const Tensor& p : pool) {
        for (std::int64_t j = 0; j < n; ++j) out.data()[j] += p.data()[j];
    }
    for (std::int64_t j = 0; j < n; ++j) out.data()[j] *= inv;
    if (out.requires_grad()) {
        tape.record([pool, out, n, inv]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            for (Tensor p : pool) {
                if (!p.requires_grad()) continue;
                p.ensure_grad();
                double* pg = p.grad_data();
                for (std::int64_t j = 0; j < n; ++j) pg[j] += g[j] * inv;
            }
        });
    }
    return out;
}

Tensor gather_patch_rows(Tape& tape, const Tensor& x, std::int64_t batch, std::int64_t h1,
                         std::int64_t w1, std::int64_t patch, std::int64_t stride) {
    require_2d(x, "gather_patch_rows");
    if (patch < 1 || stride < 1) throw ConfigError("gather_patch_rows: bad patch/stride");
    if (x.rows() != batch * h1 * w1)
        throw DimensionError("gather_patch_rows: rows != batch * h1 * w1");
    const std::int64_t d = x.cols();
    const std::int64_t h2 = (h1 + stride - 1) / stride;
    const std::int64_t w2 = (w1 + stride - 1) / stride;
    const std::int64_t pad = patch / 2;
    const std::int64_t pd = patch * patch * d;
    Tensor out({batch * h2 * w2, pd}, wants_grad(tape, x));
    for (std::int64_t b = 0; b < batch; ++b) {
        for (std::int64_t oy = 0; oy < h2; ++oy) {
            for (std::int64_t ox = 0; ox < w2; ++ox) {
                double* orow = out.data() + ((b * h2 + oy) * w2 + ox) * pd;
                for (std::int64_t py = 0; py < patch; ++py) {
                    const std::int64_t iy = oy * stride - pad + py;
                    for (std::int64_t px = 0; px < patch; ++px) {
                        const std::int64_t ix = ox * stride - pad + px;
                        double* dst = orow + (py * patch + px) * d;
                        if (iy < 0 || iy >= h1 || ix < 0 || ix >= w1) continue;  // zero pad
                        const double* src = x.data() + ((b * h1 + iy) * w1 + ix) * d;
                        std::memcpy(dst, src, static_cast<std::size_t>(d) * sizeof(double));
                    }
                }
            }
        }
    }
    if (out.requires_grad()) {
        tape.record([x = x, out, batch, h1, w1, h2, w2, patch, stride, pad, d, pd]() mutable {
            if (!out.has_grad()) return;
            const double* g = out.grad_data();
            x.ensure_grad();
            double* xg = x.grad_data();
            for (std::int64_t b = 0; b < batch; ++b) {
                for (std::int64_t oy = 0; oy < h2; ++oy) {
                    for (std::int64_t ox = 0; ox < w2; ++ox) {
                        const double* grow = g + ((b * h2 + oy) * w2 + ox) * pd;
                        for (std::int64_t py = 0; py < patch; ++py) {
                            const std::int64_t iy = oy * stride - pad + py;
                            if (iy < 0 || iy >= h1) continue;
                            for (std::int64_t px = 0; px < patch; ++px) {
                                const std::int64_t ix = ox * stride - pad + px;
                                if (ix < 0 || ix >= w1) continue;
                                const double* src = grow + (py * patch + px) * d;
                                double* dst = xg + ((b * h1 + iy) * w1 + ix) * d;
                                for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

}  // namespace dpformer
