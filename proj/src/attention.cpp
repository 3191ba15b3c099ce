#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "dpformer/tensor.hpp"
#include "gemm.hpp"

namespace dpformer {

namespace {

void check_qkv(const Tensor& q, const Tensor& k, const Tensor& v, int heads, std::int64_t rows,
               const char* who) {
    if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
        throw DimensionError(std::string(who) + ": q/k/v must be 2-D");
    if (q.shape() != k.shape() || q.shape() != v.shape())
        throw DimensionError(std::string(who) + ": q/k/v shapes differ");
    if (q.rows() != rows) throw DimensionError(std::string(who) + ": row count mismatch");
    if (heads < 1 || q.cols() % heads != 0)
        throw ConfigError(std::string(who) + ": width not divisible by head count");
}

}  // namespace

std::vector<std::int32_t> dina_neighbor_table(std::int64_t hp, std::int64_t wp, int ksize,
                                              int dil) {
    if (hp < 1 || wp < 1) throw ConfigError("dina_neighbor_table: empty grid");
    if (ksize < 1 || ksize % 2 == 0) throw ConfigError("dina_neighbor_table: kernel must be odd");
    if (dil < 1) throw ConfigError("dina_neighbor_table: dilation must be >= 1");
    const std::int64_t span = static_cast<std::int64_t>(ksize - 1) * dil;
    if (span > hp - 1 || span > wp - 1)
        throw ConfigError("dina_neighbor_table: kernel span exceeds grid");
    std::vector<std::int32_t> table;
    table.reserve(static_cast<std::size_t>(hp * wp * ksize * ksize));
    for (std::int64_t y = 0; y < hp; ++y) {
        // The window is centered when it fits and shifted inward at borders,
        // so every query sees exactly ksize^2 in-bounds keys.
        const std::int64_t y0 = std::clamp<std::int64_t>(y - (ksize / 2) * dil, 0, hp - 1 - span);
        for (std::int64_t x = 0; x < wp; ++x) {
            const std::int64_t x0 =
                std::clamp<std::int64_t>(x - (ksize / 2) * dil, 0, wp - 1 - span);
            for (int j = 0; j < ksize; ++j) {
                for (int i = 0; i < ksize; ++i) {
                    table.push_back(static_cast<std::int32_t>((y0 + j * dil) * wp + (x0 + i * dil)));
                }
            }
        }
    }
    return table;
}

Tensor msa_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                std::int64_t batch, std::int64_t tokens) {
    if (batch < 1 || tokens < 1) throw DimensionError("msa_core: empty batch or sequence");
    check_qkv(q, k, v, heads, batch * tokens, "msa_core");
    const std::int64_t d = q.cols();
    const std::int64_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool rg =
        tape.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    Tensor out({batch * tokens, d}, rg);
    // Attention probabilities are saved per (sample, head) for the backward pass.
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(batch * heads * tokens * tokens));
    std::vector<double> s(static_cast<std::size_t>(tokens * tokens));
    for (std::int64_t b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const double* qp = q.data() + b * tokens * d + h * dh;
            const double* kp = k.data() + b * tokens * d + h * dh;
            const double* vp = v.data() + b * tokens * d + h * dh;
            detail::gemm_nt(qp, d, kp, d, s.data(), tokens, tokens, dh, tokens, false);
            double* a = probs->data() + (b * heads + h) * tokens * tokens;
            for (std::int64_t i = 0; i < tokens; ++i) {
                const double* sr = s.data() + i * tokens;
                double* ar = a + i * tokens;
                double mx = sr[0] * sc;
                for (std::int64_t j = 1; j < tokens; ++j) mx = std::max(mx, sr[j] * sc);
                double sum = 0.0;
                for (std::int64_t j = 0; j < tokens; ++j) {
                    ar[j] = std::exp(sr[j] * sc - mx);
                    sum += ar[j];
                }
                const double inv = 1.0 / sum;
                for (std::int64_t j = 0; j < tokens; ++j) ar[j] *= inv;
            }
            detail::gemm_nn(a, tokens, vp, d, out.data() + b * tokens * d + h * dh, d, tokens,
                            tokens, dh, false);
        }
    }
    if (rg) {
        tape.record([q = q, k = k, v = v, out, probs, heads, batch, tokens, d, dh, sc]() mutable {
            if (!out.has_grad()) return;
            if (q.requires_grad()) q.ensure_grad();
            if (k.requires_grad()) k.ensure_grad();
            if (v.requires_grad()) v.ensure_grad();
            std::vector<double> da(static_cast<std::size_t>(tokens * tokens));
            std::vector<double> ds(static_cast<std::size_t>(tokens * tokens));
            for (std::int64_t b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const double* gp = out.grad_data() + b * tokens * d + h * dh;
                    const double* qp = q.data() + b * tokens * d + h * dh;
                    const double* kp = k.data() + b * tokens * d + h * dh;
                    const double* vp = v.data() + b * tokens * d + h * dh;
                    const double* a = probs->data() + (b * heads + h) * tokens * tokens;
                    if (v.requires_grad()) {
                        detail::gemm_tn(a, tokens, gp, d, v.grad_data() + b * tokens * d + h * dh,
                                        d, tokens, tokens, dh, true);
                    }
                    if (q.requires_grad() || k.requires_grad()) {
                        detail::gemm_nt(gp, d, vp, d, da.data(), tokens, tokens, dh, tokens,
                                        false);
                        for (std::int64_t i = 0; i < tokens; ++i) {
                            const double* ar = a + i * tokens;
                            const double* dar = da.data() + i * tokens;
                            double dot = 0.0;
                            for (std::int64_t j = 0; j < tokens; ++j) dot += dar[j] * ar[j];
                            double* dsr = ds.data() + i * tokens;
                            for (std::int64_t j = 0; j < tokens; ++j)
                                dsr[j] = sc * ar[j] * (dar[j] - dot);
                        }
                        if (q.requires_grad()) {
                            detail::gemm_nn(ds.data(), tokens, kp, d,
                                            q.grad_data() + b * tokens * d + h * dh, d, tokens,
                                            tokens, dh, true);
                        }
                        if (k.requires_grad()) {
                            detail::gemm_tn(ds.data(), tokens, qp, d,
                                            k.grad_data() + b * tokens * d + h * dh, d, tokens,
                                            tokens, dh, true);
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor dina_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 std::int64_t batch, std::int64_t hp, std::int64_t wp, int ksize, int dil) {
    if (batch < 1) throw DimensionError("dina_core: empty batch");
    const std::int64_t tokens = hp * wp;
    check_qkv(q, k, v, heads, batch * tokens, "dina_core");
    const std::int64_t d = q.cols();
    const std::int64_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    const int m = ksize * ksize;
    auto table = std::make_shared<std::vector<std::int32_t>>(
        dina_neighbor_table(hp, wp, ksize, dil));
    const bool rg =
        tape.recording() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    Tensor out({batch * tokens, d}, rg);
    auto probs = std::make_shared<std::vector<double>>(
        static_cast<std::size_t>(batch * heads * tokens * m));
    std::vector<double> s(static_cast<std::size_t>(m));
    for (std::int64_t b = 0; b < batch; ++b) {
        for (int h = 0; h < heads; ++h) {
            const double* qb = q.data() + b * tokens * d + h * dh;
            const double* kb = k.data() + b * tokens * d + h * dh;
            const double* vb = v.data() + b * tokens * d + h * dh;
            for (std::int64_t t = 0; t < tokens; ++t) {
                const std::int32_t* nb = table->data() + t * m;
                const double* qr = qb + t * d;
                for (int j = 0; j < m; ++j) {
                    const double* kr = kb + static_cast<std::int64_t>(nb[j]) * d;
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < dh; ++c) dot += qr[c] * kr[c];
                    s[static_cast<std::size_t>(j)] = dot * sc;
                }
                double mx = s[0];
                for (int j = 1; j < m; ++j) mx = std::max(mx, s[static_cast<std::size_t>(j)]);
                double sum = 0.0;
                double* a = probs->data() + ((b * heads + h) * tokens + t) * m;
                for (int j = 0; j < m; ++j) {
                    a[j] = std::exp(s[static_cast<std::size_t>(j)] - mx);
                    sum += a[j];
                }
                const double inv = 1.0 / sum;
                double* orow = out.data() + b * tokens * d + t * d + h * dh;
                for (int j = 0; j < m; ++j) {
                    a[j] *= inv;
                    const double* vr = vb + static_cast<std::int64_t>(nb[j]) * d;
                    for (std::int64_t c = 0; c < dh; ++c) orow[c] += a[j] * vr[c];
                }
            }
        }
    }
    if (rg) {
        tape.record([q = q, k = k, v = v, out, probs, table, heads, batch, tokens, d, dh, sc, m]() mutable {
            if (!out.has_grad()) return;
            if (q.requires_grad()) q.ensure_grad();
            if (k.requires_grad()) k.ensure_grad();
            if (v.requires_grad()) v.ensure_grad();
            std::vector<double> da(static_cast<std::size_t>(m));
            for (std::int64_t b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const std::int64_t base = b * tokens * d + h * dh;
                    for (std::int64_t t = 0; t < tokens; ++t) {
                        const std::int32_t* nb = table->data() + t * m;
                        const double* g = out.grad_data() + base + t * d;
                        const double* a = probs->data() + ((b * heads + h) * tokens + t) * m;
                        double dot = 0.0;
                        for (int j = 0; j < m; ++j) {
                            const std::int64_t key = static_cast<std::int64_t>(nb[j]);
                            const double* vr = v.data() + base + key * d;
                            double gv = 0.0;
                            for (std::int64_t c = 0; c < dh; ++c) gv += g[c] * vr[c];
                            da[static_cast<std::size_t>(j)] = gv;
                            dot += gv * a[j];
                            if (v.requires_grad()) {
                                double* vg = v.grad_data() + base + key * d;
                                for (std::int64_t c = 0; c < dh; ++c) vg[c] += a[j] * g[c];
                            }
                        }
                        if (!q.requires_grad() && !k.requires_grad()) continue;
                        const double* qr = q.data() + base + t * d;
                        double* qg = q.requires_grad() ? q.grad_data() + base + t * d : nullptr;
                        for (int j = 0; j < m; ++j) {
                            const double dsj = sc * a[j] * (da[static_cast<std::size_t>(j)] - dot);
                            const std::int64_t key = static_cast<std::int64_t>(nb[j]);
                            if (qg) {
                                const double* kr = k.data() + base + key * d;
                                for (std::int64_t c = 0; c < dh; ++c) qg[c] += dsj * kr[c];
                            }
                            if (k.requires_grad()) {
                                double* kg = k.grad_data() + base + key * d;
                                for (std::int64_t c = 0; c < dh; ++c) kg[c] += dsj * qr[c];
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
