#include "dpformer/blocks.hpp"

#include <cmath>
#include <utility>

namespace dpformer {

namespace {

// Projection weights are drawn at 1/sqrt(fan_in) so activations keep
// their scale through the stack; anything smaller starves the heads of
// per-sample signal at desk scale.
double fan_in_std(std::int64_t fan_in) { return 1.0 / std::sqrt(static_cast<double>(fan_in)); }

}  // namespace

LayerNormParams LayerNormParams::make(std::int64_t d) {
    LayerNormParams p;
    p.gain = Tensor::full({1, d}, 1.0, true);
    p.bias = Tensor::zeros({1, d}, true);
    return p;
}

void LayerNormParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".gain", gain});
    out.push_back({prefix + ".bias", bias});
}

MlpParams MlpParams::init(Rng& rng, std::int64_t d) {
    MlpParams p;
    p.w1 = gaussian_init(rng, {d, 4 * d}, fan_in_std(d));
    p.b1 = Tensor::zeros({1, 4 * d});
    p.w2 = gaussian_init(rng, {4 * d, d}, fan_in_std(4 * d));
    p.b2 = Tensor::zeros({1, d});
    for (Tensor* t : {&p.w1, &p.b1, &p.w2, &p.b2}) t->set_requires_grad(true);
    return p;
}

void MlpParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".w1", w1});
    out.push_back({prefix + ".b1", b1});
    out.push_back({prefix + ".w2", w2});
    out.push_back({prefix + ".b2", b2});
}

AttentionParams AttentionParams::init(Rng& rng, std::int64_t d) {
    AttentionParams p;
    p.wq = gaussian_init(rng, {d, d}, fan_in_std(d));
    p.wk = gaussian_init(rng, {d, d}, fan_in_std(d));
    p.wv = gaussian_init(rng, {d, d}, fan_in_std(d));
    p.wo = gaussian_init(rng, {d, d}, fan_in_std(d));
    p.bq = Tensor::zeros({1, d});
    p.bk = Tensor::zeros({1, d});
    p.bv = Tensor::zeros({1, d});
    p.bo = Tensor::zeros({1, d});
    for (Tensor* t : {&p.wq, &p.bq, &p.wk, &p.bk, &p.wv, &p.bv, &p.wo, &p.bo})
        t->set_requires_grad(true);
    return p;
}

void AttentionParams::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    out.push_back({prefix + ".wq", wq});
    out.push_back({prefix + ".bq", bq});
    out.push_back({prefix + ".wk", wk});
    out.push_back({prefix + ".bk", bk});
    out.push_back({prefix + ".wv", wv});
    out.push_back({prefix + ".bv", bv});
    out.push_back({prefix + ".wo", wo});
    out.push_back({prefix + ".bo", bo});
}

Tokenizer Tokenizer::init(Rng& rng, std::int64_t channels, std::int64_t height,
                          std::int64_t width, std::int64_t dim,
                          const std::vector<std::pair<std::int64_t, std::int64_t>>& stages) {
    if (stages.empty()) throw ConfigError("tokenizer: at least one stage required");
    Tokenizer tok;
    tok.channels = channels;
    tok.height = height;
    tok.width = width;
    tok.dim = dim;
    std::int64_t in_dim = channels;
    std::int64_t h = height, w = width;
    for (const auto& [patch, stride] : stages) {
        if (stride < 1 || stride >= patch)
            throw ConfigError("tokenizer: stride must be in [1, patch) for overlap");
        if (h < patch || w < patch) throw DimensionError("tokenizer: input smaller than patch");
        TokenizerStage st;
        st.patch = patch;
        st.stride = stride;
        st.w = gaussian_init(rng, {in_dim * patch * patch, dim}, fan_in_std(in_dim * patch * patch));
        st.b = Tensor::zeros({1, dim});
        st.w.set_requires_grad(true);
        st.b.set_requires_grad(true);
        tok.stages.push_back(std::move(st));
        h = (h + stride - 1) / stride;
        w = (w + stride - 1) / stride;
        in_dim = dim;
    }
    return tok;
}

void Tokenizer::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < stages.size(); ++i) {
        const std::string base = prefix + ".stage" + std::to_string(i);
        out.push_back({base + ".w", stages[i].w});
        out.push_back({base + ".b", stages[i].b});
    }
}

std::pair<std::int64_t, std::int64_t> Tokenizer::output_extent() const {
    std::int64_t h = height, w = width;
    for (const TokenizerStage& st : stages) {
        h = (h + st.stride - 1) / st.stride;
        w = (w + st.stride - 1) / st.stride;
    }
    return {h, w};
}

namespace {

// im2col over raw images: [B, C*H*W] -> [B*H2*W2, C*patch^2], channel-minor
// within each patch position, symmetric zero padding. Images carry no
// gradient, so this runs off-tape.
Tensor image_patches(const Tensor& images, std::int64_t batch, std::int64_t c, std::int64_t h,
                     std::int64_t w, std::int64_t patch, std::int64_t stride) {
    const std::int64_t h2 = (h + stride - 1) / stride;
    const std::int64_t w2 = (w + stride - 1) / stride;
    const std::int64_t pad = patch / 2;
    const std::int64_t pd = patch * patch * c;
    Tensor out({batch * h2 * w2, pd});
    for (std::int64_t b = 0; b < batch; ++b) {
        const double* img = images.data() + b * c * h * w;
        for (std::int64_t oy = 0; oy < h2; ++oy) {
            for (std::int64_t ox = 0; ox < w2; ++ox) {
                double* row = out.data() + ((b * h2 + oy) * w2 + ox) * pd;
                for (std::int64_t py = 0; py < patch; ++py) {
                    const std::int64_t iy = oy * stride - pad + py;
                    if (iy < 0 || iy >= h) continue;
                    for (std::int64_t px = 0; px < patch; ++px) {
                        const std::int64_t ix = ox * stride - pad + px;
                        if (ix < 0 || ix >= w) continue;
                        double* dst = row + (py * patch + px) * c;
                        for (std::int64_t ch = 0; ch < c; ++ch)
                            dst[ch] = img[(ch * h + iy) * w + ix];
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

TokenSequence tokenize(Tape& tape, const Tensor& images, std::int64_t batch,
                       const Tokenizer& tok) {
    if (images.ndim() != 2 || images.rows() != batch ||
        images.cols() != tok.channels * tok.height * tok.width)
        throw DimensionError("tokenize: images must be [batch, C*H*W] matching the tokenizer");
    std::int64_t h = tok.height, w = tok.width;
    Tensor cur;
    for (std::size_t i = 0; i < tok.stages.size(); ++i) {
        const TokenizerStage& st = tok.stages[i];
        Tensor patches =
            i == 0 ? image_patches(images, batch, tok.channels, h, w, st.patch, st.stride)
                   : gather_patch_rows(tape, cur, batch, h, w, st.patch, st.stride);
        cur = add_row_bias(tape, matmul(tape, patches, st.w), st.b);
        h = (h + st.stride - 1) / st.stride;
        w = (w + st.stride - 1) / st.stride;
    }
    TokenSequence seq;
    seq.tokens = cur;
    seq.batch = batch;
    seq.length = h * w;
    seq.hp = h;
    seq.wp = w;
    return seq;
}

TokenSequence layer_norm(Tape& tape, const TokenSequence& x, const LayerNormParams& p) {
    TokenSequence out = x;
    out.tokens = layer_norm(tape, x.tokens, p.gain, p.bias);
    return out;
}

TokenSequence mlp_block(Tape& tape, const TokenSequence& x, const MlpParams& p) {
    Tensor h = gelu(tape, add_row_bias(tape, matmul(tape, x.tokens, p.w1), p.b1));
    TokenSequence out = x;
    out.tokens = add_row_bias(tape, matmul(tape, h, p.w2), p.b2);
    return out;
}

namespace {

struct Projected {
    Tensor q, k, v;
};

Projected project_qkv(Tape& tape, const Tensor& x, const AttentionParams& p) {
    return {add_row_bias(tape, matmul(tape, x, p.wq), p.bq),
            add_row_bias(tape, matmul(tape, x, p.wk), p.bk),
            add_row_bias(tape, matmul(tape, x, p.wv), p.bv)};
}

}  // namespace

TokenSequence msa(Tape& tape, const TokenSequence& x, const AttentionParams& p,
                  const AttentionConfig& cfg) {
    if (cfg.kind != AttentionKind::MSA) throw ConfigError("msa: config kind is not MSA");
    auto [q, k, v] = project_qkv(tape, x.tokens, p);
    Tensor attn = msa_core(tape, q, k, v, cfg.heads, x.batch, x.length);
    TokenSequence out = x;
    out.tokens = add_row_bias(tape, matmul(tape, attn, p.wo), p.bo);
    return out;
}

TokenSequence dina(Tape& tape, const TokenSequence& x, const AttentionParams& p,
                   const AttentionConfig& cfg) {
    if (cfg.kind != AttentionKind::DiNA) throw ConfigError("dina: config kind is not DiNA");
    if (!x.has_layout() || x.hp * x.wp != x.length)
        throw ConfigError("dina: sequence carries no 2-D layout");
    if (static_cast<std::int64_t>(cfg.kernel) * cfg.kernel > x.length)
        throw ConfigError("dina: neighborhood larger than token count");
    auto [q, k, v] = project_qkv(tape, x.tokens, p);
    Tensor attn =
        dina_core(tape, q, k, v, cfg.heads, x.batch, x.hp, x.wp, cfg.kernel, cfg.dilation);
    TokenSequence out = x;
    out.tokens = add_row_bias(tape, matmul(tape, attn, p.wo), p.bo);
    return out;
}

Tensor patch_avg_pool(Tape& tape, const TokenSequence& x) {
    return pool_rows(tape, x.tokens, x.batch, x.length);
}

}  // namespace dpformer
