#include "dpformer/encoder.hpp"

#include <algorithm>

namespace dpformer {

std::pair<int, int> dina_schedule(int layer, int kernel, std::int64_t hp, std::int64_t wp) {
    const std::int64_t side = std::min(hp, wp);
    if (side < 1) throw ConfigError("dina_schedule: empty map");
    std::int64_t k = std::min<std::int64_t>(kernel, side);
    if (k % 2 == 0) --k;
    if (k < 1) throw ConfigError("dina_schedule: no odd kernel fits the map");
    // Even layers stay local (d=1); odd layers take the widest dilation
    // whose span still fits inside the map.
    std::int64_t d = 1;
    if (layer % 2 == 1 && k > 1) {
        d = std::max<std::int64_t>(1, side / k);
        d = std::min(d, (side - 1) / (k - 1));
    }
    return {static_cast<int>(k), static_cast<int>(d)};
}

EncoderStack EncoderStack::init(Rng& rng, int l, std::int64_t d, int heads, AttentionKind kind,
                                std::int64_t hp, std::int64_t wp, int kernel) {
    if (l < 0) throw ConfigError("encoder: negative layer count");
    EncoderStack stack;
    stack.layers.reserve(static_cast<std::size_t>(l));
    for (int i = 0; i < l; ++i) {
        EncoderLayer layer;
        layer.ln1 = LayerNormParams::make(d);
        layer.attn = AttentionParams::init(rng, d);
        layer.ln2 = LayerNormParams::make(d);
        layer.mlp = MlpParams::init(rng, d);
        layer.cfg.heads = heads;
        layer.cfg.kind = kind;
        if (kind == AttentionKind::DiNA) {
            auto [k, dil] = dina_schedule(i, kernel, hp, wp);
            layer.cfg.kernel = k;
            layer.cfg.dilation = dil;
        }
        stack.layers.push_back(std::move(layer));
    }
    return stack;
}

void EncoderStack::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string base = prefix + ".layer" + std::to_string(i);
        layers[i].ln1.collect(base + ".ln1", out);
        layers[i].attn.collect(base + ".attn", out);
        layers[i].ln2.collect(base + ".ln2", out);
        layers[i].mlp.collect(base + ".mlp", out);
    }
}

EncoderLayer make_msa_encoder_layer(Rng& rng, std::int64_t d, int heads) {
    EncoderLayer layer;
    layer.ln1 = LayerNormParams::make(d);
    layer.attn = AttentionParams::init(rng, d);
    layer.ln2 = LayerNormParams::make(d);
    layer.mlp = MlpParams::init(rng, d);
    layer.cfg.heads = heads;
    layer.cfg.kind = AttentionKind::MSA;
    return layer;
}

void collect_encoder_layer(const EncoderLayer& layer, const std::string& prefix,
                           std::vector<NamedTensor>& out) {
    layer.ln1.collect(prefix + ".ln1", out);
    layer.attn.collect(prefix + ".attn", out);
    layer.ln2.collect(prefix + ".ln2", out);
    layer.mlp.collect(prefix + ".mlp", out);
}

TokenSequence encoder_layer_forward(Tape& tape, const TokenSequence& x,
                                    const EncoderLayer& layer) {
    TokenSequence normed = layer_norm(tape, x, layer.ln1);
    TokenSequence attended = layer.cfg.kind == AttentionKind::DiNA
                                 ? dina(tape, normed, layer.attn, layer.cfg)
                                 : msa(tape, normed, layer.attn, layer.cfg);
    TokenSequence mid = x;
    mid.tokens = add(tape, attended.tokens, x.tokens);
    TokenSequence expanded = mlp_block(tape, layer_norm(tape, mid, layer.ln2), layer.mlp);
    TokenSequence out = mid;
    out.tokens = add(tape, expanded.tokens, mid.tokens);
    return out;
}

TokenSequence encode(Tape& tape, const TokenSequence& z0, const EncoderStack& stack) {
    TokenSequence z = z0;
    for (const EncoderLayer& layer : stack.layers) z = encoder_layer_forward(tape, z, layer);
    return z;
}

}  // namespace dpformer
