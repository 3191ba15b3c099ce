#pragma once

#include <vector>

#include "dpformer/blocks.hpp"

namespace dpformer {

struct EncoderLayer {
    LayerNormParams ln1;
    AttentionParams attn;
    LayerNormParams ln2;
    MlpParams mlp;
    AttentionConfig cfg;
};

// L stacked transformer encoders over the token grid. The neighborhood
// schedule follows the map: kernel clamped to an odd size no larger than
// the shorter grid side, dilation alternating between 1 and the widest
// stride that still fits.
struct EncoderStack {
    std::vector<EncoderLayer> layers;

    static EncoderStack init(Rng& rng, int l, std::int64_t d, int heads, AttentionKind kind,
                             std::int64_t hp, std::int64_t wp, int kernel);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

// Clamp rule for one layer: returns the effective (kernel, dilation).
std::pair<int, int> dina_schedule(int layer, int kernel, std::int64_t hp, std::int64_t wp);

TokenSequence encode(Tape& tape, const TokenSequence& z0, const EncoderStack& stack);

// One {LN, attention, LN, MLP} encoder with residual links; shared by the
// stack and by both prompt modules.
TokenSequence encoder_layer_forward(Tape& tape, const TokenSequence& x, const EncoderLayer& layer);

// Standalone MSA encoder layer, the shape both prompt modules embed.
EncoderLayer make_msa_encoder_layer(Rng& rng, std::int64_t d, int heads);
void collect_encoder_layer(const EncoderLayer& layer, const std::string& prefix,
                           std::vector<NamedTensor>& out);

}  // namespace dpformer
