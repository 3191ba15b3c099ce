#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpformer/rng.hpp"
#include "dpformer/tensor.hpp"

namespace dpformer {

// A batch of token sequences, flattened to [batch*length, D]. hp/wp carry
// the 2-D layout when tokens still form a grid; both are 0 once prompt
// tokens are attached and the layout is gone.
struct TokenSequence {
    Tensor tokens;
    std::int64_t batch = 1;
    std::int64_t length = 0;
    std::int64_t hp = 0;
    std::int64_t wp = 0;

    bool has_layout() const { return hp > 0 && wp > 0; }
    std::int64_t dim() const { return tokens.cols(); }
};

enum class AttentionKind { MSA, DiNA };

struct AttentionConfig {
    int heads = 4;
    AttentionKind kind = AttentionKind::MSA;
    int kernel = 7;    // DiNA only, odd
    int dilation = 1;  // DiNA only
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

constexpr double kInitStd = 0.02;

struct LayerNormParams {
    Tensor gain;  // [1, D]
    Tensor bias;  // [1, D]

    static LayerNormParams make(std::int64_t d);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct MlpParams {
    Tensor w1;  // [D, 4D]
    Tensor b1;  // [1, 4D]
    Tensor w2;  // [4D, D]
    Tensor b2;  // [1, D]

    static MlpParams init(Rng& rng, std::int64_t d);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct AttentionParams {
    Tensor wq, bq;  // [D, D], [1, D]
    Tensor wk, bk;
    Tensor wv, bv;
    Tensor wo, bo;

    static AttentionParams init(Rng& rng, std::int64_t d);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
};

struct TokenizerStage {
    std::int64_t patch = 3;
    std::int64_t stride = 1;
    Tensor w;  // [in_dim * patch^2, D]
    Tensor b;  // [1, D]
};

// Overlapping tokenizer: one or more strided patch projections with
// symmetric zero padding. Each stage halves (or keeps) the grid per its
// stride; stage outputs are token grids, so stages compose.
struct Tokenizer {
    std::int64_t channels = 1;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t dim = 0;
    std::vector<TokenizerStage> stages;

    static Tokenizer init(Rng& rng, std::int64_t channels, std::int64_t height,
                          std::int64_t width, std::int64_t dim,
                          const std::vector<std::pair<std::int64_t, std::int64_t>>& stages);
    void collect(const std::string& prefix, std::vector<NamedTensor>& out) const;
    std::pair<std::int64_t, std::int64_t> output_extent() const;
};

// images is [B, C*H*W] in [0,1]; returns the final token grid.
TokenSequence tokenize(Tape& tape, const Tensor& images, std::int64_t batch,
                       const Tokenizer& tok);

TokenSequence layer_norm(Tape& tape, const TokenSequence& x, const LayerNormParams& p);
TokenSequence mlp_block(Tape& tape, const TokenSequence& x, const MlpParams& p);
TokenSequence msa(Tape& tape, const TokenSequence& x, const AttentionParams& p,
                  const AttentionConfig& cfg);
TokenSequence dina(Tape& tape, const TokenSequence& x, const AttentionParams& p,
                   const AttentionConfig& cfg);

// Mean over each sample's tokens: -> [batch, D].
Tensor patch_avg_pool(Tape& tape, const TokenSequence& x);

}  // namespace dpformer
