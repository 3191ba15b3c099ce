#pragma once

#include <cstdint>
#include <vector>

#include "dpformer/tensor.hpp"

namespace dpformer {

// Counter-based deterministic generator. A draw is a hash of
// (seed, stream, counter), so identical (seed, stream) always replays the
// same sequence regardless of platform, and independent streams never
// interleave. Streams are cheap: derive() one per stochastic site.
class Rng {
public:
    Rng() = default;
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0)
        : seed_(seed), stream_(stream) {}

    std::uint64_t next_u64();
    double uniform();                          // [0, 1)
    double normal(double mean, double stddev); // Box-Muller, spare cached
    std::int64_t uniform_int(std::int64_t n);  // [0, n), unbiased

    // Independent generator for a named purpose; same seed, new stream.
    Rng derive(std::uint64_t substream) const;

    struct State {
        std::uint64_t seed = 0;
        std::uint64_t stream = 0;
        std::uint64_t counter = 0;
        double spare = 0.0;
        bool has_spare = false;
    };
    State state() const;
    void set_state(const State& s);

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::uint64_t counter_ = 0;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// Fisher-Yates shuffle driven by the generator, deterministic per state.
template <typename T>
void shuffle(Rng& rng, std::vector<T>& items) {
    for (std::int64_t i = static_cast<std::int64_t>(items.size()) - 1; i > 0; --i) {
        const std::int64_t j = rng.uniform_int(i + 1);
        std::swap(items[static_cast<std::size_t>(i)], items[static_cast<std::size_t>(j)]);
    }
}

// Tensor of i.i.d. normal(0, stddev^2) samples. stddev must be positive
// (ContractError otherwise). Draws advance the generator.
Tensor gaussian_init(Rng& rng, std::vector<std::int64_t> shape, double stddev);

}  // namespace dpformer
