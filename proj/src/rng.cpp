#include "dpformer/rng.hpp"

#include <cmath>

namespace dpformer {

namespace {

// splitmix64 finalizer; full 64-bit avalanche.
std::uint64_t mix64(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

}  // namespace

std::uint64_t Rng::next_u64() {
    const std::uint64_t c = counter_++;
    return mix64(seed_ ^ mix64(stream_ ^ mix64(c)));
}

double Rng::uniform() {
    // Top 53 bits give the full double mantissa resolution.
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mean, double stddev) {
    if (has_spare_) {
        has_spare_ = false;
        return mean + stddev * spare_;
    }
    // Box-Muller; u1 shifted into (0,1] so the log is always finite.
    const double u1 = (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mean + stddev * r * std::cos(a);
}

std::int64_t Rng::uniform_int(std::int64_t n) {
    if (n <= 0) throw ContractError("uniform_int: n must be positive");
    const std::uint64_t un = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
    std::uint64_t r;
    do {
        r = next_u64();
    } while (r >= limit);
    return static_cast<std::int64_t>(r % un);
}

Rng Rng::derive(std::uint64_t substream) const {
    return Rng(seed_, mix64(stream_ ^ mix64(substream)));
}

Rng::State Rng::state() const {
    return State{seed_, stream_, counter_, spare_, has_spare_};
}

void Rng::set_state(const State& s) {
    seed_ = s.seed;
    stream_ = s.stream;
    counter_ = s.counter;
    spare_ = s.spare;
    has_spare_ = s.has_spare;
}

Tensor gaussian_init(Rng& rng, std::vector<std::int64_t> shape, double stddev) {
    if (!(stddev > 0.0)) throw ContractError("gaussian_init: stddev must be positive");
    Tensor t(std::move(shape));
    const std::int64_t n = t.numel();
    for (std::int64_t i = 0; i < n; ++i) t.data()[i] = rng.normal(0.0, stddev);
    return t;
}

}  // namespace dpformer
