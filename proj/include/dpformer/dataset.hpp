#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dpformer/rng.hpp"

namespace dpformer {

// Labeled image set, pixels stored as float32 in [0,1] exactly as they
// live in the on-disk format, so synthesis, save, and load all agree to
// the bit.
struct Dataset {
    std::int64_t channels = 1;
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::vector<float> pixels;          // size() * pixel_count() values
    std::vector<std::uint16_t> labels;

    std::int64_t pixel_count() const { return channels * height * width; }
    std::size_t size() const { return labels.size(); }
    const float* image(std::size_t i) const {
        return pixels.data() + static_cast<std::size_t>(pixel_count()) * i;
    }
    std::int64_t num_classes() const;
};

struct SyntheticSpec {
    std::int64_t classes = 10;
    std::int64_t channels = 1;
    std::int64_t height = 8;
    std::int64_t width = 8;
    std::int64_t train_per_class = 200;
    std::int64_t test_per_class = 50;
    double pattern_std = 0.15;
    double noise = 0.05;
};

// Per-class Gaussian base pattern around mid-gray plus Gaussian pixel noise,
// clamped to [0,1]. With pattern_std a few times the noise the classes stay
// linearly separable, which the directional experiments rely on, while still
// crowding each other enough that class boundaries take real work to keep.
std::pair<Dataset, Dataset> make_synthetic(const SyntheticSpec& spec, Rng& rng);

// Flat binary image format: 16-byte header {magic "DPFD", version u32,
// count u32, C u8, H u8, W u8, pad}, then {label u16, pixels float32}
// per record, everything little-endian.
void write_dpfd(const std::string& path, const Dataset& data);
Dataset read_dpfd(const std::string& path);

}  // namespace dpformer
