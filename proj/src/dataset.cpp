#include "dpformer/dataset.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

namespace dpformer {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'F', 'D'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    out.append(b, 4);
}

std::uint32_t take_u32(const char* p) {
    std::uint32_t v;
    std::memcpy(&v, p, 4);
    return v;
}

void fill_class_samples(Dataset& out, const std::vector<float>& base, std::int64_t count,
                        std::uint16_t label, double noise, Rng& rng) {
    const std::int64_t pix = out.pixel_count();
    for (std::int64_t s = 0; s < count; ++s) {
        out.labels.push_back(label);
        for (std::int64_t p = 0; p < pix; ++p) {
            const double v = base[static_cast<std::size_t>(p)] + rng.normal(0.0, noise);
            out.pixels.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
        }
    }
}

}  // namespace

std::int64_t Dataset::num_classes() const {
    std::int64_t top = -1;
    for (std::uint16_t l : labels) top = std::max<std::int64_t>(top, l);
    return top + 1;
}

std::pair<Dataset, Dataset> make_synthetic(const SyntheticSpec& spec, Rng& rng) {
    if (spec.classes < 1 || spec.channels < 1 || spec.height < 1 || spec.width < 1)
        throw ConfigError("make_synthetic: empty geometry");
    if (spec.classes > 65536) throw ConfigError("make_synthetic: labels exceed 16 bits");
    if (spec.noise < 0.0) throw ConfigError("make_synthetic: negative noise");
    if (spec.pattern_std <= 0.0) throw ConfigError("make_synthetic: pattern_std must be positive");

    Dataset train, test;
    for (Dataset* d : {&train, &test}) {
        d->channels = spec.channels;
        d->height = spec.height;
        d->width = spec.width;
    }
    const std::int64_t pix = train.pixel_count();
    train.pixels.reserve(static_cast<std::size_t>(spec.classes * spec.train_per_class * pix));
    test.pixels.reserve(static_cast<std::size_t>(spec.classes * spec.test_per_class * pix));

    // Separate streams per purpose so changing sample counts never shifts
    // the class patterns.
    Rng pattern_rng = rng.derive(1);
    Rng train_rng = rng.derive(2);
    Rng test_rng = rng.derive(3);
    for (std::int64_t c = 0; c < spec.classes; ++c) {
        std::vector<float> base(static_cast<std::size_t>(pix));
        for (float& v : base)
            v = static_cast<float>(
                std::clamp(0.5 + pattern_rng.normal(0.0, spec.pattern_std), 0.05, 0.95));
        fill_class_samples(train, base, spec.train_per_class, static_cast<std::uint16_t>(c),
                           spec.noise, train_rng);
        fill_class_samples(test, base, spec.test_per_class, static_cast<std::uint16_t>(c),
                           spec.noise, test_rng);
    }
    return {std::move(train), std::move(test)};
}

void write_dpfd(const std::string& path, const Dataset& data) {
    if (data.channels < 1 || data.channels > 255 || data.height < 1 || data.height > 255 ||
        data.width < 1 || data.width > 255)
        throw FormatError("write_dpfd: extents must fit one byte each");
    if (data.pixels.size() != data.size() * static_cast<std::size_t>(data.pixel_count()))
        throw ContractError("write_dpfd: pixel buffer does not match record count");

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(data.size()));
    out.push_back(static_cast<char>(data.channels));
    out.push_back(static_cast<char>(data.height));
    out.push_back(static_cast<char>(data.width));
    out.push_back(0);
    const std::int64_t pix = data.pixel_count();
    for (std::size_t i = 0; i < data.size(); ++i) {
        char lb[2];
        std::memcpy(lb, &data.labels[i], 2);
        out.append(lb, 2);
        out.append(reinterpret_cast<const char*>(data.image(i)),
                   static_cast<std::size_t>(pix) * sizeof(float));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_dpfd: cannot open " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write_dpfd: short write to " + path);
}

Dataset read_dpfd(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_dpfd: cannot open " + path);
    std::string raw((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (raw.size() < 16 || std::memcmp(raw.data(), kMagic, 4) != 0)
        throw FormatError("read_dpfd: bad magic in " + path);
    const std::uint32_t version = take_u32(raw.data() + 4);
    if (version != kVersion)
        throw FormatError("read_dpfd: unsupported version " + std::to_string(version));
    const std::uint32_t count = take_u32(raw.data() + 8);

    Dataset d;
    d.channels = static_cast<unsigned char>(raw[12]);
    d.height = static_cast<unsigned char>(raw[13]);
    d.width = static_cast<unsigned char>(raw[14]);
    if (d.channels < 1 || d.height < 1 || d.width < 1)
        throw FormatError("read_dpfd: zero extent in header");

    const std::size_t pix = static_cast<std::size_t>(d.pixel_count());
    const std::size_t record = 2 + pix * sizeof(float);
    if (raw.size() != 16 + record * count)
        throw FormatError("read_dpfd: truncated file " + path);

    d.labels.resize(count);
    d.pixels.resize(pix * count);
    const char* p = raw.data() + 16;
    for (std::uint32_t i = 0; i < count; ++i) {
        std::memcpy(&d.labels[i], p, 2);
        std::memcpy(d.pixels.data() + pix * i, p + 2, pix * sizeof(float));
        p += record;
    }
    return d;
}

}  // namespace dpformer
