#include "dpformer/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "dpformer/error.hpp"

namespace dpformer {

namespace {

constexpr char kMagic[4] = {'D', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
    std::ofstream out;

    explicit Writer(const std::string& path) : out(path, std::ios::binary) {
        if (!out) throw IoError("cannot write checkpoint: " + path);
    }
    void bytes(const void* p, std::size_t n) {
        out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    template <typename T>
    void pod(T v) { bytes(&v, sizeof v); }
    void str(const std::string& s) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    void tensor_payload(const Tensor& t) {
        pod<std::uint32_t>(static_cast<std::uint32_t>(t.shape().size()));
        for (std::int64_t d : t.shape()) pod<std::int64_t>(d);
        bytes(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(double));
    }
};

struct Reader {
    std::ifstream in;
    std::string path;

    explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
        if (!in) throw IoError("cannot read checkpoint: " + p);
    }
    void bytes(void* p, std::size_t n) {
        in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw FormatError("checkpoint truncated: " + path);
    }
    template <typename T>
    T pod() {
        T v;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str() {
        auto n = pod<std::uint32_t>();
        if (n > (1u << 20)) throw FormatError("checkpoint name length implausible: " + path);
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    std::vector<std::int64_t> shape() {
        auto nd = pod<std::uint32_t>();
        if (nd > 8) throw FormatError("checkpoint rank implausible: " + path);
        std::vector<std::int64_t> dims(nd);
        for (auto& d : dims) d = pod<std::int64_t>();
        return dims;
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const ModelState& m,
                     const CheckpointExtras& extras) {
    Writer w(path);
    w.bytes(kMagic, sizeof kMagic);
    w.pod<std::uint32_t>(kVersion);

    const ModelConfig& c = m.cfg;
    w.pod<std::int64_t>(c.channels);
    w.pod<std::int64_t>(c.height);
    w.pod<std::int64_t>(c.width);
    w.pod<std::int64_t>(c.dim);
    w.pod<std::int32_t>(c.layers);
    w.pod<std::int32_t>(c.heads);
    w.pod<std::int32_t>(c.kernel);
    w.pod<std::uint8_t>(c.attention == AttentionKind::DiNA ? 0 : 1);
    w.pod<std::uint8_t>(c.class_prompt ? 1 : 0);
    w.pod<std::uint8_t>(c.task_prompt ? 1 : 0);
    w.pod<std::uint8_t>(c.aux_head ? 1 : 0);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(c.tokenizer_stages.size()));
    for (auto [patch, stride] : c.tokenizer_stages) {
        w.pod<std::int64_t>(patch);
        w.pod<std::int64_t>(stride);
    }

    w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.classes_per_task.size()));
    for (std::int64_t n : m.classes_per_task) w.pod<std::int64_t>(n);
    w.pod<std::int32_t>(m.current_task);

    // Pool provenance: which task minted each prototype and whether it is
    // frozen history. Redundant with the task sizes, which load verifies.
    if (m.cls) {
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.cls->prototypes.size()));
        std::int64_t cls_index = 0;
        for (std::size_t t = 0; t < m.classes_per_task.size(); ++t)
            for (std::int64_t j = 0; j < m.classes_per_task[t]; ++j, ++cls_index) {
                w.pod<std::int32_t>(static_cast<std::int32_t>(t + 1));
                w.pod<std::uint8_t>(cls_index < m.cls->frozen_count ? 1 : 0);
            }
    } else {
        w.pod<std::uint32_t>(0);
    }
    if (m.tsk) {
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(m.tsk->prototypes.size()));
        for (std::size_t t = 0; t < m.tsk->prototypes.size(); ++t) {
            w.pod<std::int32_t>(static_cast<std::int32_t>(t + 1));
            w.pod<std::uint8_t>(static_cast<std::int64_t>(t) < m.tsk->frozen_count ? 1 : 0);
        }
    } else {
        w.pod<std::uint32_t>(0);
    }

    std::vector<NamedTensor> params = m.named_params();
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const NamedTensor& nt : params) {
        w.str(nt.name);
        w.tensor_payload(nt.tensor);
    }

    if (extras.optimizer) {
        const OptimizerSnapshot& o = *extras.optimizer;
        if (o.m.size() != o.v.size())
            throw ContractError("save_checkpoint: optimizer moment lists disagree");
        w.pod<std::uint8_t>(1);
        w.pod<std::int64_t>(o.step);
        w.pod<std::uint32_t>(static_cast<std::uint32_t>(o.m.size()));
        for (std::size_t i = 0; i < o.m.size(); ++i) {
            w.pod<std::uint64_t>(o.m[i].size());
            w.bytes(o.m[i].data(), o.m[i].size() * sizeof(double));
            w.pod<std::uint64_t>(o.v[i].size());
            w.bytes(o.v[i].data(), o.v[i].size() * sizeof(double));
        }
    } else {
        w.pod<std::uint8_t>(0);
    }

    if (extras.rng) {
        w.pod<std::uint8_t>(1);
        w.pod<std::uint64_t>(extras.rng->seed);
        w.pod<std::uint64_t>(extras.rng->stream);
        w.pod<std::uint64_t>(extras.rng->counter);
        w.pod<double>(extras.rng->spare);
        w.pod<std::uint8_t>(extras.rng->has_spare ? 1 : 0);
    } else {
        w.pod<std::uint8_t>(0);
    }

    w.out.flush();
    if (!w.out) throw IoError("write failed: " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[4];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw FormatError("not a checkpoint file: " + path);
    auto version = r.pod<std::uint32_t>();
    if (version != kVersion)
        throw FormatError("checkpoint version " + std::to_string(version) +
                          " unsupported, expected " + std::to_string(kVersion));

    ModelConfig c;
    c.channels = r.pod<std::int64_t>();
    c.height = r.pod<std::int64_t>();
    c.width = r.pod<std::int64_t>();
    c.dim = r.pod<std::int64_t>();
    c.layers = r.pod<std::int32_t>();
    c.heads = r.pod<std::int32_t>();
    c.kernel = r.pod<std::int32_t>();
    c.attention = r.pod<std::uint8_t>() == 0 ? AttentionKind::DiNA : AttentionKind::MSA;
    c.class_prompt = r.pod<std::uint8_t>() != 0;
    c.task_prompt = r.pod<std::uint8_t>() != 0;
    c.aux_head = r.pod<std::uint8_t>() != 0;
    auto n_stages = r.pod<std::uint32_t>();
    if (n_stages > 8) throw FormatError("checkpoint stage count implausible: " + path);
    c.tokenizer_stages.clear();
    for (std::uint32_t i = 0; i < n_stages; ++i) {
        std::int64_t patch = r.pod<std::int64_t>();
        std::int64_t stride = r.pod<std::int64_t>();
        c.tokenizer_stages.emplace_back(patch, stride);
    }

    auto n_tasks = r.pod<std::uint32_t>();
    if (n_tasks > (1u << 16)) throw FormatError("checkpoint task count implausible: " + path);
    std::vector<std::int64_t> classes_per_task(n_tasks);
    for (auto& n : classes_per_task) n = r.pod<std::int64_t>();
    auto current_task = r.pod<std::int32_t>();

    // Replays the growth schedule to get the right shapes and freeze
    // state; every value is then overwritten from the file.
    Rng scratch(0);
    ModelState m = ModelState::init(scratch, c);
    for (std::int64_t n : classes_per_task) m.begin_task(n, scratch);
    if (m.current_task != current_task)
        throw FormatError("checkpoint task index disagrees with its task sizes: " + path);

    auto check_provenance = [&](std::uint32_t stored, std::size_t rebuilt,
                                const char* pool) {
        if (stored != rebuilt)
            throw FormatError(std::string("checkpoint ") + pool +
                              " pool size disagrees with task sizes: " + path);
    };
    auto n_cls = r.pod<std::uint32_t>();
    check_provenance(n_cls, m.cls ? m.cls->prototypes.size() : 0, "class");
    std::int64_t cls_index = 0;
    for (std::uint32_t i = 0; i < n_cls; ++i, ++cls_index) {
        auto source = r.pod<std::int32_t>();
        auto frozen = r.pod<std::uint8_t>();
        std::int64_t acc = 0;
        std::int32_t expect_task = 0;
        for (std::size_t t = 0; t < classes_per_task.size(); ++t) {
            acc += classes_per_task[t];
            if (cls_index < acc) { expect_task = static_cast<std::int32_t>(t + 1); break; }
        }
        if (source != expect_task)
            throw FormatError("checkpoint class prototype provenance mismatch: " + path);
        bool expect_frozen = cls_index < m.cls->frozen_count;
        if ((frozen != 0) != expect_frozen)
            throw FormatError("checkpoint class prototype freeze state mismatch: " + path);
    }
    auto n_tsk = r.pod<std::uint32_t>();
    check_provenance(n_tsk, m.tsk ? m.tsk->prototypes.size() : 0, "task");
    for (std::uint32_t i = 0; i < n_tsk; ++i) {
        auto source = r.pod<std::int32_t>();
        auto frozen = r.pod<std::uint8_t>();
        if (source != static_cast<std::int32_t>(i + 1))
            throw FormatError("checkpoint task prototype provenance mismatch: " + path);
        bool expect_frozen = static_cast<std::int64_t>(i) < m.tsk->frozen_count;
        if ((frozen != 0) != expect_frozen)
            throw FormatError("checkpoint task prototype freeze state mismatch: " + path);
    }

    std::vector<NamedTensor> params = m.named_params();
    auto stored = r.pod<std::uint32_t>();
    if (stored != params.size())
        throw FormatError("checkpoint holds " + std::to_string(stored) +
                          " parameters, model rebuilt with " +
                          std::to_string(params.size()));
    for (std::uint32_t i = 0; i < stored; ++i) {
        std::string name = r.str();
        std::vector<std::int64_t> dims = r.shape();
        NamedTensor* target = nullptr;
        for (NamedTensor& nt : params)
            if (nt.name == name) { target = &nt; break; }
        if (!target)
            throw FormatError("checkpoint parameter '" + name +
                              "' has no home in the rebuilt model");
        if (dims != target->tensor.shape()) {
            std::string want, got;
            for (std::int64_t d : target->tensor.shape()) want += std::to_string(d) + " ";
            for (std::int64_t d : dims) got += std::to_string(d) + " ";
            throw DimensionError("checkpoint parameter '" + name + "' has shape " + got +
                                 "but the model wants " + want);
        }
        r.bytes(target->tensor.data(),
                static_cast<std::size_t>(target->tensor.numel()) * sizeof(double));
    }

    LoadedCheckpoint out{std::move(m), {}};
    if (r.pod<std::uint8_t>() != 0) {
        OptimizerSnapshot o;
        o.step = r.pod<std::int64_t>();
        auto slots = r.pod<std::uint32_t>();
        if (slots > (1u << 20)) throw FormatError("checkpoint slot count implausible: " + path);
        o.m.resize(slots);
        o.v.resize(slots);
        for (std::uint32_t i = 0; i < slots; ++i) {
            auto nm = r.pod<std::uint64_t>();
            o.m[i].resize(nm);
            r.bytes(o.m[i].data(), nm * sizeof(double));
            auto nv = r.pod<std::uint64_t>();
            o.v[i].resize(nv);
            r.bytes(o.v[i].data(), nv * sizeof(double));
        }
        out.extras.optimizer = std::move(o);
    }
    if (r.pod<std::uint8_t>() != 0) {
        Rng::State s;
        s.seed = r.pod<std::uint64_t>();
        s.stream = r.pod<std::uint64_t>();
        s.counter = r.pod<std::uint64_t>();
        s.spare = r.pod<double>();
        s.has_spare = r.pod<std::uint8_t>() != 0;
        out.extras.rng = s;
    }
    return out;
}

}  // namespace dpformer
