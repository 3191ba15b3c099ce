#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "dpformer/checkpoint.hpp"
#include "dpformer/config.hpp"
#include "dpformer/export.hpp"

using namespace dpformer;

namespace {

std::string write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    return path;
}

std::vector<unsigned char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in);
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in),
                                      std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

std::string message_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

ModelState task3_model(Rng& rng) {
    ModelConfig cfg;
    cfg.channels = 1;
    cfg.height = 6;
    cfg.width = 6;
    cfg.dim = 8;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.kernel = 7;
    cfg.tokenizer_stages = {{3, 2}};
    ModelState m = ModelState::init(rng, cfg);
    for (int t = 0; t < 3; ++t) m.begin_task(2, rng);
    return m;
}

TaskMetrics scripted_row(int task, double overall, double avg, double f, bool has_f,
                         std::int64_t params) {
    TaskMetrics r;
    r.task = task;
    r.overall_acc = overall;
    r.avg_acc = avg;
    r.last_acc = overall;
    r.f_class = f;
    r.has_f = has_f;
    r.params = params;
    r.per_class_acc = {overall, overall};
    if (has_f) r.per_class_f = {f};
    return r;
}

}  // namespace

TEST_CASE("empty config file yields the stock defaults") {
    RunConfig cfg = load_config(write_file("/tmp/dpformer_cfg_empty.cfg", ""));
    CHECK(cfg.exp.model.layers == 11);
    CHECK(cfg.exp.model.dim == 96);
    CHECK(cfg.exp.train.lambda == doctest::Approx(0.1));
    CHECK(cfg.exp.train.epochs == 30);
    CHECK(cfg.exp.train.opt.lr == doctest::Approx(5e-4));
}

TEST_CASE("config keys override defaults with and without sections") {
    const std::string text =
        "lambda = 0.2\n"
        "\n"
        "[model]\n"
        "dim = 24\n"
        "attention = msa\n"
        "tokenizer = 3x2,3x1\n"
        "[train]\n"
        "epochs = 7   # trailing comment\n"
        "augment = off\n"
        "[run]\n"
        "seed = 12\n"
        "buffer = 64\n";
    RunConfig cfg = load_config(write_file("/tmp/dpformer_cfg_mix.cfg", text));
    CHECK(cfg.exp.train.lambda == doctest::Approx(0.2));
    CHECK(cfg.exp.model.dim == 24);
    CHECK(cfg.exp.model.attention == AttentionKind::MSA);
    REQUIRE(cfg.exp.model.tokenizer_stages.size() == 2);
    CHECK(cfg.exp.model.tokenizer_stages[1] == std::pair<std::int64_t, std::int64_t>{3, 1});
    CHECK(cfg.exp.train.epochs == 7);
    CHECK(cfg.exp.train.augment == false);
    CHECK(cfg.exp.seed == 12);
    CHECK(cfg.exp.buffer_capacity == 64);
}

TEST_CASE("config errors carry the offending line number") {
    std::string path = write_file("/tmp/dpformer_cfg_bad1.cfg", "dim = 8\n\nnot a setting\n");
    std::string msg = message_of([&] { load_config(path); });
    CHECK(msg.find("line 3") != std::string::npos);

    path = write_file("/tmp/dpformer_cfg_bad2.cfg", "[model]\nwidgets = 3\n");
    msg = message_of([&] { load_config(path); });
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("widgets") != std::string::npos);

    path = write_file("/tmp/dpformer_cfg_bad3.cfg", "[plumbing]\n");
    msg = message_of([&] { load_config(path); });
    CHECK(msg.find("line 1") != std::string::npos);

    path = write_file("/tmp/dpformer_cfg_bad4.cfg", "[train]\nepochs = soon\n");
    msg = message_of([&] { load_config(path); });
    CHECK(msg.find("line 2") != std::string::npos);
    CHECK(msg.find("epochs") != std::string::npos);

    path = write_file("/tmp/dpformer_cfg_bad5.cfg", "[data]\ndataset = /no/such/dir\n");
    CHECK_THROWS_AS(load_config(path), ConfigError);
}

TEST_CASE("profiles rewrite the run coherently") {
    RunConfig desk = default_config();
    apply_profile(desk, "desk");
    CHECK(desk.exp.model.dim == 16);
    CHECK(desk.exp.model.layers == 2);
    CHECK(desk.exp.train.epochs == 20);
    CHECK(desk.exp.train.augment == false);
    CHECK(desk.exp.steps == 5);
    CHECK(desk.exp.buffer_capacity == 100);
    CHECK(desk.data.classes == 10);
    CHECK(desk.data.pattern_std == doctest::Approx(0.15));

    RunConfig paper = default_config();
    apply_profile(paper, "paper");
    CHECK(paper.exp.model.dim == 96);
    CHECK(paper.exp.train.epochs == 500);
    CHECK(paper.exp.train.batch == 200);
    CHECK(paper.exp.buffer_capacity == 2000);

    RunConfig other = default_config();
    CHECK_THROWS_AS(apply_profile(other, "bench"), ConfigError);
}

TEST_CASE("checkpoints restore the model bit for bit") {
    Rng rng(17);
    ModelState m = task3_model(rng);

    Tensor probe({2, 36});
    for (std::int64_t i = 0; i < probe.numel(); ++i)
        probe.data()[i] = 0.25 + 0.013 * static_cast<double>(i % 11);
    Tape off(false);
    Tensor before = model_forward(off, m, probe, 2).label_probs.clone();

    CheckpointExtras extras;
    Rng carried(99);
    carried.uniform();
    extras.rng = carried.state();
    OptimizerSnapshot opt;
    opt.step = 41;
    opt.m = {{1.0, 2.0}, {3.0}};
    opt.v = {{0.5, 0.25}, {0.125}};
    extras.optimizer = opt;

    const std::string path = "/tmp/dpformer_test_model.ckpt";
    save_checkpoint(path, m, extras);
    LoadedCheckpoint loaded = load_checkpoint(path);

    CHECK(loaded.model.current_task == 3);
    REQUIRE(loaded.model.tsk.has_value());
    CHECK(loaded.model.tsk->prototypes.size() == 3);
    CHECK(loaded.model.cls->prototypes.size() == 6);
    CHECK(loaded.model.classes_per_task == std::vector<std::int64_t>{2, 2, 2});

    Tensor after = model_forward(off, loaded.model, probe, 2).label_probs;
    REQUIRE(after.numel() == before.numel());
    CHECK(std::memcmp(after.data(), before.data(),
                      static_cast<std::size_t>(before.numel()) * sizeof(double)) == 0);

    REQUIRE(loaded.extras.rng.has_value());
    CHECK(loaded.extras.rng->counter == carried.state().counter);
    REQUIRE(loaded.extras.optimizer.has_value());
    CHECK(loaded.extras.optimizer->step == 41);
    CHECK(loaded.extras.optimizer->m == opt.m);
    CHECK(loaded.extras.optimizer->v == opt.v);
}

TEST_CASE("checkpoints refuse damage loudly") {
    Rng rng(18);
    ModelState m = task3_model(rng);
    const std::string path = "/tmp/dpformer_test_damage.ckpt";
    save_checkpoint(path, m);
    std::vector<unsigned char> bytes = slurp(path);

    // Wrong version.
    std::vector<unsigned char> versioned = bytes;
    versioned[4] = 9;
    spit("/tmp/dpformer_test_v9.ckpt", versioned);
    std::string msg =
        message_of([] { load_checkpoint("/tmp/dpformer_test_v9.ckpt"); });
    CHECK(msg.find("version 9") != std::string::npos);

    // Wrong magic.
    std::vector<unsigned char> unmagical = bytes;
    unmagical[0] = 'X';
    spit("/tmp/dpformer_test_nomagic.ckpt", unmagical);
    CHECK_THROWS_AS(load_checkpoint("/tmp/dpformer_test_nomagic.ckpt"), FormatError);

    // Truncated mid-tensor.
    std::vector<unsigned char> cut(bytes.begin(), bytes.end() - 200);
    spit("/tmp/dpformer_test_cut.ckpt", cut);
    CHECK_THROWS_AS(load_checkpoint("/tmp/dpformer_test_cut.ckpt"), FormatError);

    // A tensor whose stored shape disagrees with the rebuilt model: bump
    // the leading dimension of the first named parameter's record.
    const std::string first = m.named_params().front().name;
    auto it = std::search(bytes.begin(), bytes.end(), first.begin(), first.end());
    REQUIRE(it != bytes.end());
    std::size_t dim_at = static_cast<std::size_t>(it - bytes.begin()) + first.size() + 4;
    bytes[dim_at] = static_cast<unsigned char>(bytes[dim_at] + 1);
    spit("/tmp/dpformer_test_reshaped.ckpt", bytes);
    msg = message_of([] { load_checkpoint("/tmp/dpformer_test_reshaped.ckpt"); });
    CHECK(msg.find(first) != std::string::npos);
}

TEST_CASE("metrics csv round-trips exactly and plots are structurally sane") {
    MetricsLog log;
    log.rows.push_back(scripted_row(1, 0.9375, 0.9375, 0.0, false, 1234));
    log.rows.push_back(scripted_row(2, 0.8125, 0.875, 0.0625, true, 1500));
    log.rows.push_back(scripted_row(3, 1.0 / 3.0, 0.7, -0.015625, true, 1766));

    const std::string dir = "/tmp/dpformer_test_export";
    export_and_plot(log, dir);

    MetricsLog back = read_metrics_csv(dir + "/metrics.csv");
    REQUIRE(back.rows.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back.rows[i].task == log.rows[i].task);
        CHECK(back.rows[i].overall_acc == log.rows[i].overall_acc);
        CHECK(back.rows[i].avg_acc == log.rows[i].avg_acc);
        CHECK(back.rows[i].last_acc == log.rows[i].last_acc);
        CHECK(back.rows[i].has_f == log.rows[i].has_f);
        if (back.rows[i].has_f) CHECK(back.rows[i].f_class == log.rows[i].f_class);
        CHECK(back.rows[i].params == log.rows[i].params);
    }

    // Task 1 writes an empty forgetting cell, not a zero.
    std::vector<unsigned char> csv = slurp(dir + "/metrics.csv");
    std::string text(csv.begin(), csv.end());
    CHECK(text.find("1,0.9375,0.9375,0.9375,,1234") != std::string::npos);

    // Identical logs produce identical bytes.
    export_and_plot(log, dir);
    CHECK(slurp(dir + "/metrics.csv") == csv);

    std::vector<unsigned char> svg_bytes = slurp(dir + "/forgetting.svg");
    std::string svg(svg_bytes.begin(), svg_bytes.end());
    std::size_t bars = 0;
    for (std::size_t at = svg.find("<rect x="); at != std::string::npos;
         at = svg.find("<rect x=", at + 1))
        ++bars;
    CHECK(bars == 2);

    std::vector<unsigned char> acc_bytes = slurp(dir + "/accuracy.svg");
    std::string acc(acc_bytes.begin(), acc_bytes.end());
    CHECK(acc.find("<polyline") != std::string::npos);

    std::vector<unsigned char> pc = slurp(dir + "/per_class.csv");
    std::string pct(pc.begin(), pc.end());
    CHECK(pct.find("task,class,acc,f\n") == 0);
    CHECK(pct.find("1,0,0.9375,\n") != std::string::npos);

    MetricsLog empty;
    CHECK_THROWS_AS(export_and_plot(empty, dir), ContractError);
    CHECK_THROWS_AS(export_and_plot(log, "/proc/version/nope"), IoError);
}
