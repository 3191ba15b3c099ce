#include <cstdio>
#include <filesystem>
#include <string>

#include "CLI11.hpp"
#include "dpformer/checkpoint.hpp"
#include "dpformer/config.hpp"
#include "dpformer/export.hpp"
#include "dpformer/gradcheck.hpp"

using namespace dpformer;

namespace {

struct CommonFlags {
    std::string config_path;
    std::string profile;
    int seed = -1;
    std::string out_dir;
    bool no_class_prompt = false;
    bool no_task_prompt = false;
    bool no_kd = false;
    bool no_aux = false;
    std::string attention;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_path, "Config file (key = value with [section] headers)");
    cmd->add_option("--profile", f.profile, "Built-in profile: desk or paper")
        ->check(CLI::IsMember({"desk", "paper"}));
    cmd->add_option("--seed", f.seed, "Run seed");
    cmd->add_option("--out", f.out_dir, "Output directory");
    cmd->add_flag("--no-class-prompt", f.no_class_prompt, "Disable the class prompt module");
    cmd->add_flag("--no-task-prompt", f.no_task_prompt, "Disable the task prompt module");
    cmd->add_flag("--no-kd", f.no_kd, "Drop the distillation term");
    cmd->add_flag("--no-aux", f.no_aux, "Drop the auxiliary head and its loss");
    cmd->add_option("--attention", f.attention, "Attention kind: dina or msa")
        ->check(CLI::IsMember({"dina", "msa"}));
}

RunConfig resolve(const CommonFlags& f) {
    RunConfig cfg = default_config();
    if (!f.profile.empty()) apply_profile(cfg, f.profile);
    if (!f.config_path.empty()) overlay_config_file(cfg, f.config_path);
    if (f.seed >= 0) cfg.exp.seed = static_cast<unsigned>(f.seed);
    if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
    if (f.no_class_prompt) cfg.exp.model.class_prompt = false;
    if (f.no_task_prompt) cfg.exp.model.task_prompt = false;
    if (f.no_kd) cfg.exp.train.kd = false;
    if (f.no_aux) cfg.exp.train.aux = false;
    if (f.attention == "msa") cfg.exp.model.attention = AttentionKind::MSA;
    if (f.attention == "dina") cfg.exp.model.attention = AttentionKind::DiNA;
    return cfg;
}

std::pair<Dataset, Dataset> obtain_data(const RunConfig& cfg) {
    if (!cfg.dataset_path.empty()) {
        return {read_dpfd(cfg.dataset_path + "/train.dpfd"),
                read_dpfd(cfg.dataset_path + "/test.dpfd")};
    }
    Rng data_rng(cfg.exp.seed + 9000);
    return make_synthetic(cfg.data, data_rng);
}

void print_rows(const MetricsLog& log) {
    for (const TaskMetrics& r : log.rows) {
        std::printf("task %d  overall %.4f  avg %.4f", r.task, r.overall_acc, r.avg_acc);
        if (r.has_f) std::printf("  f_class %+.4f", r.f_class);
        std::printf("  params %lld\n", static_cast<long long>(r.params));
    }
}

int cmd_train(const CommonFlags& f) {
    RunConfig cfg = resolve(f);
    auto [train, test] = obtain_data(cfg);
    bind_data_geometry(cfg, train);
    ExperimentResult res = run_experiment_full(std::move(train), std::move(test), cfg.exp);
    print_rows(res.log);
    export_and_plot(res.log, cfg.out_dir);
    CheckpointExtras extras;
    extras.rng = res.rng;
    save_checkpoint(cfg.out_dir + "/model.ckpt", res.model, extras);
    std::printf("wrote %s/{metrics.csv,per_class.csv,accuracy.svg,forgetting.svg,model.ckpt}\n",
                cfg.out_dir.c_str());
    return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& ckpt_path) {
    RunConfig cfg = resolve(f);
    std::string path = ckpt_path.empty() ? cfg.out_dir + "/model.ckpt" : ckpt_path;
    LoadedCheckpoint loaded = load_checkpoint(path);

    auto [train, test] = obtain_data(cfg);
    Rng split_rng = Rng(cfg.exp.seed).derive(1);
    CILScenario sc = split_tasks(std::move(train), std::move(test), cfg.exp.steps, split_rng);

    EvalResult ev = evaluate(loaded.model, sc, loaded.model.current_task);
    for (std::size_t c = 0; c < ev.per_class.size(); ++c)
        std::printf("class %zu  acc %.4f  (%lld samples)\n", c, ev.per_class[c],
                    static_cast<long long>(ev.per_class_total[c]));
    std::printf("overall %.4f over %d task(s)\n", ev.overall, loaded.model.current_task);
    return 0;
}

int cmd_ablate(const CommonFlags& f) {
    RunConfig base = resolve(f);
    struct Arm {
        const char* name;
        void (*tweak)(ExperimentConfig&);
    };
    const Arm arms[] = {
        {"full", [](ExperimentConfig&) {}},
        {"no_class_prompt", [](ExperimentConfig& c) { c.model.class_prompt = false; }},
        {"no_task_prompt", [](ExperimentConfig& c) { c.model.task_prompt = false; }},
        {"no_prompts", [](ExperimentConfig& c) {
             c.model.class_prompt = false;
             c.model.task_prompt = false; }},
        {"no_kd", [](ExperimentConfig& c) { c.train.kd = false; }},
        {"no_aux", [](ExperimentConfig& c) { c.train.aux = false; }},
        {"msa", [](ExperimentConfig& c) { c.model.attention = AttentionKind::MSA; }},
    };

    std::error_code ec;
    std::filesystem::create_directories(base.out_dir, ec);
    if (ec) throw IoError("cannot create output dir: " + base.out_dir);
    std::string path = base.out_dir + "/ablate.csv";
    std::FILE* csv = std::fopen(path.c_str(), "wb");
    if (!csv) throw IoError("cannot write: " + path);
    std::fprintf(csv, "config,last_acc,avg_acc\n");

    for (const Arm& arm : arms) {
        RunConfig cfg = base;
        arm.tweak(cfg.exp);
        auto [train, test] = obtain_data(cfg);
        bind_data_geometry(cfg, train);
        MetricsLog log = run_experiment(std::move(train), std::move(test), cfg.exp);
        const TaskMetrics& last = log.rows.back();
        std::printf("%-16s last %.4f  avg-of-avgs %.4f\n", arm.name, last.last_acc,
                    last.avg_acc);
        std::fprintf(csv, "%s,%.17g,%.17g\n", arm.name, last.last_acc, last.avg_acc);
    }
    std::fclose(csv);
    std::printf("wrote %s\n", path.c_str());
    return 0;
}

int cmd_gradcheck(int seed, bool verbose) {
    GradcheckReport rep = model_gradcheck(static_cast<unsigned>(seed), verbose);
    std::printf("gradcheck: %zu parameter tensors, worst rel err %.3e\n",
                rep.entries.size(), rep.worst);
    if (rep.worst > 1e-3) {
        std::fprintf(stderr, "gradcheck FAILED (tolerance 1e-3)\n");
        return 1;
    }
    return 0;
}

int cmd_plot(const std::string& in_path, const std::string& out_dir) {
    // Accept either the run directory or the csv file itself.
    std::filesystem::path in(in_path);
    if (std::filesystem::is_directory(in)) in /= "metrics.csv";
    MetricsLog log = read_metrics_csv(in.string());
    if (log.rows.empty()) throw FormatError("metrics.csv has no data rows");
    std::string dir = out_dir.empty() ? in.parent_path().string() : out_dir;
    if (dir.empty()) dir = ".";
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output dir: " + dir);
    write_accuracy_svg(log, dir + "/accuracy.svg");
    write_forgetting_svg(log, dir + "/forgetting.svg");
    std::printf("wrote %s/{accuracy.svg,forgetting.svg}\n", dir.c_str());
    return 0;
}

int cmd_synth(const CommonFlags& f) {
    RunConfig cfg = resolve(f);
    std::error_code ec;
    std::filesystem::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output dir: " + cfg.out_dir);
    Rng data_rng(cfg.exp.seed + 9000);
    auto [train, test] = make_synthetic(cfg.data, data_rng);
    write_dpfd(cfg.out_dir + "/train.dpfd", train);
    write_dpfd(cfg.out_dir + "/test.dpfd", test);
    std::printf("wrote %s/{train.dpfd,test.dpfd}  (%zu train, %zu test records)\n",
                cfg.out_dir.c_str(), train.size(), test.size());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Continual-learning prompt transformer driver"};
    app.require_subcommand(1);

    CommonFlags train_f, eval_f, ablate_f, synth_f;
    std::string ckpt_path, plot_in, plot_out;
    int gc_seed = 7;
    bool gc_verbose = false;

    CLI::App* train_cmd = app.add_subcommand("train", "Train through all tasks, export metrics and a checkpoint");
    add_common(train_cmd, train_f);
    CLI::App* eval_cmd = app.add_subcommand("eval", "Evaluate a saved checkpoint on its scenario");
    add_common(eval_cmd, eval_f);
    eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint path (default OUT/model.ckpt)");
    CLI::App* ablate_cmd = app.add_subcommand("ablate", "Run the module, loss, and attention ablation grid");
    add_common(ablate_cmd, ablate_f);
    CLI::App* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference audit of every gradient path");
    gc_cmd->add_option("--seed", gc_seed, "Gradcheck seed");
    gc_cmd->add_flag("--verbose", gc_verbose, "Print per-tensor errors");
    CLI::App* plot_cmd = app.add_subcommand("plot", "Regenerate SVG charts from a metrics.csv");
    plot_cmd->add_option("--in", plot_in, "Run directory or metrics.csv path")->required();
    plot_cmd->add_option("--out", plot_out, "Directory for charts (default same as --in)");
    CLI::App* synth_cmd = app.add_subcommand("synth", "Emit a synthetic dataset as train/test dpfd files");
    add_common(synth_cmd, synth_f);

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(train_f);
        if (eval_cmd->parsed()) return cmd_eval(eval_f, ckpt_path);
        if (ablate_cmd->parsed()) return cmd_ablate(ablate_f);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_seed, gc_verbose);
        if (plot_cmd->parsed()) return cmd_plot(plot_in, plot_out);
        if (synth_cmd->parsed()) return cmd_synth(synth_f);
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
