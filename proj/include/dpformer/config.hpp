#pragma once

#include <string>

#include "dpformer/harness.hpp"

namespace dpformer {

// Everything one run needs: the experiment itself, where its data comes
// from, and where its outputs go. Defaults describe the full-scale setup;
// profiles swap in coherent alternatives before any file overrides land.
struct RunConfig {
    ExperimentConfig exp;
    SyntheticSpec data;
    std::string dataset_path;  // empty means synthesize from `data`
    std::string out_dir = "out";
};

RunConfig default_config();

// The two shipped setups. "paper" is the full-scale configuration; "desk"
// is the small, CPU-minutes benchmark the directional experiments run on.
void apply_profile(RunConfig& cfg, const std::string& name);

// Line-oriented `key = value` text with `[section]` headers and `#`
// comments. Sections are model, train, data, and run; a bare key outside
// any section is accepted when it names exactly one setting. Unknown keys,
// unknown sections, and malformed lines are errors naming the line.
void overlay_config_file(RunConfig& cfg, const std::string& path);

// Defaults plus one file on top.
RunConfig load_config(const std::string& path);

// Model dims follow the data, not the other way around: called after the
// dataset is known (ingested or synthesized) to stamp its geometry into
// the model config.
void bind_data_geometry(RunConfig& cfg, const Dataset& train);

}  // namespace dpformer
