#pragma once

#include <string>

#include "dpformer/harness.hpp"

namespace dpformer {

// Run outputs as plain text: two CSVs plus two SVG charts, written with
// shortest round-trip number formatting so identical runs produce
// identical bytes.
void write_metrics_csv(const MetricsLog& log, const std::string& path);
void write_per_class_csv(const MetricsLog& log, const std::string& path);
void write_accuracy_svg(const MetricsLog& log, const std::string& path);
void write_forgetting_svg(const MetricsLog& log, const std::string& path);

// metrics.csv, per_class.csv, accuracy.svg, and forgetting.svg under dir,
// creating it if needed. The log must be non-empty.
void export_and_plot(const MetricsLog& log, const std::string& dir);

// Inverse of write_metrics_csv, exact for every stored value.
MetricsLog read_metrics_csv(const std::string& path);

}  // namespace dpformer
