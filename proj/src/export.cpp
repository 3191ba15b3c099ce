#include "dpformer/export.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dpformer/error.hpp"

namespace dpformer {

namespace {

// Shortest decimal that parses back to the same double.
std::string fmt(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    if (ec != std::errc()) throw NumericError("number formatting failed");
    return std::string(buf, end);
}

// Fixed two decimals for SVG coordinates, stable across runs.
std::string coord(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v, std::chars_format::fixed, 2);
    if (ec != std::errc()) throw NumericError("coordinate formatting failed");
    return std::string(buf, end);
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write: " + path);
    return out;
}

void finish(std::ofstream& out, const std::string& path) {
    out.flush();
    if (!out) throw IoError("write failed: " + path);
}

struct ChartFrame {
    double left = 56.0, right = 452.0, top = 24.0, bottom = 280.0;
    double x0 = 0.0, x1 = 1.0, y0 = 0.0, y1 = 1.0;

    double x(double v) const { return left + (v - x0) / (x1 - x0) * (right - left); }
    double y(double v) const { return bottom - (v - y0) / (y1 - y0) * (bottom - top); }
};

void chart_open(std::ofstream& out, const std::string& title) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"480\" height=\"320\" "
           "viewBox=\"0 0 480 320\">\n"
        << "<rect width=\"480\" height=\"320\" fill=\"white\"/>\n"
        << "<text x=\"240\" y=\"16\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"13\">" << title << "</text>\n";
}

void chart_axes(std::ofstream& out, const ChartFrame& f) {
    out << "<line x1=\"" << coord(f.left) << "\" y1=\"" << coord(f.bottom) << "\" x2=\""
        << coord(f.right) << "\" y2=\"" << coord(f.bottom)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n"
        << "<line x1=\"" << coord(f.left) << "\" y1=\"" << coord(f.top) << "\" x2=\""
        << coord(f.left) << "\" y2=\"" << coord(f.bottom)
        << "\" stroke=\"black\" stroke-width=\"1\"/>\n";
}

void tick_label(std::ofstream& out, double px, double py, const std::string& text,
                const char* anchor) {
    out << "<text x=\"" << coord(px) << "\" y=\"" << coord(py) << "\" text-anchor=\""
        << anchor << "\" font-family=\"sans-serif\" font-size=\"11\">" << text
        << "</text>\n";
}

}  // namespace

void write_metrics_csv(const MetricsLog& log, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "task,overall_acc,avg_acc,last_acc,f_class,params\n";
    for (const TaskMetrics& r : log.rows) {
        out << r.task << ',' << fmt(r.overall_acc) << ',' << fmt(r.avg_acc) << ','
            << fmt(r.last_acc) << ',' << (r.has_f ? fmt(r.f_class) : std::string())
            << ',' << r.params << '\n';
    }
    finish(out, path);
}

void write_per_class_csv(const MetricsLog& log, const std::string& path) {
    std::ofstream out = open_out(path);
    out << "task,class,acc,f\n";
    for (const TaskMetrics& r : log.rows) {
        for (std::size_t j = 0; j < r.per_class_acc.size(); ++j) {
            out << r.task << ',' << j << ',' << fmt(r.per_class_acc[j]) << ',';
            if (r.has_f && j < r.per_class_f.size()) out << fmt(r.per_class_f[j]);
            out << '\n';
        }
    }
    finish(out, path);
}

void write_accuracy_svg(const MetricsLog& log, const std::string& path) {
    std::ofstream out = open_out(path);
    ChartFrame f;
    f.x0 = 1.0;
    f.x1 = std::max<double>(2.0, static_cast<double>(log.rows.back().task));
    f.y0 = 0.0;
    f.y1 = 1.0;

    chart_open(out, "Overall accuracy by task");
    chart_axes(out, f);
    for (const TaskMetrics& r : log.rows)
        tick_label(out, f.x(r.task), f.bottom + 16.0, std::to_string(r.task), "middle");
    for (double v : {0.0, 0.5, 1.0})
        tick_label(out, f.left - 6.0, f.y(v) + 4.0, coord(v), "end");

    out << "<polyline fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < log.rows.size(); ++i) {
        if (i) out << ' ';
        out << coord(f.x(log.rows[i].task)) << ',' << coord(f.y(log.rows[i].overall_acc));
    }
    out << "\"/>\n";
    for (const TaskMetrics& r : log.rows)
        out << "<circle cx=\"" << coord(f.x(r.task)) << "\" cy=\""
            << coord(f.y(r.overall_acc)) << "\" r=\"3\" fill=\"#1f6fb2\"/>\n";
    out << "</svg>\n";
    finish(out, path);
}

void write_forgetting_svg(const MetricsLog& log, const std::string& path) {
    std::ofstream out = open_out(path);

    double peak = 0.0;
    for (const TaskMetrics& r : log.rows)
        if (r.has_f) peak = std::max(peak, std::abs(r.f_class));
    // Round the scale up to a tidy bound so near-zero scores still get a
    // visible axis.
    double bound = 0.05;
    while (bound < peak) bound *= 2.0;

    ChartFrame f;
    f.x0 = 1.5;
    f.x1 = std::max<double>(2.5, static_cast<double>(log.rows.back().task) + 0.5);
    f.y0 = -bound;
    f.y1 = bound;

    chart_open(out, "Class forgetting score by task");
    chart_axes(out, f);
    out << "<line x1=\"" << coord(f.left) << "\" y1=\"" << coord(f.y(0.0)) << "\" x2=\""
        << coord(f.right) << "\" y2=\"" << coord(f.y(0.0))
        << "\" stroke=\"#888888\" stroke-width=\"1\" stroke-dasharray=\"4 3\"/>\n";
    for (double v : {-bound, 0.0, bound})
        tick_label(out, f.left - 6.0, f.y(v) + 4.0, fmt(v), "end");

    for (const TaskMetrics& r : log.rows) {
        if (!r.has_f) continue;
        const double w = 24.0;
        const double cx = f.x(static_cast<double>(r.task));
        const double y0 = f.y(std::max(0.0, r.f_class));
        const double h = std::abs(f.y(r.f_class) - f.y(0.0));
        out << "<rect x=\"" << coord(cx - w / 2.0) << "\" y=\"" << coord(y0)
            << "\" width=\"" << coord(w) << "\" height=\"" << coord(h)
            << "\" fill=\"#c2603d\"/>\n";
        tick_label(out, cx, f.bottom + 16.0, std::to_string(r.task), "middle");
    }
    out << "</svg>\n";
    finish(out, path);
}

void export_and_plot(const MetricsLog& log, const std::string& dir) {
    if (log.rows.empty()) throw ContractError("export_and_plot: empty metrics log");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output dir: " + dir);
    write_metrics_csv(log, dir + "/metrics.csv");
    write_per_class_csv(log, dir + "/per_class.csv");
    write_accuracy_svg(log, dir + "/accuracy.svg");
    write_forgetting_svg(log, dir + "/forgetting.svg");
}

MetricsLog read_metrics_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read: " + path);
    std::string line;
    if (!std::getline(in, line) || line != "task,overall_acc,avg_acc,last_acc,f_class,params")
        throw FormatError("metrics csv: bad header in " + path);

    MetricsLog log;
    int line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t pos = 0;
        while (true) {
            std::size_t comma = line.find(',', pos);
            cells.push_back(line.substr(pos, comma == std::string::npos ? comma : comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        if (cells.size() != 6)
            throw FormatError("metrics csv line " + std::to_string(line_no) +
                              ": expected 6 cells");
        TaskMetrics r;
        try {
            r.task = std::stoi(cells[0]);
            r.overall_acc = std::stod(cells[1]);
            r.avg_acc = std::stod(cells[2]);
            r.last_acc = std::stod(cells[3]);
            r.has_f = !cells[4].empty();
            if (r.has_f) r.f_class = std::stod(cells[4]);
            r.params = std::stoll(cells[5]);
        } catch (const std::exception&) {
            throw FormatError("metrics csv line " + std::to_string(line_no) +
                              ": bad number");
        }
        log.rows.push_back(std::move(r));
    }
    return log;
}

}  // namespace dpformer
