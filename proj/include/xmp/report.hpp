#pragma once

// Human-readable outputs of a probe run: SVG line charts and a text summary.
//
// Axis mapping (affine): with data ranges [x0, x1] and [y0, y1] and plot area
// [left, right] x [top, bottom] in pixels,
//   px = left + (x - x0) / (x1 - x0) * (right - left)
//   py = bottom - (y - y0) / (y1 - y0) * (bottom - top)
// x0/x1 are the smallest/largest layer; y0 = 0 and y1 is the largest value
// times 1.05 (1 for rates and sparsities unless a value exceeds it).

#include <filesystem>
#include <string>
#include <vector>

#include "xmp/probe.hpp"

namespace xmp {

struct Series {
    std::string name;
    std::vector<double> x;
    std::vector<double> y;
};

struct ChartFrame {
    double width = 640;
    double height = 400;
    double left = 70;
    double right = 470;
    double top = 40;
    double bottom = 340;
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;

    double px(double x) const { return left + (x - x0) / (x1 - x0) * (right - left); }
    double py(double y) const { return bottom - (y - y0) / (y1 - y0) * (bottom - top); }
};

/// Frame for the series; `unit_range` pins y1 to at least 1.
ChartFrame chart_frame(const std::vector<Series>& series, bool unit_range);

std::string render_line_chart(const std::string& title, const std::string& y_label,
                              const std::vector<Series>& series, bool unit_range);

/// recon_error.svg, sparsity.svg, alignment.svg.
std::vector<std::pair<std::string, std::string>> report_plots(const MetricsReport& report);

std::string summary_text(const MetricsReport& report, const ConvergenceCriteria& c = {});

/// Reads <dir>/metrics.json and writes the plots and summary.txt into
/// `out` (default: next to it). Nothing is written when the report has no
/// layers. Returns the written file names.
std::vector<std::string> write_report(const std::filesystem::path& dir, const std::filesystem::path& out = {});

}  // namespace xmp
