#include "xmp/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "xmp/tensor_io.hpp"

namespace xmp {

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd"};

std::string fmt(double v, const char* f = "%.3f")
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else if (c == '&')
            out += "&amp;";
        else
            out += c;
    }
    return out;
}

}  // namespace

ChartFrame chart_frame(const std::vector<Series>& series, bool unit_range)
{
    ChartFrame f;
    bool any = false;
    double xmin = 0, xmax = 0, ymax = 0;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size())
            throw ShapeMismatch("series '" + s.name + "' has mismatched x/y");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!any) {
                xmin = xmax = s.x[i];
                any = true;
            }
            xmin = std::min(xmin, s.x[i]);
            xmax = std::max(xmax, s.x[i]);
            ymax = std::max(ymax, s.y[i]);
        }
    }
    if (!any)
        throw PreconditionError("chart has no data");
    f.x0 = xmin;
    f.x1 = xmax > xmin ? xmax : xmin + 1;
    f.y0 = 0;
    f.y1 = unit_range && ymax <= 1.0 ? 1.0 : (ymax > 0 ? ymax * 1.05 : 1.0);
    return f;
}

std::string render_line_chart(const std::string& title, const std::string& y_label,
                              const std::vector<Series>& series, bool unit_range)
{
    const ChartFrame f = chart_frame(series, unit_range);
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\"" << f.height
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << (f.left + f.right) / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
       << escape(title) << "</text>\n";
    os << "<line x1=\"" << f.left << "\" y1=\"" << f.bottom << "\" x2=\"" << f.right << "\" y2=\"" << f.bottom
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << f.left << "\" y1=\"" << f.top << "\" x2=\"" << f.left << "\" y2=\"" << f.bottom
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double y = f.y0 + (f.y1 - f.y0) * i / 4.0;
        os << "<text x=\"" << f.left - 6 << "\" y=\"" << fmt(f.py(y) + 4) << "\" text-anchor=\"end\">"
           << fmt(y, "%.3g") << "</text>\n";
    }
    for (double x = f.x0; x <= f.x1 + 1e-9; x += 1.0)
        os << "<text x=\"" << fmt(f.px(x)) << "\" y=\"" << f.bottom + 16 << "\" text-anchor=\"middle\">"
           << fmt(x, "%g") << "</text>\n";
    os << "<text x=\"" << (f.left + f.right) / 2 << "\" y=\"" << f.bottom + 36
       << "\" text-anchor=\"middle\">layer</text>\n";
    os << "<text x=\"18\" y=\"" << (f.top + f.bottom) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 18 "
       << (f.top + f.bottom) / 2 << ")\">" << escape(y_label) << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = kColors[k % 4];
        os << "<polyline data-series=\"" << escape(s.name) << "\" fill=\"none\" stroke=\"" << color
           << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i)
            os << (i ? " " : "") << fmt(f.px(s.x[i])) << ',' << fmt(f.py(s.y[i]));
        os << "\"/>\n";
        const double ly = f.top + 10 + 20.0 * static_cast<double>(k);
        os << "<line x1=\"" << f.right + 15 << "\" y1=\"" << ly << "\" x2=\"" << f.right + 35 << "\" y2=\"" << ly
           << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << f.right + 40 << "\" y=\"" << ly + 4 << "\">" << escape(s.name) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

std::vector<std::pair<std::string, std::string>> report_plots(const MetricsReport& report)
{
    if (report.layers.empty())
        throw PreconditionError("report has no layers");
    auto metric_series = [&](auto get, const std::vector<TokenGroup>& groups) {
        std::vector<Series> out;
        for (auto g : groups) {
            Series s{group_name(g), {}, {}};
            for (const auto& l : report.layers) {
                auto v = get(l, g);
                if (!v)
                    continue;
                s.x.push_back(l.layer);
                s.y.push_back(*v);
            }
            out.push_back(s);
        }
        return out;
    };
    const std::vector<TokenGroup> all(std::begin(kAllGroups), std::end(kAllGroups));
    auto e = metric_series(
        [](const LayerMetrics& l, TokenGroup g) -> std::optional<double> {
            auto it = l.groups.find(g);
            return it == l.groups.end() ? std::nullopt : std::optional<double>(it->second.recon_error);
        },
        all);
    auto s = metric_series(
        [](const LayerMetrics& l, TokenGroup g) -> std::optional<double> {
            auto it = l.groups.find(g);
            return it == l.groups.end() ? std::nullopt : std::optional<double>(it->second.sparsity);
        },
        all);
    auto a = metric_series(
        [](const LayerMetrics& l, TokenGroup g) -> std::optional<double> {
            auto it = l.alignment.find(g);
            return it == l.alignment.end() ? std::nullopt : std::optional<double>(it->second);
        },
        {TokenGroup::VlmVisual, TokenGroup::TextOnlyBaseline});
    return {{"recon_error.svg", render_line_chart("SAE reconstruction error by layer", "E_l", e, false)},
            {"sparsity.svg", render_line_chart("SAE sparsity by layer", "S_l (l0 / d_sae)", s, true)},
            {"alignment.svg", render_line_chart("Description alignment by layer", "alignment rate", a, true)}};
}

std::string summary_text(const MetricsReport& report, const ConvergenceCriteria& c)
{
    const TrendStats t = trend_stats(report, c);
    std::ostringstream os;
    os << "layer  E_visual    E_text      E_baseline  S_visual  S_text  S_base  align_vis  align_base\n";
    for (const auto& l : report.layers) {
        auto g = [&](TokenGroup k) { return l.groups.count(k) ? l.groups.at(k) : GroupMetrics{}; };
        auto a = [&](TokenGroup k) { return l.alignment.count(k) ? l.alignment.at(k) : 0.0; };
        os << fmt(l.layer, "%5.0f") << "  " << fmt(g(TokenGroup::VlmVisual).recon_error, "%-10.4g") << "  "
           << fmt(g(TokenGroup::VlmText).recon_error, "%-10.4g") << "  "
           << fmt(g(TokenGroup::TextOnlyBaseline).recon_error, "%-10.4g") << "  "
           << fmt(g(TokenGroup::VlmVisual).sparsity, "%-8.4f") << "  " << fmt(g(TokenGroup::VlmText).sparsity, "%-6.4f")
           << "  " << fmt(g(TokenGroup::TextOnlyBaseline).sparsity, "%-6.4f") << "  "
           << fmt(a(TokenGroup::VlmVisual), "%-9.3f") << "  " << fmt(a(TokenGroup::TextOnlyBaseline), "%.3f") << "\n";
    }
    os << "\nexamples: " << report.n_rs_examples << " (error/sparsity), " << report.n_align_examples
       << " (alignment)\n";
    os << "spearman rho(layer, visual alignment): " << fmt(t.spearman_rho, "%.4f") << "\n";
    os << "visual alignment, first third: " << fmt(t.first_third_alignment, "%.4f")
       << ", last third: " << fmt(t.last_third_alignment, "%.4f") << "\n";
    os << "E(visual)/E(baseline), first third: " << fmt(t.first_third_error_ratio, "%.4f")
       << ", last third: " << fmt(t.last_third_error_ratio, "%.4f") << "\n";
    os << "convergence layer: "
       << (t.convergence_layer ? std::to_string(*t.convergence_layer) : std::string("none")) << " (rate >= "
       << c.rate_fraction << " x max, error ratio <= " << c.error_ratio << ")\n";
    return os.str();
}

std::vector<std::string> write_report(const std::filesystem::path& dir, const std::filesystem::path& out)
{
    const auto path = dir / "metrics.json";
    if (!std::filesystem::exists(path))
        throw PreconditionError("missing " + path.string());
    const auto bytes = read_bytes(path);
    const auto report =
        MetricsReport::from_json(nlohmann::json::parse(std::string(bytes.begin(), bytes.end())));
    ConvergenceCriteria c;
    c.rate_fraction = report.config.value("convergence_rate_fraction", c.rate_fraction);
    c.error_ratio = report.config.value("convergence_error_ratio", c.error_ratio);
    // Render everything before writing so a failure leaves no partial output.
    auto plots = report_plots(report);
    const std::string summary = summary_text(report, c);
    const auto target = out.empty() ? dir : out;
    std::filesystem::create_directories(target);
    std::vector<std::string> written;
    for (const auto& [name, svg] : plots) {
        write_bytes(target / name, std::vector<std::uint8_t>(svg.begin(), svg.end()));
        written.push_back(name);
    }
    write_bytes(target / "summary.txt", std::vector<std::uint8_t>(summary.begin(), summary.end()));
    written.push_back("summary.txt");
    return written;
}

}  // namespace xmp
