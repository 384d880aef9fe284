#include <gtest/gtest.h>

#include <fstream>
#include <regex>

#include "xmp/report.hpp"

using namespace xmp;

namespace {

MetricsReport planted()
{
    MetricsReport r;
    r.config = ProbeConfig{}.to_json();
    const double rate[] = {0.0, 0.05, 0.1, 0.3, 0.6, 0.7, 0.72, 0.7};
    for (int i = 0; i < 8; ++i) {
        LayerMetrics l;
        l.layer = i + 1;
        l.groups[TokenGroup::VlmVisual] = {40.0 - 5.5 * i, 0.2 - 0.01 * i, 0.5, 90};
        l.groups[TokenGroup::VlmText] = {2.0 + 0.3 * i, 0.05, 0.1, 120};
        l.groups[TokenGroup::TextOnlyBaseline] = {1.5 + 0.5 * i, 0.04 + 0.001 * i, 0.05, 200};
        l.alignment[TokenGroup::VlmVisual] = rate[i];
        l.alignment[TokenGroup::TextOnlyBaseline] = 0.4 + 0.01 * i;
        r.layers.push_back(l);
    }
    r.convergence_layer = detect_convergence(r);
    return r;
}

// Parses every polyline and maps its points back to data coordinates.
std::map<std::string, std::vector<std::pair<double, double>>> parse_back(const std::string& svg, const ChartFrame& f)
{
    std::map<std::string, std::vector<std::pair<double, double>>> out;
    std::regex poly("<polyline data-series=\"([^\"]+)\"[^>]*points=\"([^\"]+)\"");
    for (auto it = std::sregex_iterator(svg.begin(), svg.end(), poly); it != std::sregex_iterator(); ++it) {
        std::istringstream pts((*it)[2].str());
        std::string p;
        while (pts >> p) {
            const auto comma = p.find(',');
            const double px = std::stod(p.substr(0, comma));
            const double py = std::stod(p.substr(comma + 1));
            const double x = f.x0 + (px - f.left) / (f.right - f.left) * (f.x1 - f.x0);
            const double y = f.y0 + (f.bottom - py) / (f.bottom - f.top) * (f.y1 - f.y0);
            out[(*it)[1].str()].emplace_back(x, y);
        }
    }
    return out;
}

}  // namespace

TEST(Report, PolylinesMatchMetricsUnderAxisMapping)
{
    const auto r = planted();
    const auto plots = report_plots(r);
    ASSERT_EQ(plots.size(), 3u);

    // Declared frame for the error chart: x in [1, 8], y in [0, 1.05 * max].
    ChartFrame fe;
    fe.x0 = 1;
    fe.x1 = 8;
    fe.y1 = 40.0 * 1.05;
    auto e = parse_back(plots[0].second, fe);
    ASSERT_EQ(e.size(), 3u);
    for (const auto g : kAllGroups) {
        const auto& pts = e.at(group_name(g));
        ASSERT_EQ(pts.size(), 8u);
        for (int i = 0; i < 8; ++i) {
            EXPECT_NEAR(pts[static_cast<std::size_t>(i)].first, i + 1, 1e-2);
            EXPECT_NEAR(pts[static_cast<std::size_t>(i)].second, r.layers[static_cast<std::size_t>(i)].groups.at(g).recon_error,
                        0.05);
        }
    }
    ChartFrame fa;
    fa.x0 = 1;
    fa.x1 = 8;
    fa.y1 = 1.0;
    auto a = parse_back(plots[2].second, fa);
    ASSERT_EQ(a.size(), 2u);
    EXPECT_EQ(a.count("vlm_text"), 0u);
    for (int i = 0; i < 8; ++i)
        EXPECT_NEAR(a.at("vlm_visual")[static_cast<std::size_t>(i)].second,
                    r.layers[static_cast<std::size_t>(i)].alignment.at(TokenGroup::VlmVisual), 1e-3);
}

TEST(Report, SummaryCarriesConvergenceAndTrendStatistics)
{
    const auto r = planted();
    const std::string s = summary_text(r);
    ASSERT_TRUE(r.convergence_layer.has_value());
    EXPECT_NE(s.find("convergence layer: " + std::to_string(*detect_convergence(r))), std::string::npos) << s;
    EXPECT_NE(s.find("spearman rho"), std::string::npos);
    EXPECT_NE(s.find("first third"), std::string::npos);
}

TEST(Report, WritesFilesAndRefusesEmptyReports)
{
    auto dir = std::filesystem::temp_directory_path() / "xmp_report_test";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    MetricsReport empty;
    empty.config = ProbeConfig{}.to_json();
    std::ofstream(dir / "metrics.json") << empty.to_json().dump();
    EXPECT_THROW(write_report(dir), PreconditionError);
    EXPECT_FALSE(std::filesystem::exists(dir / "recon_error.svg"));
    EXPECT_FALSE(std::filesystem::exists(dir / "summary.txt"));

    std::ofstream(dir / "metrics.json", std::ios::trunc) << planted().to_json().dump();
    write_report(dir);
    for (const char* f : {"recon_error.svg", "sparsity.svg", "alignment.svg", "summary.txt"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;

    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    EXPECT_THROW(write_report(dir), PreconditionError);
}
