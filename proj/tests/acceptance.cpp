// Acceptance suite: one line per criterion, exit status 1 if any fails.
//
// Criteria 1, 3, 7 and 8 run on small synthetic instances. The rest read a
// full pipeline run at the given configuration (default: the built-in toy
// configuration), which is executed or reused from the cache first.
// Criterion 9 runs the pipeline a second time into a fresh directory.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "support/gradcheck.hpp"
#include "xmp/pipeline.hpp"
#include "xmp/tensor_io.hpp"

using namespace xmp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4)
{
    std::ostringstream os;
    os << std::setprecision(precision) << v;
    return os.str();
}

nlohmann::json read_json(const fs::path& p)
{
    std::ifstream in(p);
    if (!in)
        throw Error("cannot read " + p.string());
    return nlohmann::json::parse(in);
}

// ---- criterion 1 ----------------------------------------------------------

double naive_recon(const MatD& v, const SAEWeights<double>& s)
{
    double total = 0;
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        std::vector<double> f(static_cast<std::size_t>(s.d_sae));
        for (int j = 0; j < s.d_sae; ++j) {
            double a = s.b_enc(0, j);
            for (int i = 0; i < s.d_model; ++i)
                a += (v(r, i) - s.b_dec(0, i)) * s.w_enc(i, j);
            f[static_cast<std::size_t>(j)] = a > 0 ? a : 0;
        }
        for (int i = 0; i < s.d_model; ++i) {
            double x = s.b_dec(0, i);
            for (int j = 0; j < s.d_sae; ++j)
                x += f[static_cast<std::size_t>(j)] * s.w_dec(j, i);
            total += (v(r, i) - x) * (v(r, i) - x);
        }
    }
    return total / static_cast<double>(v.rows());
}

double naive_sparsity(const MatD& v, const SAEWeights<double>& s)
{
    long active = 0;
    for (Eigen::Index r = 0; r < v.rows(); ++r)
        for (int j = 0; j < s.d_sae; ++j) {
            double a = s.b_enc(0, j);
            for (int i = 0; i < s.d_model; ++i)
                a += (v(r, i) - s.b_dec(0, i)) * s.w_enc(i, j);
            if (a > 0)
                ++active;
        }
    return static_cast<double>(active) / static_cast<double>(s.d_sae) / static_cast<double>(v.rows());
}

Outcome criterion_equations()
{
    const auto t0 = Clock::now();
    Rng rng(2024);
    double worst = 0;
    const int n_instances = 1000;
    for (int trial = 0; trial < n_instances; ++trial) {
        const int d = 2 + static_cast<int>(uniform_index(rng, 7));
        const int m = d + 1 + static_cast<int>(uniform_index(rng, 12));
        const int n = 1 + static_cast<int>(uniform_index(rng, 12));
        SAEWeights<double> s(1, d, m);
        fill_normal(s.w_enc, rng, 1.0);
        fill_normal(s.b_enc, rng, 0.5);
        fill_normal(s.w_dec, rng, 1.0);
        fill_normal(s.b_dec, rng, 0.5);
        s.normalize_dictionary();
        MatD v(n, d);
        fill_normal(v, rng, 1.5);
        worst = std::max({worst, std::abs(recon_error(v, s) - naive_recon(v, s)),
                          std::abs(sparsity(v, s) - naive_sparsity(v, s))});
    }
    const double t = seconds_since(t0);
    return {worst <= 1e-6 && t < 10.0,
            std::to_string(n_instances) + " instances, max abs error " + fmt(worst) + ", " + fmt(t, 3) + " s"};
}

// ---- criterion 3 ----------------------------------------------------------

struct GradOutcome {
    std::string name;
    test::GradCheckResult result;
};

GradOutcome grad_lm()
{
    LMConfig c;
    c.vocab_size = default_tokenizer().vocab_size();
    c.d_model = 16;
    c.n_heads = 2;
    c.d_ff = 32;
    c.n_layers = 2;
    c.max_context = 64;
    LMWeights<double> w(c);
    Rng rng(31);
    w.init(rng);
    for (auto& [name, t] : w.tensors())
        if (name.find("ln") == std::string::npos)
            *t *= 5.0;
    const auto& tok = default_tokenizer();
    std::vector<Tokens> docs = {wrap_document(tok.tokenize("a red circle at center.")),
                                wrap_document(tok.tokenize("What color is the star? <sep> blue"))};
    LMWeights<double> g(c);
    zero_tensors(g.tensors());
    lm_batch_loss(w, docs, &g);
    return {"lm", test::check_gradients(w.tensors(), g.tensors(),
                                        [&] { return lm_batch_loss<double>(w, docs, nullptr); }, 16, 32)};
}

GradOutcome grad_vit()
{
    ContrastiveModel<double> m(ViTConfig{}, default_tokenizer().vocab_size(), 72, 0.07);
    Rng rng(41);
    m.vit.init(rng);
    m.text.init(rng);
    for (auto& [name, t] : m.tensors())
        if (name.find("ln") == std::string::npos && name != "log_scale" && name != "patch_w")
            *t *= 5.0;
    auto pairs = contrastive_pairs(4, 42, 0.5);
    std::vector<const ContrastivePair*> batch;
    for (auto& p : pairs)
        batch.push_back(&p);
    ContrastiveModel<double> g = m;
    zero_tensors(g.tensors());
    contrastive_loss(m, batch, &g);
    return {"vit-contrastive",
            test::check_gradients(m.tensors(), g.tensors(),
                                  [&] { return contrastive_loss<double>(m, batch, nullptr); }, 16, 43)};
}

GradOutcome grad_sae()
{
    Rng rng(51);
    SAEWeights<double> s(3, 10, 24);
    fill_normal(s.w_enc, rng, 0.5);
    fill_normal(s.b_enc, rng, 0.3);
    fill_normal(s.w_dec, rng, 1.0);
    fill_normal(s.b_dec, rng, 0.5);
    s.normalize_dictionary();
    s.input_scale = 1.7;
    MatD x(16, 10);
    fill_normal(x, rng, 1.0);
    const double l1 = 3e-3;
    SAEWeights<double> g(3, 10, 24);
    sae_objective(s, x, l1, &g);
    return {"sae", test::check_gradients(s.tensors(), g.tensors(),
                                         [&] { return sae_objective<double>(s, x, l1, nullptr); }, 16, 52)};
}

GradOutcome grad_adapter()
{
    LMConfig lc;
    lc.vocab_size = default_tokenizer().vocab_size();
    lc.d_model = 16;
    lc.n_heads = 2;
    lc.d_ff = 32;
    lc.n_layers = 2;
    lc.max_context = 64;
    ViTConfig vc;
    vc.d_vis = 12;
    vc.n_heads = 2;
    vc.d_ff = 24;
    vc.n_layers = 1;
    LMWeights<double> lm(lc);
    ViTWeights<double> vit(vc);
    Rng rng(61);
    lm.init(rng);
    vit.init(rng);
    auto a = random_adapter(lm.cast<float>(), vit.cast<float>(), 62).cast<double>();
    std::vector<MatD> patches;
    std::vector<VLMText> texts;
    for (int i = 0; i < 3; ++i) {
        auto ex = make_qa_example(static_cast<std::uint64_t>(600 + i), 0.3, static_cast<std::uint64_t>(i));
        patches.push_back(vit_forward(vit, ex.image.pixels).rows);
        texts.push_back(format_vlm_text(ex.instruction, ex.answer));
    }
    auto loss = [&](AdapterWeights<double>* g) {
        double l = 0;
        for (std::size_t i = 0; i < patches.size(); ++i)
            l += vlm_example_loss(lm, patches[i], texts[i], a, g);
        return l;
    };
    AdapterWeights<double> g(a.d_vis, a.d_model);
    loss(&g);
    return {"adapter", test::check_gradients(a.tensors(), g.tensors(), [&] { return loss(nullptr); }, 16, 63)};
}

Outcome criterion_gradients()
{
    const auto t0 = Clock::now();
    bool ok = true;
    std::string detail;
    for (const auto& fn : {grad_lm, grad_vit, grad_sae, grad_adapter}) {
        const auto r = fn();
        ok = ok && r.result.samples.size() >= 10 && r.result.max_rel_error < 1e-4;
        detail += r.name + " " + fmt(r.result.max_rel_error, 2) + " (" + std::to_string(r.result.samples.size()) +
                  "), ";
    }
    const double t = seconds_since(t0);
    ok = ok && t < 60.0;
    return {ok, "max rel error " + detail + fmt(t, 3) + " s"};
}

// ---- criterion 7 ----------------------------------------------------------

Outcome criterion_filter()
{
    // Counts over 100 images and 1000 corpus tokens put frequencies exactly on,
    // just below and just above the two boundaries.
    Rng rng(77);
    const int n_images = 100, n_tokens = 1000, n_features = 64;
    long checked = 0, wrong = 0, boundary_kept = 0;
    for (int trial = 0; trial < 200; ++trial) {
        MatF stats = MatF::Zero(n_images, n_features);
        std::vector<int> image_count(n_features);
        std::vector<double> corpus(n_features);
        for (int f = 0; f < n_features; ++f) {
            const int ic = static_cast<int>(uniform_index(rng, 3)) + 4;   // 4, 5 or 6 images
            const int cc = static_cast<int>(uniform_index(rng, 3)) + 4;   // 4, 5 or 6 tokens
            image_count[static_cast<std::size_t>(f)] = ic;
            for (int r = 0; r < ic; ++r)
                stats((f * 7 + r * 13) % n_images, f) = 0.5f + static_cast<float>(uniform01(rng));
            corpus[static_cast<std::size_t>(f)] = static_cast<double>(cc) / n_tokens;
        }
        const auto img = image_frequencies(stats);
        const auto mask = filter_features(img, corpus);
        for (int f = 0; f < n_features; ++f) {
            const auto fi = static_cast<std::size_t>(f);
            const bool expect = image_count[fi] * 20 <= n_images && corpus[fi] * n_tokens <= 5.0 + 1e-9;
            ++checked;
            wrong += mask.keep[fi] != expect;
            boundary_kept += expect && (image_count[fi] == 5 || std::lround(corpus[fi] * n_tokens) == 5);
        }
    }
    const auto exact = filter_features({0.05, 0.05, 0.0, 0.05000001}, {0.005, 0.0, 0.00500001, 0.0});
    const bool exact_ok = exact.keep == std::vector<bool>{true, true, false, false};
    return {wrong == 0 && exact_ok && boundary_kept > 0,
            std::to_string(checked) + " planted features, " + std::to_string(wrong) + " mismatches, " +
                std::to_string(boundary_kept) + " boundary-equal kept"};
}

// ---- criterion 8 ----------------------------------------------------------

Outcome criterion_baseline_prompt()
{
    const std::string prefix = "Consider the following information: ";
    const auto& tok = default_tokenizer();
    int n = 0, bad = 0;
    for (const auto& r : mm_records(1000, 808, 0.4, false)) {
        Tokens t = build_baseline(example_from_record(r));
        const bool bos = !t.empty() && t.front() == Tokenizer::kBos;
        const std::string s = bos ? tok.detokenize(Tokens(t.begin() + 1, t.end())) : std::string();
        ++n;
        bad += !bos || s.compare(0, prefix.size(), prefix) != 0;
    }
    return {n == 1000 && bad == 0, std::to_string(n) + " examples, " + std::to_string(bad) + " without the prefix"};
}

// ---- pipeline-backed criteria --------------------------------------------

Outcome criterion_frozen(const fs::path& dir)
{
    const auto v = verify_artifacts(dir);
    const auto m = read_manifest(dir, "train-adapter");
    if (!m || !m->extra.contains("frozen"))
        return {false, "no frozen record in the train-adapter manifest"};
    bool same = true;
    std::string detail;
    for (const auto& [path, rec] : m->extra["frozen"].items()) {
        const bool eq = rec.at("before") == rec.at("after") && rec.at("after") == sha256_file(dir / path);
        same = same && eq;
        detail += path + (eq ? " identical, " : " CHANGED, ");
    }
    detail += "verify " + std::string(v.ok ? "pass" : "fail");
    for (const auto& f : v.failures)
        detail += "; " + f;
    return {same && v.ok && m->extra["frozen"].size() == 2, detail};
}

Outcome criterion_sae(const fs::path& dir)
{
    const auto j = read_json(dir / "saes/sae_train.json");
    const auto m = read_manifest(dir, "train-saes");
    bool ok = true;
    double worst_fvu = 0, worst_l0 = 0;
    int n = 0;
    for (const auto& layer : j.at("layers")) {
        const double fvu = layer.at("heldout_fvu").get<double>();
        const double l0 = layer.at("heldout_l0_fraction").get<double>();
        ok = ok && fvu <= 0.15 && l0 <= 0.05;
        worst_fvu = std::max(worst_fvu, fvu);
        worst_l0 = std::max(worst_l0, l0);
        ++n;
    }
    const double t = m ? m->wall_time_s : 1e9;
    ok = ok && n > 0 && t < 600.0;
    return {ok, std::to_string(n) + " layers, worst FVU " + fmt(worst_fvu) + ", worst l0/d_sae " + fmt(worst_l0) +
                    ", training " + fmt(t, 4) + " s"};
}

Outcome criterion_control(const fs::path& dir)
{
    const auto r = MetricsReport::from_json(read_json(dir / "probe/control/metrics.json"));
    bool ok = !r.layers.empty();
    std::string bad;
    double max_rate = 0;
    for (const auto& l : r.layers) {
        const double ev = l.groups.at(TokenGroup::VlmVisual).recon_error;
        const double eb = l.groups.at(TokenGroup::TextOnlyBaseline).recon_error;
        const double rate = l.alignment.at(TokenGroup::VlmVisual);
        max_rate = std::max(max_rate, rate);
        if (!(ev > eb) || !(rate < 0.15)) {
            ok = false;
            bad += " L" + std::to_string(l.layer);
        }
    }
    return {ok, "max alignment " + fmt(max_rate) + (bad.empty() ? ", visual E above baseline at every layer"
                                                                 : ", violations at" + bad)};
}

Outcome criterion_trends(const fs::path& dir, const ConvergenceCriteria& convergence)
{
    const auto r = MetricsReport::from_json(read_json(dir / "probe/metrics.json"));
    const auto t = trend_stats(r, convergence);
    const bool a = t.last_third_alignment - t.first_third_alignment >= 0.25;
    const bool b = t.spearman_rho > 0.6;
    const bool c = t.last_third_error_ratio < t.first_third_error_ratio;
    const bool d = t.convergence_layer && *t.convergence_layer > t.n_layers / 2;
    double total = 0;
    for (const auto& s : stage_names())
        if (const auto m = read_manifest(dir, s))
            total += m->wall_time_s;
    std::ostringstream os;
    os << "(a) " << (a ? "ok" : "no") << " first/last third alignment " << fmt(t.first_third_alignment) << "/"
       << fmt(t.last_third_alignment) << "; (b) " << (b ? "ok" : "no") << " rho " << fmt(t.spearman_rho) << "; (c) "
       << (c ? "ok" : "no") << " E ratio " << fmt(t.first_third_error_ratio) << "/" << fmt(t.last_third_error_ratio)
       << "; (d) " << (d ? "ok" : "no") << " convergence "
       << (t.convergence_layer ? std::to_string(*t.convergence_layer) : std::string("none")) << "/" << t.n_layers
       << "; pipeline " << fmt(total / 60.0, 3) << " min";
    return {a && b && c && d, os.str()};
}

Outcome criterion_determinism(const PipelineConfig& cfg, const fs::path& dir, const fs::path& twin)
{
    fs::remove_all(twin);
    PipelineConfig c = cfg;
    c.artifacts = twin;
    Pipeline(c).run_all(true);
    bool ok = true;
    std::string detail;
    for (const char* rel : {"probe/metrics.json", "probe/control/metrics.json"}) {
        const bool eq = read_bytes(dir / rel) == read_bytes(twin / rel);
        ok = ok && eq;
        detail += std::string(rel) + (eq ? " identical (" + sha256_file(dir / rel).substr(0, 12) + "), " : " DIFFERS, ");
    }
    fs::remove_all(twin);
    return {ok, detail + "fresh second run"};
}

Outcome criterion_vlm(const fs::path& dir)
{
    const auto j = read_json(dir / "models/adapter_train.json");
    const double trained = j.at("qa_exact_match_trained").get<double>();
    const double random = j.at("qa_exact_match_random").get<double>();
    return {trained - random >= 0.30,
            "exact match trained " + fmt(trained) + " vs random " + fmt(random) + ", gap " +
                fmt(100 * (trained - random), 3) + " points"};
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"acceptance criteria"};
    fs::path artifacts = "acceptance_artifacts";
    fs::path config;
    bool skip_pipeline = false;
    app.add_option("--artifacts", artifacts, "pipeline artifact directory (reused when current)");
    app.add_option("--config", config, "pipeline configuration (default: built-in)")->check(CLI::ExistingFile);
    app.add_flag("--skip-pipeline", skip_pipeline, "run only the criteria that need no pipeline");
    CLI11_PARSE(app, argc, argv);

    PipelineConfig cfg = config.empty() ? PipelineConfig() : PipelineConfig::load(config);
    cfg.artifacts = artifacts;

    std::map<int, std::pair<std::string, std::function<Outcome()>>> criteria = {
        {1, {"equation faithfulness", criterion_equations}},
        {3, {"gradient checks", criterion_gradients}},
        {7, {"filter threshold fidelity", criterion_filter}},
        {8, {"baseline prompt fidelity", criterion_baseline_prompt}},
    };
    std::string pipeline_error;
    if (!skip_pipeline) {
        try {
            Pipeline p(cfg, [](const std::string& s) { std::cerr << s << std::endl; });
            p.run_all();
        } catch (const std::exception& e) {
            pipeline_error = e.what();
        }
        const auto guarded = [&](std::function<Outcome()> fn) {
            return [fn, &pipeline_error]() -> Outcome {
                if (!pipeline_error.empty())
                    return {false, "pipeline failed: " + pipeline_error};
                return fn();
            };
        };
        criteria[2] = {"frozen backbones", guarded([&] { return criterion_frozen(artifacts); })};
        criteria[4] = {"SAE quality gates", guarded([&] { return criterion_sae(artifacts); })};
        criteria[5] = {"random-adapter control", guarded([&] { return criterion_control(artifacts); })};
        criteria[6] = {"post-training trends", guarded([&] { return criterion_trends(artifacts, cfg.probe.convergence); })};
        criteria[9] = {"determinism", guarded([&] {
                           return criterion_determinism(cfg, artifacts, artifacts.string() + "_twin");
                       })};
        criteria[10] = {"VLM functionality", guarded([&] { return criterion_vlm(artifacts); })};
    }

    int failed = 0;
    for (const auto& [n, c] : criteria) {
        Outcome o;
        try {
            o = c.second();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << "criterion " << std::setw(2) << n << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.first << ": "
                  << o.detail << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed"))
              << std::endl;
    return failed ? 1 : 0;
}
