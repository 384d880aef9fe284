#include <gtest/gtest.h>

#include "xmp/probe.hpp"

using namespace xmp;

namespace {

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

SAEWeights<double> random_sae(int d, int m, Rng& rng)
{
    SAEWeights<double> s(1, d, m);
    fill_normal(s.w_enc, rng, 1.0);
    fill_normal(s.b_enc, rng, 0.5);
    fill_normal(s.w_dec, rng, 1.0);
    fill_normal(s.b_dec, rng, 0.5);
    s.normalize_dictionary();
    return s;
}

FeatureDescription described(int f, std::vector<Concept> concepts)
{
    FeatureDescription d;
    d.feature = f;
    d.described = true;
    d.contexts = 50;
    for (Concept c : concepts)
        d.concepts.push_back({c, 1.0, 50});
    return d;
}

}  // namespace

TEST(Baseline, ExactPrefixAndConcatenation)
{
    MMExample ex;
    ex.answer = "a red circle";
    ex.instruction = "What is shown?";
    Tokens t = build_baseline(ex);
    ASSERT_FALSE(t.empty());
    EXPECT_EQ(t.front(), Tokenizer::kBos);
    const auto& tok = default_tokenizer();
    EXPECT_EQ(tok.detokenize(Tokens(t.begin() + 1, t.end())),
              "Consider the following information: a red circle What is shown?");
    const std::size_t expect = tok.tokenize("Consider the following information:").size() +
                               tok.tokenize(ex.answer).size() + tok.tokenize(ex.instruction).size() + 1;
    EXPECT_EQ(t.size(), expect);
    ex.answer.clear();
    EXPECT_THROW(build_baseline(ex), PreconditionError);
}

TEST(Baseline, EveryExampleStartsWithThePrefix)
{
    const auto& tok = default_tokenizer();
    for (const auto& r : mm_records(300, 5, 0.4, false)) {
        auto ex = example_from_record(r);
        Tokens t = build_baseline(ex);
        const std::string s = tok.detokenize(Tokens(t.begin() + 1, t.end()));
        EXPECT_EQ(s.rfind(kBaselinePrefix, 0), 0u) << s;
    }
}

TEST(Metrics, MatchBruteForceOnSmallInstances)
{
    Rng rng(1);
    for (int trial = 0; trial < 300; ++trial) {
        const int d = 2 + static_cast<int>(uniform_index(rng, 6));
        const int m = d + 1 + static_cast<int>(uniform_index(rng, 10));
        const int n = 1 + static_cast<int>(uniform_index(rng, 10));
        auto s = random_sae(d, m, rng);
        MatD v(n, d);
        fill_normal(v, rng, 1.5);
        EXPECT_NEAR(recon_error(v, s), naive_recon(v, s), 1e-9);
        EXPECT_NEAR(sparsity(v, s), naive_sparsity(v, s), 1e-12);
    }
}

TEST(Metrics, PerfectReconstructionAndExtremeSparsity)
{
    const int d = 5;
    SAEWeights<double> s(1, d, 2 * d);
    s.w_enc << MatD::Identity(d, d), -MatD::Identity(d, d);
    s.w_dec << MatD::Identity(d, d), -MatD::Identity(d, d);
    Rng rng(2);
    MatD v(7, d);
    fill_normal(v, rng, 1.0);
    EXPECT_NEAR(recon_error(v, s), 0.0, 1e-24);
    s.b_enc.setConstant(-1e6);
    EXPECT_EQ(sparsity(v, s), 0.0);
    s.b_enc.setConstant(1e6);
    EXPECT_EQ(sparsity(v, s), 1.0);
    EXPECT_THROW(recon_error(MatD(0, d), s), PreconditionError);
    EXPECT_THROW(sparsity(MatD(0, d), s), PreconditionError);
}

TEST(Filter, StrictBoundaries)
{
    // 100 images; feature 0 active on exactly 5, feature 1 on 6, feature 2 on
    // all, feature 3 never.
    MatF stats = MatF::Zero(100, 6);
    for (int r = 0; r < 5; ++r)
        stats(r, 0) = 1.0f;
    for (int r = 0; r < 6; ++r)
        stats(r, 1) = 1.0f;
    stats.col(2).setConstant(0.5f);
    auto img = image_frequencies(stats);
    EXPECT_EQ(img[0], 0.05);
    std::vector<double> corpus = {0.0, 0.0, 0.0, 0.0, 0.005, 0.00500001};
    auto mask = filter_features(img, corpus);
    EXPECT_TRUE(mask.keep[0]);
    EXPECT_FALSE(mask.keep[1]);
    EXPECT_FALSE(mask.keep[2]);
    EXPECT_TRUE(mask.keep[3]);
    EXPECT_TRUE(mask.keep[4]);
    EXPECT_FALSE(mask.keep[5]);
    EXPECT_EQ(mask.kept(), 3);
}

TEST(Filter, ActivationThresholdIsConfigurable)
{
    MatF stats = MatF::Zero(10, 1);
    stats(0, 0) = 0.2f;
    stats(1, 0) = 0.05f;
    EXPECT_DOUBLE_EQ(image_frequencies(stats, 0.0)[0], 0.2);
    EXPECT_DOUBLE_EQ(image_frequencies(stats, 0.1)[0], 0.1);
}

TEST(TopK, OrderingTiesAndMask)
{
    FeatureFilterMask all;
    all.keep.assign(6, true);
    RowVecF s(6);
    s << 0.5f, 2.0f, 0.0f, 2.0f, 1.0f, 0.25f;
    EXPECT_EQ(top_k_features(s, all, 3), (std::vector<int>{1, 3, 4}));
    EXPECT_EQ(top_k_features(s, all, 10), (std::vector<int>{1, 3, 4, 0, 5}));
    auto masked = all;
    masked.keep[1] = false;
    EXPECT_EQ(top_k_features(s, masked, 3), (std::vector<int>{3, 4, 0}));
    RowVecF one = RowVecF::Zero(6);
    one(2) = 0.1f;
    EXPECT_EQ(top_k_features(one, all, 3), (std::vector<int>{2}));
}

TEST(Alignment, PlantedAndUndescribed)
{
    const Concept red = color_concept(Color::Red);
    std::vector<FeatureDescription> descs(4);
    for (int f = 0; f < 4; ++f)
        descs[static_cast<std::size_t>(f)].feature = f;
    descs[1] = described(1, {red});
    FeatureFilterMask all;
    all.keep.assign(4, true);
    // Every image contains something red; feature 1 fires strongest.
    std::vector<ConceptSet> concepts;
    MatF stats = MatF::Zero(20, 4);
    for (int e = 0; e < 20; ++e) {
        Grid g{};
        g[static_cast<std::size_t>(e % 9)] = {Shape::Circle, Color::Red};
        concepts.push_back(concepts_of(g));
        stats(e, 1) = 3.0f;
        stats(e, 0) = 1.0f;
    }
    EXPECT_DOUBLE_EQ(alignment_rate(stats, all, descs, concepts), 1.0);
    std::vector<FeatureDescription> none(4);
    EXPECT_DOUBLE_EQ(alignment_rate(stats, all, none, concepts), 0.0);
    // A matching description outside the top k does not count.
    descs[1] = described(1, {color_concept(Color::Blue)});
    descs[0] = described(0, {red});
    EXPECT_DOUBLE_EQ(alignment_rate(stats, all, descs, concepts, 1), 0.0);
    EXPECT_DOUBLE_EQ(alignment_rate(stats, all, descs, concepts, 2), 1.0);
}

namespace {

MetricsReport planted_report(const std::vector<double>& rate, const std::vector<double>& e_vis,
                             const std::vector<double>& e_base)
{
    MetricsReport r;
    for (std::size_t i = 0; i < rate.size(); ++i) {
        LayerMetrics l;
        l.layer = static_cast<int>(i) + 1;
        l.groups[TokenGroup::VlmVisual].recon_error = e_vis[i];
        l.groups[TokenGroup::VlmText].recon_error = e_base[i];
        l.groups[TokenGroup::TextOnlyBaseline].recon_error = e_base[i];
        l.alignment[TokenGroup::VlmVisual] = rate[i];
        l.alignment[TokenGroup::TextOnlyBaseline] = 0.5;
        r.layers.push_back(l);
    }
    return r;
}

}  // namespace

TEST(Convergence, FlatZeroIsNone)
{
    auto r = planted_report(std::vector<double>(8, 0.0), std::vector<double>(8, 1.0), std::vector<double>(8, 1.0));
    EXPECT_FALSE(detect_convergence(r).has_value());
}

TEST(Convergence, PlantedCurves)
{
    // Rate reaches 0.9 * max at layer 5; error ratio drops to <= 1.5 at layer 6.
    auto r = planted_report({0.0, 0.1, 0.2, 0.4, 0.75, 0.8, 0.78, 0.8}, {9, 8, 7, 6, 5, 1.5, 1.2, 1.1},
                            std::vector<double>(8, 1.0));
    ASSERT_TRUE(detect_convergence(r).has_value());
    EXPECT_EQ(*detect_convergence(r), 6);
    // A late dip below the rate bar pushes l* past it.
    auto dip = planted_report({0.0, 0.1, 0.2, 0.4, 0.75, 0.8, 0.5, 0.8}, {9, 8, 7, 6, 5, 1.5, 1.2, 1.1},
                              std::vector<double>(8, 1.0));
    EXPECT_EQ(*detect_convergence(dip), 8);
    // Criteria are configurable.
    EXPECT_EQ(*detect_convergence(r, {0.9, 6.0}), 4 + 1);
}

TEST(Trends, SpearmanAndThirds)
{
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0);
    // Ties get average ranks: x ranks 1..5, y ranks 1, 2.5, 2.5, 4, 5.
    EXPECT_NEAR(spearman({1, 2, 3, 4, 5}, {1, 2, 2, 3, 4}), 0.9746794344808963, 1e-12);
    EXPECT_DOUBLE_EQ(spearman({1, 2, 3}, {5, 5, 5}), 0.0);

    auto r = planted_report({0.0, 0.1, 0.2, 0.4, 0.75, 0.8, 0.78, 0.8}, {9, 8, 7, 6, 5, 1.5, 1.2, 1.1},
                            std::vector<double>(8, 1.0));
    auto t = trend_stats(r);
    EXPECT_EQ(t.n_layers, 8);
    EXPECT_NEAR(t.first_third_alignment, 0.1, 1e-12);
    EXPECT_NEAR(t.last_third_alignment, (0.8 + 0.78 + 0.8) / 3, 1e-12);
    EXPECT_NEAR(t.first_third_error_ratio, 8.0, 1e-12);
    EXPECT_NEAR(t.last_third_error_ratio, (1.5 + 1.2 + 1.1) / 3, 1e-12);
    EXPECT_EQ(t.convergence_layer, detect_convergence(r));
    EXPECT_GT(t.spearman_rho, 0.9);
}

TEST(Report, JsonAndCsvRoundTrip)
{
    auto r = planted_report({0.0, 0.5}, {2, 1}, {1, 1});
    r.layers[0].kept_features[TokenGroup::VlmVisual] = 17;
    r.config = ProbeConfig{}.to_json();
    r.convergence_layer = 2;
    r.n_rs_examples = 3;
    auto back = MetricsReport::from_json(r.to_json());
    EXPECT_EQ(back.to_json().dump(), r.to_json().dump());
    EXPECT_EQ(back.convergence_layer, std::optional<int>(2));
    const std::string csv = r.to_csv();
    EXPECT_EQ(csv.rfind("layer,group,metric,value\n", 0), 0u);
    // 2 layers x 3 groups x 4 metrics + 2 x 2 alignment + 1 kept count.
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 24 + 4 + 1);
}

namespace {

struct Models {
    LMWeights<float> lm;
    ViTWeights<float> vit;
    AdapterWeights<float> adapter;
    std::map<int, SAEWeights<float>> saes;
    std::map<int, std::vector<FeatureDescription>> descs;

    Models()
    {
        LMConfig c;
        c.d_model = 16;
        c.n_heads = 2;
        c.d_ff = 32;
        c.n_layers = 3;
        c.vocab_size = default_tokenizer().vocab_size();
        lm = LMWeights<float>(c);
        ViTConfig v;
        v.d_vis = 8;
        v.n_heads = 2;
        v.d_ff = 16;
        v.n_layers = 1;
        vit = ViTWeights<float>(v);
        Rng rng(3);
        lm.init(rng);
        vit.init(rng);
        adapter = random_adapter(lm, vit, 4);
        for (int l : {1, 3}) {
            SAEWeights<float> s(l, 16, 40);
            fill_normal(s.w_enc, rng, 0.5);
            fill_normal(s.w_dec, rng, 1.0);
            fill_normal(s.b_enc, rng, 0.2);
            s.normalize_dictionary();
            saes[l] = s;
            std::vector<FeatureDescription> d(40);
            for (int f = 0; f < 40; ++f) {
                d[static_cast<std::size_t>(f)] = described(f, {static_cast<Concept>(f % kNumConcepts)});
                d[static_cast<std::size_t>(f)].frequency = f % 3 == 0 ? 0.01 : 0.001;
            }
            descs[l] = d;
        }
    }

    ProbeModels probe_models() const { return {&lm, &vit, &adapter, saes, descs}; }
};

std::vector<MMExample> qa_examples(int n)
{
    std::vector<MMExample> out;
    for (const auto& r : mm_records(static_cast<std::size_t>(n), 7, 0.4, false))
        out.push_back(example_from_record(r));
    return out;
}

}  // namespace

TEST(RunProbe, SingleExampleSingleLayerShape)
{
    Models m;
    auto pm = m.probe_models();
    pm.saes.erase(3);
    pm.descriptions.erase(3);
    auto ex = qa_examples(1);
    auto rep = run_probe(pm, ex, ProbeConfig{});
    ASSERT_EQ(rep.layers.size(), 1u);
    const auto& l = rep.layers[0];
    EXPECT_EQ(l.layer, 1);
    EXPECT_EQ(l.groups.size(), 3u);
    ASSERT_EQ(l.alignment.size(), 2u);
    EXPECT_EQ(l.alignment.count(TokenGroup::VlmText), 0u);
    EXPECT_EQ(rep.n_rs_examples, 1);
    EXPECT_EQ(rep.n_align_examples, 1);
    // BOS never contributes; the groups partition the remaining positions.
    const auto text = format_vlm_text(ex[0].instruction, ex[0].answer).tokens;
    EXPECT_EQ(l.groups.at(TokenGroup::VlmVisual).positions, 9);
    EXPECT_EQ(l.groups.at(TokenGroup::VlmText).positions, static_cast<long>(text.size()));
    EXPECT_EQ(l.groups.at(TokenGroup::TextOnlyBaseline).positions,
              static_cast<long>(build_baseline(ex[0]).size()) - 1);
}

TEST(RunProbe, ReplayFromDumpsAndDeterminism)
{
    Models m;
    auto ex = qa_examples(12);
    ProbeConfig cfg;
    cfg.n_rs = 10;
    cfg.n_align = 12;
    ProbeActivations acts;
    auto rep = run_probe(m.probe_models(), ex, cfg, &acts);
    EXPECT_EQ(rep.n_rs_examples, 10);
    EXPECT_EQ(rep.n_align_examples, 12);
    for (int l : {1, 3}) {
        const auto& sae = m.saes.at(l);
        auto path = std::filesystem::temp_directory_path() / ("xmp_probe_vlm_" + std::to_string(l) + ".bin");
        save_activation_dump(path, acts.vlm.at(l));
        auto dump = load_activation_dump(path);
        MatF vis = group_rows(dump, PositionGroup::Visual, 10);
        EXPECT_EQ(vis.rows(), 90);
        EXPECT_DOUBLE_EQ(rep.at(l).groups.at(TokenGroup::VlmVisual).recon_error, recon_error(vis, sae));
        EXPECT_DOUBLE_EQ(rep.at(l).groups.at(TokenGroup::VlmVisual).sparsity, sparsity(vis, sae));
        MatF base = group_rows(acts.baseline.at(l), PositionGroup::Text, 10);
        EXPECT_DOUBLE_EQ(rep.at(l).groups.at(TokenGroup::TextOnlyBaseline).recon_error, recon_error(base, sae));
        for (const auto& [g, r] : rep.at(l).alignment) {
            EXPECT_GE(r, 0.0);
            EXPECT_LE(r, 1.0);
        }
    }
    auto again = run_probe(m.probe_models(), ex, cfg);
    EXPECT_EQ(again.to_json().dump(), rep.to_json().dump());
}

TEST(RunProbe, LayerMismatchAndMissingInputsFail)
{
    Models m;
    auto pm = m.probe_models();
    pm.saes[1].layer = 2;
    auto ex = qa_examples(2);
    EXPECT_THROW(run_probe(pm, ex, ProbeConfig{}), PreconditionError);
    auto pm2 = m.probe_models();
    pm2.descriptions.erase(3);
    EXPECT_THROW(run_probe(pm2, ex, ProbeConfig{}), PreconditionError);
    auto pm3 = m.probe_models();
    pm3.adapter = nullptr;
    EXPECT_THROW(run_probe(pm3, ex, ProbeConfig{}), PreconditionError);
}
