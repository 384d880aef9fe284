#include "xmp/probe.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "xmp/tokenizer.hpp"

namespace xmp {

std::string group_name(TokenGroup g)
{
    switch (g) {
    case TokenGroup::VlmVisual:
        return "vlm_visual";
    case TokenGroup::VlmText:
        return "vlm_text";
    case TokenGroup::TextOnlyBaseline:
        return "text_only_baseline";
    }
    return "?";
}

TokenGroup group_from_name(const std::string& s)
{
    for (auto g : kAllGroups)
        if (group_name(g) == s)
            return g;
    throw FormatError("unknown token group '" + s + "'");
}

Tokens build_baseline(const MMExample& example)
{
    if (example.answer.empty())
        throw PreconditionError("build_baseline: empty answer");
    if (example.instruction.empty())
        throw PreconditionError("build_baseline: empty instruction");
    Tokens t{Tokenizer::kBos};
    Tokens body = default_tokenizer().tokenize(kBaselinePrefix + example.answer + " " + example.instruction);
    t.insert(t.end(), body.begin(), body.end());
    return t;
}

int FeatureFilterMask::kept() const
{
    return static_cast<int>(std::count(keep.begin(), keep.end(), true));
}

FeatureFilterMask filter_features(const std::vector<double>& image_freq, const std::vector<double>& corpus_freq,
                                  const FilterThresholds& t)
{
    if (image_freq.size() != corpus_freq.size())
        throw ShapeMismatch("filter_features: frequency tables differ in length");
    FeatureFilterMask m;
    m.thresholds = t;
    m.keep.resize(image_freq.size());
    for (std::size_t f = 0; f < image_freq.size(); ++f)
        m.keep[f] = !(image_freq[f] > t.image_freq_max || corpus_freq[f] > t.corpus_freq_max);
    return m;
}

std::vector<double> image_frequencies(const MatF& max_stats, double threshold)
{
    std::vector<double> out(static_cast<std::size_t>(max_stats.cols()), 0.0);
    if (max_stats.rows() == 0)
        return out;
    for (Eigen::Index f = 0; f < max_stats.cols(); ++f)
        out[static_cast<std::size_t>(f)] =
            static_cast<double>((max_stats.col(f).array() > static_cast<float>(threshold)).count()) /
            static_cast<double>(max_stats.rows());
    return out;
}

std::vector<int> top_k_features(const RowVecF& stats, const FeatureFilterMask& mask, int k)
{
    if (static_cast<std::size_t>(stats.size()) != mask.keep.size())
        throw ShapeMismatch("top_k_features: mask length does not match features");
    std::vector<int> cand;
    for (Eigen::Index f = 0; f < stats.size(); ++f)
        if (mask.keep[static_cast<std::size_t>(f)] && stats(f) > 0.0f)
            cand.push_back(static_cast<int>(f));
    const auto n = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(std::max(k, 0)));
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(n), cand.end(), [&](int a, int b) {
        return stats(a) != stats(b) ? stats(a) > stats(b) : a < b;
    });
    cand.resize(n);
    return cand;
}

bool features_match(const std::vector<int>& features, const std::vector<FeatureDescription>& descriptions,
                    const ConceptSet& concepts)
{
    for (int f : features) {
        const auto& d = descriptions.at(static_cast<std::size_t>(f));
        if (!d.described)
            continue;
        for (const auto& c : d.concepts)
            if (concepts.test(static_cast<std::size_t>(c.concept_id)))
                return true;
    }
    return false;
}

double alignment_rate(const MatF& stats, const FeatureFilterMask& mask,
                      const std::vector<FeatureDescription>& descriptions, const std::vector<ConceptSet>& concepts,
                      int k)
{
    if (static_cast<std::size_t>(stats.rows()) != concepts.size())
        throw ShapeMismatch("alignment_rate: one concept set per example required");
    if (stats.rows() == 0)
        return 0.0;
    int hits = 0;
    for (Eigen::Index e = 0; e < stats.rows(); ++e)
        if (features_match(top_k_features(stats.row(e), mask, k), descriptions,
                           concepts[static_cast<std::size_t>(e)]))
            ++hits;
    return static_cast<double>(hits) / static_cast<double>(stats.rows());
}

nlohmann::json ProbeConfig::to_json() const
{
    return {{"n_rs", n_rs},
            {"n_align", n_align},
            {"k", k},
            {"image_freq_max", thresholds.image_freq_max},
            {"corpus_freq_max", thresholds.corpus_freq_max},
            {"activation_threshold", activation_threshold},
            {"rank", rank == RankStat::Max ? "max" : "sum"},
            {"convergence_rate_fraction", convergence.rate_fraction},
            {"convergence_error_ratio", convergence.error_ratio}};
}

const LayerMetrics& MetricsReport::at(int layer) const
{
    for (const auto& l : layers)
        if (l.layer == layer)
            return l;
    throw PreconditionError("no metrics for layer " + std::to_string(layer));
}

nlohmann::json MetricsReport::to_json() const
{
    nlohmann::json j;
    j["config"] = config;
    j["n_rs_examples"] = n_rs_examples;
    j["n_align_examples"] = n_align_examples;
    j["adapter_checksum"] = adapter_checksum;
    j["convergence_layer"] = convergence_layer ? nlohmann::json(*convergence_layer) : nlohmann::json(nullptr);
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& l : layers) {
        nlohmann::json lj;
        lj["layer"] = l.layer;
        for (const auto& [g, m] : l.groups)
            lj["groups"][group_name(g)] = {{"recon_error", m.recon_error},
                                           {"sparsity", m.sparsity},
                                           {"fvu", m.fvu},
                                           {"positions", m.positions}};
        for (const auto& [g, r] : l.alignment)
            lj["alignment_rate"][group_name(g)] = r;
        for (const auto& [g, n] : l.kept_features)
            lj["kept_features"][group_name(g)] = n;
        arr.push_back(lj);
    }
    j["layers"] = arr;
    return j;
}

MetricsReport MetricsReport::from_json(const nlohmann::json& j)
{
    MetricsReport r;
    r.config = j.at("config");
    r.n_rs_examples = j.at("n_rs_examples");
    r.n_align_examples = j.at("n_align_examples");
    r.adapter_checksum = j.value("adapter_checksum", "");
    if (!j.at("convergence_layer").is_null())
        r.convergence_layer = j.at("convergence_layer").get<int>();
    for (const auto& lj : j.at("layers")) {
        LayerMetrics l;
        l.layer = lj.at("layer");
        if (lj.contains("groups"))
            for (const auto& [name, m] : lj.at("groups").items())
                l.groups[group_from_name(name)] = {m.at("recon_error"), m.at("sparsity"), m.at("fvu"),
                                                   m.at("positions")};
        if (lj.contains("alignment_rate"))
            for (const auto& [name, v] : lj.at("alignment_rate").items())
                l.alignment[group_from_name(name)] = v;
        if (lj.contains("kept_features"))
            for (const auto& [name, v] : lj.at("kept_features").items())
                l.kept_features[group_from_name(name)] = v;
        r.layers.push_back(l);
    }
    return r;
}

std::string MetricsReport::to_csv() const
{
    std::ostringstream os;
    os << std::setprecision(17);
    os << "layer,group,metric,value\n";
    for (const auto& l : layers) {
        for (const auto& [g, m] : l.groups) {
            os << l.layer << ',' << group_name(g) << ",recon_error," << m.recon_error << '\n';
            os << l.layer << ',' << group_name(g) << ",sparsity," << m.sparsity << '\n';
            os << l.layer << ',' << group_name(g) << ",fvu," << m.fvu << '\n';
            os << l.layer << ',' << group_name(g) << ",positions," << m.positions << '\n';
        }
        for (const auto& [g, r] : l.alignment)
            os << l.layer << ',' << group_name(g) << ",alignment_rate," << r << '\n';
        for (const auto& [g, n] : l.kept_features)
            os << l.layer << ',' << group_name(g) << ",kept_features," << n << '\n';
    }
    return os.str();
}

namespace {

double visual_rate(const LayerMetrics& l)
{
    auto it = l.alignment.find(TokenGroup::VlmVisual);
    return it == l.alignment.end() ? 0.0 : it->second;
}

double error_ratio(const LayerMetrics& l)
{
    const double base = l.groups.at(TokenGroup::TextOnlyBaseline).recon_error;
    const double vis = l.groups.at(TokenGroup::VlmVisual).recon_error;
    if (base <= 0.0)
        return vis <= 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return vis / base;
}

}  // namespace

std::optional<int> detect_convergence(const MetricsReport& report, const ConvergenceCriteria& c)
{
    double max_rate = 0.0;
    for (const auto& l : report.layers)
        max_rate = std::max(max_rate, visual_rate(l));
    if (max_rate <= 0.0)
        return std::nullopt;
    std::optional<int> best;
    for (auto it = report.layers.rbegin(); it != report.layers.rend(); ++it) {
        if (visual_rate(*it) >= c.rate_fraction * max_rate && error_ratio(*it) <= c.error_ratio)
            best = it->layer;
        else
            break;
    }
    return best;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v)
{
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]])
            ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y)
{
    if (x.size() != y.size() || x.size() < 2)
        throw PreconditionError("spearman: need two equal-length series of length >= 2");
    auto rx = average_ranks(x), ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0)
        return 0.0;  // a constant series carries no rank information
    return sxy / std::sqrt(sxx * syy);
}

TrendStats trend_stats(const MetricsReport& report, const ConvergenceCriteria& c)
{
    TrendStats t;
    const int L = static_cast<int>(report.layers.size());
    t.n_layers = L;
    if (L == 0)
        throw PreconditionError("trend_stats: empty report");
    std::vector<double> layer, rate, ratio;
    for (const auto& l : report.layers) {
        layer.push_back(l.layer);
        rate.push_back(visual_rate(l));
        ratio.push_back(error_ratio(l));
    }
    if (L >= 2)
        t.spearman_rho = spearman(layer, rate);
    const int third = std::max(1, static_cast<int>(std::lround(L / 3.0)));
    auto mean = [](const std::vector<double>& v, int from, int to) {
        double s = 0;
        for (int i = from; i < to; ++i)
            s += v[static_cast<std::size_t>(i)];
        return s / (to - from);
    };
    t.first_third_alignment = mean(rate, 0, third);
    t.last_third_alignment = mean(rate, L - third, L);
    t.first_third_error_ratio = mean(ratio, 0, third);
    t.last_third_error_ratio = mean(ratio, L - third, L);
    t.convergence_layer = detect_convergence(report, c);
    return t;
}

ProbeActivations collect_probe_activations(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                           const AdapterWeights<float>& adapter,
                                           const std::vector<MMExample>& examples, const std::vector<int>& layers)
{
    const std::set<int> capture(layers.begin(), layers.end());
    std::map<int, std::vector<MatF>> vlm_blocks, base_blocks;
    ProbeActivations acts;
    std::vector<PositionTag> vlm_tags, base_tags;
    for (std::size_t e = 0; e < examples.size(); ++e) {
        const auto& ex = examples[e];
        const Tokens text = format_vlm_text(ex.instruction, ex.answer).tokens;
        auto seq = assemble(ex.image, text, lm, vit, adapter);
        auto vo = lm_forward(lm, seq.embeddings, capture);
        for (int l : layers)
            vlm_blocks[l].push_back(vo.record.layers.at(l));
        for (std::size_t p = 0; p < seq.tags.size(); ++p)
            vlm_tags.push_back({static_cast<int>(e), static_cast<int>(p), seq.tokens[p], seq.tags[p]});

        const Tokens base = build_baseline(ex);
        auto bo = lm_forward(lm, embed_tokens(lm, base), capture);
        for (int l : layers)
            base_blocks[l].push_back(bo.record.layers.at(l));
        for (std::size_t p = 0; p < base.size(); ++p)
            base_tags.push_back({static_cast<int>(e), static_cast<int>(p), base[p],
                                 p == 0 ? PositionGroup::Bos : PositionGroup::Text});
    }
    auto stack = [&](std::vector<MatF>& blocks, std::size_t rows, int l, std::vector<PositionTag>& tags) {
        ActivationDump d;
        d.layer = l;
        d.acts.resize(static_cast<Eigen::Index>(rows), lm.cfg.d_model);
        Eigen::Index r = 0;
        for (auto& b : blocks) {
            d.acts.middleRows(r, b.rows()) = b;
            r += b.rows();
            b.resize(0, 0);
        }
        d.tags = tags;
        return d;
    };
    for (int l : layers) {
        acts.vlm[l] = stack(vlm_blocks[l], vlm_tags.size(), l, vlm_tags);
        acts.baseline[l] = stack(base_blocks[l], base_tags.size(), l, base_tags);
    }
    return acts;
}

MatF group_rows(const ActivationDump& dump, PositionGroup tag, int n_examples)
{
    std::vector<Eigen::Index> idx;
    for (std::size_t i = 0; i < dump.tags.size(); ++i)
        if (dump.tags[i].group == tag && dump.tags[i].doc < n_examples)
            idx.push_back(static_cast<Eigen::Index>(i));
    return dump.rows(idx);
}

namespace {

int example_count(const ActivationDump& d)
{
    int n = 0;
    for (const auto& t : d.tags)
        n = std::max(n, t.doc + 1);
    return n;
}

std::vector<MatF> codes_by_example(const ActivationDump& dump, PositionGroup tag, int n, const SAEWeights<float>& sae)
{
    std::vector<std::vector<Eigen::Index>> rows(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < dump.tags.size(); ++i)
        if (dump.tags[i].group == tag && dump.tags[i].doc < n)
            rows[static_cast<std::size_t>(dump.tags[i].doc)].push_back(static_cast<Eigen::Index>(i));
    std::vector<MatF> out;
    out.reserve(rows.size());
    for (const auto& r : rows)
        out.push_back(encode(dump.rows(r), sae));
    return out;
}

GroupMetrics group_metrics(const MatF& v, const SAEWeights<float>& sae)
{
    GroupMetrics m;
    m.positions = v.rows();
    m.recon_error = recon_error(v, sae);
    m.sparsity = sparsity(v, sae);
    m.fvu = v.rows() > 1 ? fraction_of_variance_unexplained(sae, v) : 0.0;
    return m;
}

}  // namespace

MetricsReport compute_metrics(const ProbeActivations& acts, const ProbeModels& models,
                              const std::vector<MMExample>& examples, const ProbeConfig& cfg)
{
    if (models.saes.empty())
        throw PreconditionError("run_probe: no SAEs");
    MetricsReport rep;
    rep.config = cfg.to_json();
    if (models.adapter)
        rep.adapter_checksum = models.adapter->checksum();
    for (const auto& [layer, sae] : models.saes) {
        if (sae.layer != layer)
            throw PreconditionError("SAE for layer " + std::to_string(sae.layer) + " supplied as layer " +
                                    std::to_string(layer));
        const auto vit_it = acts.vlm.find(layer);
        const auto base_it = acts.baseline.find(layer);
        if (vit_it == acts.vlm.end() || base_it == acts.baseline.end())
            throw PreconditionError("no activations for layer " + std::to_string(layer));
        const ActivationDump& vlm = vit_it->second;
        const ActivationDump& base = base_it->second;
        if (vlm.acts.cols() != sae.d_model)
            throw ShapeMismatch("layer " + std::to_string(layer) + ": SAE width does not match activations");
        const int n_avail = std::min(example_count(vlm), example_count(base));
        const int n_rs = std::min(cfg.n_rs, n_avail);
        const int n_al = std::min({cfg.n_align, n_avail, static_cast<int>(examples.size())});
        rep.n_rs_examples = n_rs;
        rep.n_align_examples = n_al;

        LayerMetrics lm;
        lm.layer = layer;
        lm.groups[TokenGroup::VlmVisual] = group_metrics(group_rows(vlm, PositionGroup::Visual, n_rs), sae);
        lm.groups[TokenGroup::VlmText] = group_metrics(group_rows(vlm, PositionGroup::Text, n_rs), sae);
        lm.groups[TokenGroup::TextOnlyBaseline] = group_metrics(group_rows(base, PositionGroup::Text, n_rs), sae);

        const auto desc_it = models.descriptions.find(layer);
        if (desc_it == models.descriptions.end())
            throw PreconditionError("no feature descriptions for layer " + std::to_string(layer));
        std::vector<FeatureDescription> descs = desc_it->second;
        if (descs.size() > static_cast<std::size_t>(sae.d_sae))
            throw ShapeMismatch("more descriptions than SAE features at layer " + std::to_string(layer));
        descs.resize(static_cast<std::size_t>(sae.d_sae));
        std::vector<double> corpus_freq;
        for (const auto& d : descs)
            corpus_freq.push_back(d.frequency);
        std::vector<ConceptSet> concepts;
        for (int e = 0; e < n_al; ++e)
            concepts.push_back(examples[static_cast<std::size_t>(e)].image.concepts);

        const std::pair<TokenGroup, std::pair<const ActivationDump*, PositionGroup>> aligned[] = {
            {TokenGroup::VlmVisual, {&vlm, PositionGroup::Visual}},
            {TokenGroup::TextOnlyBaseline, {&base, PositionGroup::Text}}};
        for (const auto& [group, src] : aligned) {
            auto codes = codes_by_example(*src.first, src.second, n_al, sae);
            MatF maxes = example_feature_stats(codes, RankStat::Max);
            MatF stats = cfg.rank == RankStat::Max ? maxes : example_feature_stats(codes, RankStat::Sum);
            auto mask = filter_features(image_frequencies(maxes, cfg.activation_threshold), corpus_freq,
                                        cfg.thresholds);
            lm.alignment[group] = alignment_rate(stats, mask, descs, concepts, cfg.k);
            lm.kept_features[group] = mask.kept();
        }
        rep.layers.push_back(std::move(lm));
    }
    rep.convergence_layer = detect_convergence(rep, cfg.convergence);
    return rep;
}

MetricsReport run_probe(const ProbeModels& models, const std::vector<MMExample>& examples, const ProbeConfig& cfg,
                        ProbeActivations* keep_acts)
{
    if (!models.lm || !models.vit || !models.adapter)
        throw PreconditionError("run_probe: missing model");
    const std::size_t n = std::min(examples.size(), static_cast<std::size_t>(std::max(cfg.n_rs, cfg.n_align)));
    if (n == 0)
        throw PreconditionError("run_probe: no examples");
    std::vector<MMExample> used(examples.begin(), examples.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<int> layers;
    for (const auto& [l, s] : models.saes)
        layers.push_back(l);
    auto acts = collect_probe_activations(*models.lm, *models.vit, *models.adapter, used, layers);
    auto rep = compute_metrics(acts, models, used, cfg);
    if (keep_acts)
        *keep_acts = std::move(acts);
    return rep;
}

}  // namespace xmp
