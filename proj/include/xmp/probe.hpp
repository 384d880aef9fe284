#pragma once

// Layer-wise SAE probe of VLM activations: reconstruction error E_l,
// sparsity S_l, frequency filtering, top-k feature extraction, description
// alignment and convergence detection.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmp/activations.hpp"
#include "xmp/adapter.hpp"
#include "xmp/sae.hpp"

namespace xmp {

enum class TokenGroup { VlmVisual, VlmText, TextOnlyBaseline };
inline constexpr TokenGroup kAllGroups[] = {TokenGroup::VlmVisual, TokenGroup::VlmText, TokenGroup::TextOnlyBaseline};

std::string group_name(TokenGroup g);
TokenGroup group_from_name(const std::string& s);

inline const std::string kBaselinePrefix = "Consider the following information: ";

/// BOS + tokenize(prefix + answer + " " + instruction).
Tokens build_baseline(const MMExample& example);

/// E_l: mean over rows of ||v - decode(encode(v))||^2.
template <typename Scalar>
double recon_error(const Mat<Scalar>& v, const SAEWeights<Scalar>& sae)
{
    if (v.rows() == 0)
        throw PreconditionError("recon_error: empty group");
    return static_cast<double>((reconstruct(v, sae) - v).squaredNorm()) / static_cast<double>(v.rows());
}

/// S_l: mean over rows of l0(encode(v)), divided by d_sae.
template <typename Scalar>
double sparsity(const Mat<Scalar>& v, const SAEWeights<Scalar>& sae)
{
    if (v.rows() == 0)
        throw PreconditionError("sparsity: empty group");
    return mean_l0_fraction(sae, v);
}

struct FilterThresholds {
    double image_freq_max = 0.05;
    double corpus_freq_max = 0.005;
};

struct FeatureFilterMask {
    std::vector<bool> keep;  // per feature
    FilterThresholds thresholds;

    int kept() const;
};

/// Feature f is dropped iff image_freq[f] > image_freq_max or
/// corpus_freq[f] > corpus_freq_max.
FeatureFilterMask filter_features(const std::vector<double>& image_freq, const std::vector<double>& corpus_freq,
                                  const FilterThresholds& t = {});

enum class RankStat { Max, Sum };

/// Per-example statistic of each feature over that example's group
/// positions (rows: examples, cols: features).
template <typename Scalar>
Mat<Scalar> example_feature_stats(const std::vector<Mat<Scalar>>& codes_per_example, RankStat stat)
{
    if (codes_per_example.empty())
        return {};
    const Eigen::Index m = codes_per_example.front().cols();
    Mat<Scalar> out = Mat<Scalar>::Zero(static_cast<Eigen::Index>(codes_per_example.size()), m);
    for (std::size_t e = 0; e < codes_per_example.size(); ++e) {
        const auto& c = codes_per_example[e];
        if (c.rows() == 0)
            continue;
        out.row(static_cast<Eigen::Index>(e)) = stat == RankStat::Max ? RowVec<Scalar>(c.colwise().maxCoeff())
                                                                      : RowVec<Scalar>(c.colwise().sum());
    }
    return out;
}

/// Fraction of examples (rows) in which each feature is active (> threshold)
/// on at least one position.
std::vector<double> image_frequencies(const MatF& max_stats, double threshold = 0.0);

/// Unmasked features with statistic > 0, highest first, ties to the lower
/// index; at most k.
std::vector<int> top_k_features(const RowVecF& stats, const FeatureFilterMask& mask, int k = 3);

/// True when any feature's description names a concept in the set.
bool features_match(const std::vector<int>& features, const std::vector<FeatureDescription>& descriptions,
                    const ConceptSet& concepts);

/// Fraction of examples whose top-k features match their image concepts.
double alignment_rate(const MatF& stats, const FeatureFilterMask& mask,
                      const std::vector<FeatureDescription>& descriptions, const std::vector<ConceptSet>& concepts,
                      int k = 3);

struct GroupMetrics {
    double recon_error = 0.0;
    double sparsity = 0.0;
    double fvu = 0.0;
    long positions = 0;
};

struct LayerMetrics {
    int layer = 0;
    std::map<TokenGroup, GroupMetrics> groups;
    std::map<TokenGroup, double> alignment;  // VlmVisual and TextOnlyBaseline only
    std::map<TokenGroup, int> kept_features;
};

struct ConvergenceCriteria {
    double rate_fraction = 0.9;
    double error_ratio = 1.5;
};

struct ProbeConfig {
    int n_rs = 2000;
    int n_align = 1000;
    int k = 3;
    FilterThresholds thresholds;
    double activation_threshold = 0.0;
    RankStat rank = RankStat::Max;
    ConvergenceCriteria convergence;

    nlohmann::json to_json() const;
};

struct MetricsReport {
    std::vector<LayerMetrics> layers;
    std::optional<int> convergence_layer;
    nlohmann::json config;  // echo of the run configuration
    int n_rs_examples = 0;
    int n_align_examples = 0;
    std::string adapter_checksum;

    const LayerMetrics& at(int layer) const;
    nlohmann::json to_json() const;
    static MetricsReport from_json(const nlohmann::json& j);
    /// layer,group,metric,value rows.
    std::string to_csv() const;
};

/// Smallest l* such that for every l >= l*: rate(l) >= fraction * max rate
/// and E(visual)/E(baseline) <= ratio. None when the maximum rate is 0.
std::optional<int> detect_convergence(const MetricsReport& report, const ConvergenceCriteria& c = {});

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct TrendStats {
    double spearman_rho = 0.0;
    double first_third_alignment = 0.0;
    double last_third_alignment = 0.0;
    double first_third_error_ratio = 0.0;  // mean E(visual)/E(baseline)
    double last_third_error_ratio = 0.0;
    std::optional<int> convergence_layer;
    int n_layers = 0;
};

/// First/last third = round(L / 3) layers from each end.
TrendStats trend_stats(const MetricsReport& report, const ConvergenceCriteria& c = {});

/// Residual activations of the probe inputs. Row groups are identified by
/// the tags; doc = example index.
struct ProbeActivations {
    std::map<int, ActivationDump> vlm;       // bos | visual | text
    std::map<int, ActivationDump> baseline;  // bos | text
};

ProbeActivations collect_probe_activations(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                           const AdapterWeights<float>& adapter,
                                           const std::vector<MMExample>& examples, const std::vector<int>& layers);

struct ProbeModels {
    const LMWeights<float>* lm = nullptr;
    const ViTWeights<float>* vit = nullptr;
    const AdapterWeights<float>* adapter = nullptr;
    std::map<int, SAEWeights<float>> saes;
    std::map<int, std::vector<FeatureDescription>> descriptions;
};

/// Metrics from collected activations; examples supply image concept sets.
MetricsReport compute_metrics(const ProbeActivations& acts, const ProbeModels& models,
                              const std::vector<MMExample>& examples, const ProbeConfig& cfg);

/// Collects activations for max(n_rs, n_align) examples and computes metrics.
MetricsReport run_probe(const ProbeModels& models, const std::vector<MMExample>& examples, const ProbeConfig& cfg,
                        ProbeActivations* keep_acts = nullptr);

/// Rows of a dump for one group, restricted to examples [0, n).
MatF group_rows(const ActivationDump& dump, PositionGroup tag, int n_examples);

}  // namespace xmp
