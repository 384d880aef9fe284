#pragma once

// ReLU + L1 sparse autoencoders over residual-stream activations, and
// per-feature concept descriptions from max-activating corpus contexts.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmp/activations.hpp"
#include "xmp/dense.hpp"
#include "xmp/nn.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tensor_io.hpp"

namespace xmp {

/// encode(x) = relu((x - b_dec) W_enc + b_enc); decode(f) = f W_dec + b_dec.
/// Row i of W_dec is the dictionary direction of feature i and is kept at
/// unit norm.
template <typename Scalar>
struct SAEWeights {
    int layer = 0;
    int d_model = 0;
    int d_sae = 0;
    double l1_coefficient = 0.0;
    double input_scale = 1.0;  // c with E||c (x - mean)||^2 = d_model on the training data
    Mat<Scalar> w_enc;          // d_model x d_sae
    Mat<Scalar> b_enc;          // 1 x d_sae
    Mat<Scalar> w_dec;          // d_sae x d_model
    Mat<Scalar> b_dec;          // 1 x d_model

    SAEWeights() = default;
    SAEWeights(int layer_, int d, int m)
        : layer(layer_), d_model(d), d_sae(m), w_enc(Mat<Scalar>::Zero(d, m)), b_enc(Mat<Scalar>::Zero(1, m)),
          w_dec(Mat<Scalar>::Zero(m, d)), b_dec(Mat<Scalar>::Zero(1, d))
    {
    }

    TensorList<Scalar> tensors()
    {
        return {{"w_enc", &w_enc}, {"b_enc", &b_enc}, {"w_dec", &w_dec}, {"b_dec", &b_dec}};
    }
    TensorList<Scalar> tensors() const { return const_cast<SAEWeights*>(this)->tensors(); }

    void normalize_dictionary()
    {
        for (Eigen::Index i = 0; i < w_dec.rows(); ++i) {
            const Scalar n = w_dec.row(i).norm();
            if (n > Scalar(0))
                w_dec.row(i) /= n;
        }
    }

    template <typename To>
    SAEWeights<To> cast() const
    {
        SAEWeights<To> out(layer, d_model, d_sae);
        out.l1_coefficient = l1_coefficient;
        out.input_scale = input_scale;
        copy_tensors(tensors(), out.tensors());
        return out;
    }

    std::string checksum() const { return content_hash(tensors()); }
};

/// Non-negative code of one activation vector and where it came from.
template <typename Scalar>
struct SparseCode {
    RowVec<Scalar> values;
    int layer = 0;
    int example = -1;
    int position = -1;

    Eigen::Index l0() const { return (values.array() > Scalar(0)).count(); }
};

/// Batch encode: one code row per activation row.
template <typename Scalar>
Mat<Scalar> encode(const Mat<Scalar>& x, const SAEWeights<Scalar>& sae)
{
    Mat<Scalar> pre = (x.rowwise() - sae.b_dec.row(0)) * sae.w_enc;
    pre.rowwise() += sae.b_enc.row(0);
    return pre.cwiseMax(Scalar(0));
}

template <typename Scalar>
SparseCode<Scalar> encode(const RowVec<Scalar>& x, const SAEWeights<Scalar>& sae)
{
    SparseCode<Scalar> c;
    c.values = encode(Mat<Scalar>(x), sae).row(0);
    c.layer = sae.layer;
    return c;
}

template <typename Scalar>
Mat<Scalar> decode(const Mat<Scalar>& codes, const SAEWeights<Scalar>& sae)
{
    Mat<Scalar> out = codes * sae.w_dec;
    out.rowwise() += sae.b_dec.row(0);
    return out;
}

template <typename Scalar>
RowVec<Scalar> decode(const SparseCode<Scalar>& code, const SAEWeights<Scalar>& sae)
{
    return decode(Mat<Scalar>(code.values), sae).row(0);
}

/// decode(encode(x)) row-wise.
template <typename Scalar>
Mat<Scalar> reconstruct(const Mat<Scalar>& x, const SAEWeights<Scalar>& sae)
{
    return decode(encode(x, sae), sae);
}

/// Training objective averaged over rows:
///   (c^2 / d) ||x - x_hat||^2 + lambda * c * ||f||_1
/// with c = sae.input_scale, i.e. squared error and L1 measured on inputs
/// rescaled to E||x - mean||^2 = d. Accumulates gradients when requested.
template <typename Scalar>
double sae_objective(const SAEWeights<Scalar>& sae, const Mat<Scalar>& x, double l1, SAEWeights<Scalar>* grads)
{
    const Scalar B = Scalar(x.rows());
    const Scalar c = Scalar(sae.input_scale);
    const Scalar mse_w = c * c / Scalar(sae.d_model);
    const Scalar l1_w = Scalar(l1) * c;
    Mat<Scalar> xc = x.rowwise() - sae.b_dec.row(0);
    Mat<Scalar> pre = xc * sae.w_enc;
    pre.rowwise() += sae.b_enc.row(0);
    Mat<Scalar> f = pre.cwiseMax(Scalar(0));
    Mat<Scalar> r = f * sae.w_dec;
    r.rowwise() += sae.b_dec.row(0);
    r -= x;
    const double loss = static_cast<double>((mse_w * r.squaredNorm() + l1_w * f.sum()) / B);
    if (!grads)
        return loss;
    Mat<Scalar> dxh = r * (Scalar(2) * mse_w / B);
    grads->w_dec.noalias() += f.transpose() * dxh;
    grads->b_dec += dxh.colwise().sum();
    Mat<Scalar> df = dxh * sae.w_dec.transpose();
    df.array() += l1_w / B;
    Mat<Scalar> dpre = (pre.array() > Scalar(0)).select(df, Scalar(0));
    grads->w_enc.noalias() += xc.transpose() * dpre;
    grads->b_enc += dpre.colwise().sum();
    grads->b_dec -= (dpre * sae.w_enc.transpose()).colwise().sum();
    return loss;
}

/// Fraction of variance unexplained: sum ||x - x_hat||^2 / sum ||x - mean||^2.
template <typename Scalar>
double fraction_of_variance_unexplained(const SAEWeights<Scalar>& sae, const Mat<Scalar>& x)
{
    Mat<Scalar> err = reconstruct(x, sae) - x;
    RowVec<Scalar> mean = x.colwise().mean();
    const double var = static_cast<double>((x.rowwise() - mean).squaredNorm());
    return static_cast<double>(err.squaredNorm()) / var;
}

/// Mean L0 of the codes divided by d_sae.
template <typename Scalar>
double mean_l0_fraction(const SAEWeights<Scalar>& sae, const Mat<Scalar>& x)
{
    Mat<Scalar> f = encode(x, sae);
    return static_cast<double>((f.array() > Scalar(0)).count()) / static_cast<double>(f.rows()) / sae.d_sae;
}

struct SAETrainOptions {
    int d_sae = 512;
    int batch_size = 256;
    int epochs = 30;
    double lr = 1e-3;
    double heldout_fraction = 0.1;
    double fvu_target = 0.15;
    double l0_target = 0.05;
    std::vector<double> l1_sweep = {1e-3, 3e-3, 1e-2};
    std::uint64_t seed = 0;
};

struct SAEAttempt {
    double l1 = 0.0;
    double heldout_fvu = 0.0;
    double heldout_l0_fraction = 0.0;
    double train_fvu = 0.0;
    int dead_features = 0;
};

struct SAETrainResult {
    SAEWeights<float> sae;
    SAEAttempt chosen;
    std::vector<SAEAttempt> attempts;
    bool meets_targets = false;
    std::string diagnostics;
};

/// Trains one SAE at a fixed L1 coefficient. Requires >= 10 * d_sae rows.
SAETrainResult train_sae(const MatF& acts, int layer, double l1, const SAETrainOptions& opt);

/// Tries the L1 sweep from the largest coefficient down and keeps the first
/// SAE whose held-out FVU meets the target (the largest such coefficient).
SAETrainResult train_sae_sweep(const MatF& acts, int layer, const SAETrainOptions& opt);

void save_sae(const std::filesystem::path& path, const SAEWeights<float>& sae);
SAEWeights<float> load_sae(const std::filesystem::path& path);
std::filesystem::path sae_file_name(const std::filesystem::path& dir, int layer);

struct ConceptScore {
    Concept concept_id = 0;
    double precision = 0.0;
    int support = 0;
};

struct FeatureDescription {
    int feature = 0;
    bool described = false;
    double frequency = 0.0;
    int contexts = 0;
    std::vector<ConceptScore> concepts;  // precision >= threshold, descending

    bool mentions(Concept c) const;
};

struct DescribeOptions {
    int top_contexts = 50;
    int min_contexts = 20;
    int window = 3;
    double precision_threshold = 0.6;
};

/// Describes every feature from the non-BOS rows of a text activation dump.
std::vector<FeatureDescription> describe_features(const SAEWeights<float>& sae, const ActivationDump& corpus,
                                                  const DescribeOptions& opt = {});

/// True when the concept's words occur contiguously in tokens[lo, hi].
bool window_mentions(const Tokens& doc, int lo, int hi, Concept c);

/// CSV: feature_id,frequency,concept,precision,support. One row per kept
/// concept; features without kept concepts get one row with concept NONE, and
/// undescribed features one row with concept UNDESCRIBED.
void save_descriptions_csv(const std::filesystem::path& path, const std::vector<FeatureDescription>& d);
std::vector<FeatureDescription> load_descriptions_csv(const std::filesystem::path& path);

}  // namespace xmp
