#pragma once

// The trainable linear map from vision-tower outputs to LM input embeddings,
// VLM sequence assembly, and the two-stage adapter training.
//
// Sequence layout: <BOS> [visual x 9] <SEP> instruction <SEP> answer <EOS>.
// Only answer tokens (and the closing EOS) carry loss.

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "xmp/dense.hpp"
#include "xmp/error.hpp"
#include "xmp/rng.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tinylm.hpp"
#include "xmp/tinyvit.hpp"

namespace xmp {

template <typename Scalar>
struct AdapterWeights {
    int d_vis = 0;
    int d_model = 0;
    Mat<Scalar> w;  // d_vis x d_model
    Mat<Scalar> b;  // 1 x d_model

    AdapterWeights() = default;
    AdapterWeights(int dv, int dm) : d_vis(dv), d_model(dm), w(Mat<Scalar>::Zero(dv, dm)), b(Mat<Scalar>::Zero(1, dm))
    {
    }

    TensorList<Scalar> tensors() { return {{"w", &w}, {"b", &b}}; }
    TensorList<Scalar> tensors() const { return const_cast<AdapterWeights*>(this)->tensors(); }

    /// Uniform(-1/sqrt(d_vis), 1/sqrt(d_vis)) for both W and b, the usual
    /// default for a freshly constructed linear layer.
    void init(Rng& rng)
    {
        const double bound = 1.0 / std::sqrt(static_cast<double>(d_vis));
        for (auto* m : {&w, &b})
            for (Eigen::Index j = 0; j < m->cols(); ++j)
                for (Eigen::Index i = 0; i < m->rows(); ++i)
                    (*m)(i, j) = static_cast<Scalar>((2.0 * uniform01(rng) - 1.0) * bound);
    }

    template <typename To>
    AdapterWeights<To> cast() const
    {
        AdapterWeights<To> out(d_vis, d_model);
        copy_tensors(tensors(), out.tensors());
        return out;
    }

    std::string checksum() const { return content_hash(tensors()); }
};

/// rows = patches W + b.
template <typename Scalar>
Mat<Scalar> project(const Mat<Scalar>& patches, const AdapterWeights<Scalar>& a)
{
    if (patches.cols() != a.d_vis)
        throw ShapeMismatch("project: patch width " + std::to_string(patches.cols()) + " != d_vis " +
                            std::to_string(a.d_vis));
    Mat<Scalar> out = patches * a.w;
    out.rowwise() += a.b.row(0);
    return out;
}

inline constexpr int kVisualTokens = 9;
inline constexpr int kVisualBegin = 1;

/// Text part of a VLM input: <SEP> instruction <SEP> answer <EOS>.
struct VLMText {
    Tokens tokens;
    int answer_begin = 0;  // index into tokens of the first answer token
};

VLMText format_vlm_text(const std::string& instruction, const std::string& answer);
/// <SEP> instruction <SEP>, the decoding prompt.
Tokens format_vlm_prompt(const std::string& instruction);

template <typename Scalar>
struct AssembledSequence {
    Mat<Scalar> embeddings;
    std::vector<PositionGroup> tags;
    Tokens tokens;  // token at each position; -1 on visual positions
};

template <typename Scalar>
AssembledSequence<Scalar> assemble_from_patches(const LMWeights<Scalar>& lm, const Mat<Scalar>& patch_rows,
                                                const Tokens& text, const AdapterWeights<Scalar>& a)
{
    if (patch_rows.rows() != kVisualTokens)
        throw ShapeMismatch("assemble: expected 9 visual rows");
    const auto T = static_cast<Eigen::Index>(1 + kVisualTokens + text.size());
    if (T > lm.cfg.max_context)
        throw ContextOverflow("assembled length " + std::to_string(T) + " exceeds max_context " +
                              std::to_string(lm.cfg.max_context));
    AssembledSequence<Scalar> s;
    s.embeddings.resize(T, lm.cfg.d_model);
    s.embeddings.row(0) = embed_tokens(lm, Tokens{Tokenizer::kBos}).row(0);
    s.embeddings.middleRows(kVisualBegin, kVisualTokens) = project(patch_rows, a);
    if (!text.empty())
        s.embeddings.bottomRows(static_cast<Eigen::Index>(text.size())) = embed_tokens(lm, text);
    s.tags.assign(static_cast<std::size_t>(T), PositionGroup::Text);
    s.tags[0] = PositionGroup::Bos;
    s.tokens.assign(static_cast<std::size_t>(T), -1);
    s.tokens[0] = Tokenizer::kBos;
    for (int k = 0; k < kVisualTokens; ++k)
        s.tags[static_cast<std::size_t>(kVisualBegin + k)] = PositionGroup::Visual;
    for (std::size_t i = 0; i < text.size(); ++i)
        s.tokens[1 + kVisualTokens + i] = text[i];
    return s;
}

template <typename Scalar>
AssembledSequence<Scalar> assemble(const SynthImage& image, const Tokens& text, const LMWeights<Scalar>& lm,
                                   const ViTWeights<Scalar>& vit, const AdapterWeights<Scalar>& a)
{
    return assemble_from_patches(lm, vit_forward(vit, image.pixels).rows, text, a);
}

/// Next-token targets of an assembled sequence: position i predicts the token
/// at i + 1 when that token is part of the answer; -1 elsewhere.
std::vector<int> answer_targets(const VLMText& text);

/// Summed masked loss of one example; accumulates adapter gradients scaled by
/// `scale`. The LM is only read.
template <typename Scalar>
double vlm_example_loss(const LMWeights<Scalar>& lm, const Mat<Scalar>& patch_rows, const VLMText& text,
                        const AdapterWeights<Scalar>& a, AdapterWeights<Scalar>* grads, Scalar scale = Scalar(1))
{
    auto seq = assemble_from_patches(lm, patch_rows, text.tokens, a);
    const std::vector<int> targets = answer_targets(text);
    LMCache<Scalar> cache;
    auto out = lm_forward(lm, seq.embeddings, {}, grads ? &cache : nullptr);
    Mat<Scalar> dlogits;
    const double loss = cross_entropy(out.logits, targets, grads ? &dlogits : nullptr, scale);
    if (grads) {
        Mat<Scalar> demb = lm_backward(lm, cache, dlogits, static_cast<LMWeights<Scalar>*>(nullptr));
        auto dvis = demb.middleRows(kVisualBegin, kVisualTokens);
        grads->w.noalias() += patch_rows.transpose() * dvis;
        grads->b += dvis.colwise().sum();
    }
    return loss;
}

/// A training/evaluation item with the frozen vision tower already applied.
struct VLMItem {
    MatF patch_rows;  // 9 x d_vis
    VLMText text;
    Tokens prompt;
    Tokens answer;
    ConceptSet concepts;
};

std::vector<VLMItem> prepare_items(const ViTWeights<float>& vit, const std::vector<MMExample>& examples);

struct AdapterTrainOptions {
    int stage = 1;
    double lr = 1e-3;
    int epochs = 1;
    int batch_size = 32;
    double warmup_ratio = 0.03;
    std::uint64_t seed = 0;
};

/// Stage 1: lr 1e-3, 1 epoch, 3% linear warmup then constant, batch 32.
AdapterTrainOptions stage1_options(std::uint64_t seed);
/// Stage 2: lr 2e-5, 3 epochs, no warmup, batch 16.
AdapterTrainOptions stage2_options(std::uint64_t seed);

struct AdapterTrainResult {
    AdapterWeights<float> weights;
    double first_epoch_loss = 0.0;
    double final_epoch_loss = 0.0;
    long steps = 0;
    std::string lm_checksum;
    std::string vit_checksum;
};

/// A randomly initialised adapter sized for the two backbones.
AdapterWeights<float> random_adapter(const LMWeights<float>& lm, const ViTWeights<float>& vit, std::uint64_t seed);

/// Trains `init` on the items. Backbone checksums are taken before training
/// and compared after every epoch; any drift throws FrozenWeightViolation.
AdapterTrainResult train_adapter(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                 const std::vector<VLMItem>& items, const AdapterWeights<float>& init,
                                 const AdapterTrainOptions& opt, const ProgressFn& progress = {});

AdapterTrainResult train_stage1(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                const std::vector<VLMItem>& items, const AdapterTrainOptions& opt,
                                const ProgressFn& progress = {});
AdapterTrainResult train_stage2(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                const std::vector<VLMItem>& items, const AdapterWeights<float>& stage1,
                                const AdapterTrainOptions& opt, const ProgressFn& progress = {});

/// Mean masked loss per answer token.
double mean_answer_loss(const LMWeights<float>& lm, const std::vector<VLMItem>& items, const AdapterWeights<float>& a);

/// Greedy decoding after the prompt until EOS or `max_new` tokens; EOS is not
/// included in the result.
Tokens greedy_answer(const LMWeights<float>& lm, const MatF& patch_rows, const Tokens& prompt,
                     const AdapterWeights<float>& a, int max_new = 80);

/// Fraction of items whose greedy answer equals the reference exactly.
double exact_match_accuracy(const LMWeights<float>& lm, const std::vector<VLMItem>& items,
                            const AdapterWeights<float>& a);

void save_adapter(const std::filesystem::path& path, const AdapterWeights<float>& a, int stage);
AdapterWeights<float> load_adapter(const std::filesystem::path& path);

}  // namespace xmp
