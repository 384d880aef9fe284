#pragma once

// Decoder-only transformer language model with residual-stream capture.

#include <filesystem>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "xmp/dense.hpp"
#include "xmp/error.hpp"
#include "xmp/nn.hpp"
#include "xmp/tensor_io.hpp"
#include "xmp/tokenizer.hpp"

namespace xmp {

struct LMConfig {
    int d_model = 64;
    int n_layers = 8;
    int n_heads = 4;
    int d_ff = 256;
    int vocab_size = 0;
    int max_context = 160;

    void validate() const;
    TransformerConfig transformer() const { return {d_model, n_heads, d_ff, n_layers, true}; }
    nlohmann::json to_json() const;
    static LMConfig from_json(const nlohmann::json& j);
};

template <typename Scalar>
struct LMWeights {
    LMConfig cfg;
    Mat<Scalar> tok_emb;  // vocab x d
    Mat<Scalar> pos_emb;  // max_context x d
    TransformerParams<Scalar> tf;
    Mat<Scalar> lnf_g, lnf_b;
    Mat<Scalar> unembed;  // d x vocab

    LMWeights() = default;
    explicit LMWeights(const LMConfig& c)
        : cfg(c), tok_emb(Mat<Scalar>::Zero(c.vocab_size, c.d_model)),
          pos_emb(Mat<Scalar>::Zero(c.max_context, c.d_model)), tf(c.transformer()),
          lnf_g(Mat<Scalar>::Ones(1, c.d_model)), lnf_b(Mat<Scalar>::Zero(1, c.d_model)),
          unembed(Mat<Scalar>::Zero(c.d_model, c.vocab_size))
    {
        c.validate();
    }

    TensorList<Scalar> tensors()
    {
        TensorList<Scalar> out{{"tok_emb", &tok_emb}, {"pos_emb", &pos_emb}};
        tf.append_tensors("", out);
        out.insert(out.end(), {{"lnf_g", &lnf_g}, {"lnf_b", &lnf_b}, {"unembed", &unembed}});
        return out;
    }
    TensorList<Scalar> tensors() const { return const_cast<LMWeights*>(this)->tensors(); }

    void init(Rng& rng)
    {
        fill_normal(tok_emb, rng, 0.02);
        fill_normal(pos_emb, rng, 0.01);
        tf.init(rng);
        fill_normal(unembed, rng, 0.02);
    }

    template <typename To>
    LMWeights<To> cast() const
    {
        LMWeights<To> out(cfg);
        copy_tensors(tensors(), out.tensors());
        return out;
    }

    std::string checksum() const { return content_hash(tensors()); }
};

enum class PositionGroup : std::uint8_t { Bos, Visual, Text };

std::string group_tag_name(PositionGroup g);

/// Residual stream after block l, for each captured layer l in [1, n_layers].
template <typename Scalar>
struct ActivationRecord {
    std::map<int, Mat<Scalar>> layers;
    std::vector<PositionGroup> tags;

    bool empty() const { return layers.empty(); }
};

template <typename Scalar>
struct LMOutput {
    Mat<Scalar> logits;
    ActivationRecord<Scalar> record;
};

template <typename Scalar>
struct LMCache {
    StackCache<Scalar> blocks;
    LayerNormCache<Scalar> lnf;
    Mat<Scalar> zf;
};

/// Rows of the embedding matrix.
template <typename Scalar>
Mat<Scalar> embed_tokens(const LMWeights<Scalar>& w, const Tokens& tokens)
{
    Mat<Scalar> out(static_cast<Eigen::Index>(tokens.size()), w.cfg.d_model);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= w.cfg.vocab_size)
            throw PreconditionError("token id out of range");
        out.row(static_cast<Eigen::Index>(i)) = w.tok_emb.row(tokens[i]);
    }
    return out;
}

/// Forward pass from input embeddings (positions are added here). Captures the
/// residual stream after each block listed in `capture_layers`.
template <typename Scalar>
LMOutput<Scalar> lm_forward(const LMWeights<Scalar>& w, const Mat<Scalar>& embeddings,
                            const std::set<int>& capture_layers = {}, LMCache<Scalar>* cache = nullptr)
{
    const Eigen::Index T = embeddings.rows();
    if (T > w.cfg.max_context)
        throw ContextOverflow("sequence length " + std::to_string(T) + " exceeds max_context " +
                              std::to_string(w.cfg.max_context));
    if (embeddings.cols() != w.cfg.d_model)
        throw ShapeMismatch("embedding width does not match d_model");
    for (int l : capture_layers)
        if (l < 1 || l > w.cfg.n_layers)
            throw PreconditionError("capture layer out of range");

    Mat<Scalar> x = embeddings + w.pos_emb.topRows(T);
    std::vector<Mat<Scalar>> residuals;
    Mat<Scalar> h = stack_forward(w.tf, x, cache ? &cache->blocks : nullptr,
                                  capture_layers.empty() ? nullptr : &residuals);
    LMOutput<Scalar> out;
    for (int l : capture_layers)
        out.record.layers.emplace(l, std::move(residuals[static_cast<std::size_t>(l - 1)]));
    LayerNormCache<Scalar> lnc;
    Mat<Scalar> zf = layer_norm(h, w.lnf_g, w.lnf_b, cache ? &cache->lnf : &lnc);
    out.logits.noalias() = zf * w.unembed;
    if (cache)
        cache->zf = std::move(zf);
    return out;
}

/// Backward from dlogits. Parameter gradients go to `grads` (may be null);
/// returns the gradient with respect to the input embeddings.
template <typename Scalar>
Mat<Scalar> lm_backward(const LMWeights<Scalar>& w, const LMCache<Scalar>& cache, const Mat<Scalar>& dlogits,
                        LMWeights<Scalar>* grads)
{
    if (grads)
        grads->unembed.noalias() += cache.zf.transpose() * dlogits;
    Mat<Scalar> dzf = dlogits * w.unembed.transpose();
    Mat<Scalar> dh = layer_norm_backward(dzf, w.lnf_g, cache.lnf, grads ? &grads->lnf_g : nullptr,
                                         grads ? &grads->lnf_b : nullptr);
    Mat<Scalar> dx = stack_backward(w.tf, cache.blocks, dh, grads ? &grads->tf : nullptr);
    if (grads)
        grads->pos_emb.topRows(dx.rows()) += dx;
    return dx;
}

/// Next-token loss of one document [BOS, w..., EOS]. Returns the summed loss
/// over predicted tokens; accumulates gradients scaled by `scale`.
template <typename Scalar>
double lm_document_loss(const LMWeights<Scalar>& w, const Tokens& doc, LMWeights<Scalar>* grads,
                        Scalar scale = Scalar(1))
{
    if (doc.size() < 2)
        return 0.0;
    Tokens input(doc.begin(), doc.end() - 1);
    std::vector<int> targets(doc.begin() + 1, doc.end());
    LMCache<Scalar> cache;
    auto out = lm_forward(w, embed_tokens(w, input), {}, grads ? &cache : nullptr);
    if (!grads)
        return cross_entropy<Scalar>(out.logits, targets, nullptr);
    Mat<Scalar> dlogits;
    double loss = cross_entropy<Scalar>(out.logits, targets, &dlogits, scale);
    Mat<Scalar> demb = lm_backward(w, cache, dlogits, grads);
    for (std::size_t i = 0; i < input.size(); ++i)
        grads->tok_emb.row(input[i]) += demb.row(static_cast<Eigen::Index>(i));
    return loss;
}

/// Mean next-token loss over documents; gradients of that mean when requested.
template <typename Scalar>
double lm_batch_loss(const LMWeights<Scalar>& w, const std::vector<Tokens>& docs, LMWeights<Scalar>* grads)
{
    std::size_t n = 0;
    for (auto& d : docs)
        n += d.size() > 1 ? d.size() - 1 : 0;
    if (n == 0)
        return 0.0;
    const Scalar scale = Scalar(1) / Scalar(n);
    double total = 0.0;
    for (auto& d : docs)
        total += lm_document_loss(w, d, grads, scale);
    return total / static_cast<double>(n);
}

struct LMTrainOptions {
    int epochs = 4;
    int batch_size = 32;
    double lr = 3e-3;
    int warmup_steps = 100;
    double min_lr_fraction = 0.1;
    double val_fraction = 0.05;
    std::uint64_t seed = 0;
    int max_steps = -1;  // -1: no cap
};

struct LMTrainResult {
    LMWeights<float> weights;
    double final_train_loss = 0.0;
    double val_loss = 0.0;
    double unigram_entropy = 0.0;
    long steps = 0;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Adam on next-token cross entropy; linear warmup then cosine decay.
/// Documents must already be wrapped (see wrap_document). Throws Divergence
/// on a non-finite loss.
LMTrainResult train_lm(const std::vector<Tokens>& docs, const LMConfig& cfg, const LMTrainOptions& opt,
                       const ProgressFn& progress = {});

/// Cross entropy (nats/token) of the unigram distribution of the documents'
/// predicted tokens against itself.
double unigram_entropy(const std::vector<Tokens>& docs);

/// [BOS] + tokens + [EOS].
Tokens wrap_document(const Tokens& tokens);

void save_lm(const std::filesystem::path& path, const LMWeights<float>& w);
LMWeights<float> load_lm(const std::filesystem::path& path);

}  // namespace xmp
