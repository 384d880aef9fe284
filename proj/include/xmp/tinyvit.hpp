#pragma once

// Patch-transformer vision tower without a CLS token, pretrained with a
// symmetric InfoNCE objective against a small text tower that is discarded
// afterwards.

#include <array>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "xmp/dense.hpp"
#include "xmp/error.hpp"
#include "xmp/nn.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tensor_io.hpp"
#include "xmp/tinylm.hpp"
#include "xmp/tokenizer.hpp"

namespace xmp {

struct ViTConfig {
    int patch_size = 8;
    int d_vis = 48;
    int n_layers = 4;
    int n_heads = 4;
    int d_ff = 192;
    int image_side = kImageSide;
    int channels = kChannels;

    int patches_per_side() const { return image_side / patch_size; }
    int n_patches() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    void validate() const;
    TransformerConfig transformer() const { return {d_vis, n_heads, d_ff, n_layers, false}; }
    nlohmann::json to_json() const;
    static ViTConfig from_json(const nlohmann::json& j);
};

template <typename Scalar>
struct ViTWeights {
    ViTConfig cfg;
    Mat<Scalar> patch_w;  // patch_dim x d_vis
    Mat<Scalar> patch_b;  // 1 x d_vis
    Mat<Scalar> pos;      // n_patches x d_vis
    TransformerParams<Scalar> tf;
    Mat<Scalar> lnf_g, lnf_b;

    ViTWeights() = default;
    explicit ViTWeights(const ViTConfig& c)
        : cfg(c), patch_w(Mat<Scalar>::Zero(c.patch_dim(), c.d_vis)), patch_b(Mat<Scalar>::Zero(1, c.d_vis)),
          pos(Mat<Scalar>::Zero(c.n_patches(), c.d_vis)), tf(c.transformer()),
          lnf_g(Mat<Scalar>::Ones(1, c.d_vis)), lnf_b(Mat<Scalar>::Zero(1, c.d_vis))
    {
        c.validate();
    }

    TensorList<Scalar> tensors()
    {
        TensorList<Scalar> out{{"patch_w", &patch_w}, {"patch_b", &patch_b}, {"pos", &pos}};
        tf.append_tensors("", out);
        out.insert(out.end(), {{"lnf_g", &lnf_g}, {"lnf_b", &lnf_b}});
        return out;
    }
    TensorList<Scalar> tensors() const { return const_cast<ViTWeights*>(this)->tensors(); }

    void init(Rng& rng)
    {
        fill_normal(patch_w, rng, 1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())));
        fill_normal(pos, rng, 0.02);
        tf.init(rng);
    }

    template <typename To>
    ViTWeights<To> cast() const
    {
        ViTWeights<To> out(cfg);
        copy_tensors(tensors(), out.tensors());
        return out;
    }

    std::string checksum() const { return content_hash(tensors()); }
};

/// Output of the vision tower: one row per patch (no CLS row).
template <typename Scalar>
struct PatchEmbeddings {
    Mat<Scalar> rows;                 // n_patches x d_vis
    std::vector<int> cell_of_patch;   // patch k -> grid cell
};

/// Splits a row-major [y][x][ch] image into flattened patches in row-major
/// patch order; each patch vector is row-major [y][x][ch] within the patch.
template <typename Scalar>
Mat<Scalar> patchify(const std::vector<float>& pixels, const ViTConfig& cfg = {})
{
    if (static_cast<int>(pixels.size()) != cfg.image_side * cfg.image_side * cfg.channels)
        throw ShapeMismatch("patchify: expected " + std::to_string(cfg.image_side) + "x" +
                            std::to_string(cfg.image_side) + "x" + std::to_string(cfg.channels) + " pixels");
    const int pps = cfg.patches_per_side(), ps = cfg.patch_size, ch = cfg.channels;
    Mat<Scalar> out(cfg.n_patches(), cfg.patch_dim());
    for (int p = 0; p < cfg.n_patches(); ++p) {
        const int oy = (p / pps) * ps, ox = (p % pps) * ps;
        for (int y = 0; y < ps; ++y)
            for (int x = 0; x < ps; ++x)
                for (int c = 0; c < ch; ++c)
                    out(p, (y * ps + x) * ch + c) =
                        static_cast<Scalar>(pixels[static_cast<std::size_t>(((oy + y) * cfg.image_side + ox + x) * ch + c)]);
    }
    return out;
}

template <typename Scalar>
struct ViTCache {
    Mat<Scalar> patches;
    StackCache<Scalar> blocks;
    LayerNormCache<Scalar> lnf;
};

template <typename Scalar>
PatchEmbeddings<Scalar> vit_forward_patches(const ViTWeights<Scalar>& w, const Mat<Scalar>& patches,
                                            ViTCache<Scalar>* cache = nullptr)
{
    Mat<Scalar> x = patches * w.patch_w;
    x.rowwise() += w.patch_b.row(0);
    x += w.pos;
    Mat<Scalar> h = stack_forward(w.tf, x, cache ? &cache->blocks : nullptr);
    PatchEmbeddings<Scalar> out;
    LayerNormCache<Scalar> lnc;
    out.rows = layer_norm(h, w.lnf_g, w.lnf_b, cache ? &cache->lnf : &lnc);
    out.cell_of_patch.resize(static_cast<std::size_t>(w.cfg.n_patches()));
    for (int k = 0; k < w.cfg.n_patches(); ++k)
        out.cell_of_patch[static_cast<std::size_t>(k)] = k;
    if (cache)
        cache->patches = patches;
    return out;
}

template <typename Scalar>
PatchEmbeddings<Scalar> vit_forward(const ViTWeights<Scalar>& w, const std::vector<float>& pixels,
                                    ViTCache<Scalar>* cache = nullptr)
{
    return vit_forward_patches(w, patchify<Scalar>(pixels, w.cfg), cache);
}

template <typename Scalar>
void vit_backward(const ViTWeights<Scalar>& w, const ViTCache<Scalar>& cache, const Mat<Scalar>& drows,
                  ViTWeights<Scalar>& grads)
{
    Mat<Scalar> dh = layer_norm_backward(drows, w.lnf_g, cache.lnf, &grads.lnf_g, &grads.lnf_b);
    Mat<Scalar> dx = stack_backward(w.tf, cache.blocks, dh, &grads.tf);
    grads.pos += dx;
    grads.patch_b += dx.colwise().sum();
    grads.patch_w.noalias() += cache.patches.transpose() * dx;
}

/// Caption encoder used only during contrastive pretraining.
template <typename Scalar>
struct TextTower {
    Mat<Scalar> tok_emb, pos;
    TransformerParams<Scalar> tf;
    Mat<Scalar> lnf_g, lnf_b;

    TextTower() = default;
    TextTower(int vocab, int max_len, int d, int n_heads, int d_ff, int n_layers = 2)
        : tok_emb(Mat<Scalar>::Zero(vocab, d)), pos(Mat<Scalar>::Zero(max_len, d)),
          tf(TransformerConfig{d, n_heads, d_ff, n_layers, false}), lnf_g(Mat<Scalar>::Ones(1, d)),
          lnf_b(Mat<Scalar>::Zero(1, d))
    {
    }

    TensorList<Scalar> tensors()
    {
        TensorList<Scalar> out{{"text.tok_emb", &tok_emb}, {"text.pos", &pos}};
        tf.append_tensors("text.", out);
        out.insert(out.end(), {{"text.lnf_g", &lnf_g}, {"text.lnf_b", &lnf_b}});
        return out;
    }

    void init(Rng& rng)
    {
        fill_normal(tok_emb, rng, 0.1);
        fill_normal(pos, rng, 0.02);
        tf.init(rng);
    }
};

/// Vision tower, discarded text tower and learnable log logit-scale.
template <typename Scalar>
struct ContrastiveModel {
    ViTWeights<Scalar> vit;
    TextTower<Scalar> text;
    Mat<Scalar> log_scale;  // 1 x 1, logits are exp(log_scale) * cosine

    ContrastiveModel() = default;
    ContrastiveModel(const ViTConfig& c, int vocab, int max_len, double temperature)
        : vit(c), text(vocab, max_len, c.d_vis, c.n_heads, c.d_ff),
          log_scale(Mat<Scalar>::Constant(1, 1, static_cast<Scalar>(std::log(1.0 / temperature))))
    {
    }

    TensorList<Scalar> tensors()
    {
        auto out = vit.tensors();
        auto t = text.tensors();
        out.insert(out.end(), t.begin(), t.end());
        out.emplace_back("log_scale", &log_scale);
        return out;
    }

    template <typename To>
    ContrastiveModel<To> cast() const
    {
        ContrastiveModel<To> out;
        out.vit = ViTWeights<To>(vit.cfg);
        out.text = TextTower<To>(static_cast<int>(text.tok_emb.rows()), static_cast<int>(text.pos.rows()),
                                 vit.cfg.d_vis, vit.cfg.n_heads, vit.cfg.d_ff, text.tf.cfg.n_layers);
        out.log_scale = Mat<To>::Zero(1, 1);
        copy_tensors(const_cast<ContrastiveModel*>(this)->tensors(), out.tensors());
        return out;
    }
};

struct ContrastivePair {
    std::vector<float> pixels;
    Tokens caption;
};

/// Unit-norm mean-pooled image summary (rows of the result are images).
template <typename Scalar>
RowVec<Scalar> image_summary(const ViTWeights<Scalar>& w, const std::vector<float>& pixels)
{
    RowVec<Scalar> m = vit_forward(w, pixels).rows.colwise().mean();
    return m / m.norm();
}

template <typename Scalar>
struct TextCache {
    StackCache<Scalar> blocks;
    LayerNormCache<Scalar> lnf;
    Tokens tokens;
};

template <typename Scalar>
RowVec<Scalar> text_embedding(const TextTower<Scalar>& t, const Tokens& tokens, TextCache<Scalar>* cache = nullptr,
                              Mat<Scalar>* rows_out = nullptr)
{
    if (tokens.empty() || static_cast<Eigen::Index>(tokens.size()) > t.pos.rows())
        throw ContextOverflow("text tower: caption length out of range");
    Mat<Scalar> x(static_cast<Eigen::Index>(tokens.size()), t.tok_emb.cols());
    for (std::size_t i = 0; i < tokens.size(); ++i)
        x.row(static_cast<Eigen::Index>(i)) = t.tok_emb.row(tokens[i]);
    x += t.pos.topRows(x.rows());
    Mat<Scalar> h = stack_forward(t.tf, x, cache ? &cache->blocks : nullptr);
    LayerNormCache<Scalar> lnc;
    Mat<Scalar> z = layer_norm(h, t.lnf_g, t.lnf_b, cache ? &cache->lnf : &lnc);
    if (cache)
        cache->tokens = tokens;
    if (rows_out)
        *rows_out = z;
    return z.colwise().mean();
}

/// Symmetric InfoNCE over a batch; accumulates gradients of the batch-mean
/// loss into `grads` when non-null.
template <typename Scalar>
double contrastive_loss(const ContrastiveModel<Scalar>& m, const std::vector<const ContrastivePair*>& batch,
                        ContrastiveModel<Scalar>* grads)
{
    const Eigen::Index B = static_cast<Eigen::Index>(batch.size());
    if (B < 2)
        throw PreconditionError("contrastive batch needs at least 2 pairs");
    const Eigen::Index d = m.vit.cfg.d_vis;
    std::vector<ViTCache<Scalar>> vc(static_cast<std::size_t>(B));
    std::vector<TextCache<Scalar>> tc(static_cast<std::size_t>(B));
    Mat<Scalar> img_mean(B, d), txt_mean(B, d);
    for (Eigen::Index i = 0; i < B; ++i) {
        const auto& p = *batch[static_cast<std::size_t>(i)];
        img_mean.row(i) = vit_forward(m.vit, p.pixels, grads ? &vc[static_cast<std::size_t>(i)] : nullptr)
                              .rows.colwise()
                              .mean();
        txt_mean.row(i) = text_embedding(m.text, p.caption, grads ? &tc[static_cast<std::size_t>(i)] : nullptr);
    }
    Vec<Scalar> in = img_mean.rowwise().norm(), tn = txt_mean.rowwise().norm();
    Mat<Scalar> u = in.cwiseInverse().asDiagonal() * img_mean;
    Mat<Scalar> v = tn.cwiseInverse().asDiagonal() * txt_mean;
    const Scalar scale = std::exp(m.log_scale(0, 0));
    Mat<Scalar> logits = scale * (u * v.transpose());

    std::vector<int> diag(static_cast<std::size_t>(B));
    for (Eigen::Index i = 0; i < B; ++i)
        diag[static_cast<std::size_t>(i)] = static_cast<int>(i);
    const Scalar w = Scalar(0.5) / Scalar(B);
    Mat<Scalar> d_rows, d_cols;
    double loss = cross_entropy<Scalar>(logits, diag, grads ? &d_rows : nullptr, w);
    Mat<Scalar> lt = logits.transpose();
    loss += cross_entropy<Scalar>(lt, diag, grads ? &d_cols : nullptr, w);
    loss *= 0.5 / static_cast<double>(B);
    if (!grads)
        return loss;

    Mat<Scalar> dlogits = d_rows + d_cols.transpose();
    grads->log_scale(0, 0) += (dlogits.array() * logits.array()).sum();
    Mat<Scalar> du = scale * (dlogits * v);
    Mat<Scalar> dv = scale * (dlogits.transpose() * u);
    for (Eigen::Index i = 0; i < B; ++i) {
        const auto k = static_cast<std::size_t>(i);
        RowVec<Scalar> dm_i = (du.row(i) - u.row(i) * u.row(i).dot(du.row(i))) / in(i);
        Mat<Scalar> drows = Mat<Scalar>::Zero(m.vit.cfg.n_patches(), d);
        drows.rowwise() = dm_i / Scalar(m.vit.cfg.n_patches());
        vit_backward(m.vit, vc[k], drows, grads->vit);

        RowVec<Scalar> dt_i = (dv.row(i) - v.row(i) * v.row(i).dot(dv.row(i))) / tn(i);
        const auto T = static_cast<Eigen::Index>(tc[k].tokens.size());
        Mat<Scalar> dz(T, d);
        dz.rowwise() = dt_i / Scalar(T);
        Mat<Scalar> dh = layer_norm_backward(dz, m.text.lnf_g, tc[k].lnf, &grads->text.lnf_g, &grads->text.lnf_b);
        Mat<Scalar> dx = stack_backward(m.text.tf, tc[k].blocks, dh, &grads->text.tf);
        grads->text.pos.topRows(T) += dx;
        for (Eigen::Index t = 0; t < T; ++t)
            grads->text.tok_emb.row(tc[k].tokens[static_cast<std::size_t>(t)]) += dx.row(t);
    }
    return loss;
}

struct ContrastiveOptions {
    int epochs = 6;
    int batch_size = 64;
    double lr = 2e-3;
    int warmup_steps = 50;
    double temperature = 0.07;
    std::uint64_t seed = 0;
    int max_caption_len = 72;
    std::size_t val_pairs = 512;
    int retrieval_candidates = 256;
};

struct ContrastiveResult {
    ViTWeights<float> vit;
    TextTower<float> text;  // kept only for diagnostics; not part of the frozen backbone
    double final_loss = 0.0;
    double val_recall_at_1 = 0.0;
    long steps = 0;
};

/// Image-to-caption recall@1 inside consecutive blocks of `candidates` pairs.
double retrieval_recall_at_1(const ViTWeights<float>& vit, const TextTower<float>& text,
                             const std::vector<ContrastivePair>& pairs, int candidates);

ContrastiveResult train_contrastive(const std::vector<ContrastivePair>& pairs, const ViTConfig& cfg,
                                    const ContrastiveOptions& opt, const ProgressFn& progress = {});

/// Contrastive pretraining pairs: an image with the caption naming every cell.
std::vector<ContrastivePair> contrastive_pairs(std::size_t n, std::uint64_t seed, double density);
/// Pairs from dataset records: the image regenerated from its seed, the text as caption.
std::vector<ContrastivePair> contrastive_pairs(const std::vector<DatasetRecord>& records);

void save_vit(const std::filesystem::path& path, const ViTWeights<float>& w);
ViTWeights<float> load_vit(const std::filesystem::path& path);

}  // namespace xmp
