#pragma once

// Dense building blocks with hand-written backward passes. Every layer is
// templated on the scalar so training runs in float and gradient checks in
// double through the same code.

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "xmp/dense.hpp"
#include "xmp/rng.hpp"

namespace xmp {

template <typename Scalar>
struct LayerNormCache {
    Mat<Scalar> xhat;
    Vec<Scalar> rstd;
};

/// Row-wise layer norm; gamma and beta are 1 x d.
template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const Mat<Scalar>& gamma, const Mat<Scalar>& beta,
                       LayerNormCache<Scalar>* cache = nullptr)
{
    const Scalar eps = Scalar(1e-5);
    const Eigen::Index d = x.cols();
    Vec<Scalar> mean = x.rowwise().mean();
    Mat<Scalar> xc = x.colwise() - mean;
    Vec<Scalar> var = xc.rowwise().squaredNorm() / Scalar(d);
    Vec<Scalar> rstd = (var.array() + eps).rsqrt().matrix();
    Mat<Scalar> xhat = rstd.asDiagonal() * xc;
    Mat<Scalar> y = ((xhat.array().rowwise() * gamma.row(0).array()).rowwise() + beta.row(0).array()).matrix();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return y;
}

/// Returns dx; accumulates into dgamma/dbeta when they are non-null.
template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const Mat<Scalar>& gamma, const LayerNormCache<Scalar>& c,
                                Mat<Scalar>* dgamma, Mat<Scalar>* dbeta)
{
    const Scalar d = Scalar(dy.cols());
    if (dgamma)
        *dgamma += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    if (dbeta)
        *dbeta += dy.colwise().sum();
    Mat<Scalar> dxhat = (dy.array().rowwise() * gamma.row(0).array()).matrix();
    Vec<Scalar> mean_d = dxhat.rowwise().sum() / d;
    Vec<Scalar> mean_dx = (dxhat.array() * c.xhat.array()).rowwise().sum().matrix() / d;
    Mat<Scalar> dx = dxhat.colwise() - mean_d;
    dx -= (c.xhat.array().colwise() * mean_dx.array()).matrix();
    return c.rstd.asDiagonal() * dx;
}

template <typename Scalar>
Scalar gelu(Scalar x)
{
    const Scalar k = Scalar(0.7978845608028654);
    return Scalar(0.5) * x * (Scalar(1) + std::tanh(k * (x + Scalar(0.044715) * x * x * x)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x)
{
    const Scalar k = Scalar(0.7978845608028654);
    const Scalar u = k * (x + Scalar(0.044715) * x * x * x);
    const Scalar t = std::tanh(u);
    const Scalar du = k * (Scalar(1) + Scalar(3 * 0.044715) * x * x);
    return Scalar(0.5) * (Scalar(1) + t) + Scalar(0.5) * x * (Scalar(1) - t * t) * du;
}

/// In-place row softmax; when `causal`, entries above the diagonal are zero.
template <typename Scalar>
void softmax_rows(Mat<Scalar>& s, bool causal)
{
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        const Eigen::Index n = causal ? i + 1 : s.cols();
        auto row = s.row(i).head(n);
        const Scalar m = row.maxCoeff();
        row = (row.array() - m).exp().matrix();
        row /= row.sum();
        if (n < s.cols())
            s.row(i).tail(s.cols() - n).setZero();
    }
}

/// Cross entropy of softmax(logits.row(t)) against targets[t]; rows with a
/// negative target are ignored. Returns the summed loss; writes dlogits of
/// that sum (scaled by `scale`) when requested.
template <typename Scalar>
double cross_entropy(const Mat<Scalar>& logits, const std::vector<int>& targets, Mat<Scalar>* dlogits,
                     Scalar scale = Scalar(1))
{
    double loss = 0.0;
    if (dlogits)
        dlogits->setZero(logits.rows(), logits.cols());
    for (Eigen::Index t = 0; t < logits.rows(); ++t) {
        const int y = targets[static_cast<std::size_t>(t)];
        if (y < 0)
            continue;
        const Scalar m = logits.row(t).maxCoeff();
        RowVec<Scalar> e = (logits.row(t).array() - m).exp().matrix();
        const Scalar z = e.sum();
        loss += static_cast<double>(std::log(z) + m - logits(t, y));
        if (dlogits) {
            dlogits->row(t) = e * (scale / z);
            (*dlogits)(t, y) -= scale;
        }
    }
    return loss;
}

struct TransformerConfig {
    int d_model = 64;
    int n_heads = 4;
    int d_ff = 256;
    int n_layers = 8;
    bool causal = true;
};

template <typename Scalar>
struct BlockParams {
    Mat<Scalar> ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;

    BlockParams() = default;
    BlockParams(int d, int f)
        : ln1_g(Mat<Scalar>::Ones(1, d)), ln1_b(Mat<Scalar>::Zero(1, d)), wq(Mat<Scalar>::Zero(d, d)),
          wk(Mat<Scalar>::Zero(d, d)), wv(Mat<Scalar>::Zero(d, d)), wo(Mat<Scalar>::Zero(d, d)),
          ln2_g(Mat<Scalar>::Ones(1, d)), ln2_b(Mat<Scalar>::Zero(1, d)), w1(Mat<Scalar>::Zero(d, f)),
          b1(Mat<Scalar>::Zero(1, f)), w2(Mat<Scalar>::Zero(f, d)), b2(Mat<Scalar>::Zero(1, d))
    {
    }

    void append_tensors(const std::string& prefix, TensorList<Scalar>& out)
    {
        out.insert(out.end(), {{prefix + "ln1_g", &ln1_g}, {prefix + "ln1_b", &ln1_b}, {prefix + "wq", &wq},
                               {prefix + "wk", &wk}, {prefix + "wv", &wv}, {prefix + "wo", &wo},
                               {prefix + "ln2_g", &ln2_g}, {prefix + "ln2_b", &ln2_b}, {prefix + "w1", &w1},
                               {prefix + "b1", &b1}, {prefix + "w2", &w2}, {prefix + "b2", &b2}});
    }

    /// GPT-2 style init: N(0, 0.02), output projections scaled by depth.
    void init(Rng& rng, int n_layers)
    {
        const double s = 0.02, so = 0.02 / std::sqrt(2.0 * n_layers);
        fill_normal(wq, rng, s);
        fill_normal(wk, rng, s);
        fill_normal(wv, rng, s);
        fill_normal(wo, rng, so);
        fill_normal(w1, rng, s);
        fill_normal(w2, rng, so);
    }
};

template <typename Scalar>
struct BlockCache {
    Mat<Scalar> x;
    LayerNormCache<Scalar> ln1, ln2;
    Mat<Scalar> z1, q, k, v, o, z2, pre, act;
    std::vector<Mat<Scalar>> probs;
};

/// Pre-norm block: h = x + Attn(LN1(x)); y = h + MLP(LN2(h)).
template <typename Scalar>
Mat<Scalar> block_forward(const BlockParams<Scalar>& p, const TransformerConfig& cfg, const Mat<Scalar>& x,
                          BlockCache<Scalar>* cache)
{
    BlockCache<Scalar> local;
    BlockCache<Scalar>& c = cache ? *cache : local;
    const int dh = cfg.d_model / cfg.n_heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    const Eigen::Index T = x.rows();

    c.z1 = layer_norm(x, p.ln1_g, p.ln1_b, &c.ln1);
    c.q.noalias() = c.z1 * p.wq;
    c.k.noalias() = c.z1 * p.wk;
    c.v.noalias() = c.z1 * p.wv;
    c.o.resize(T, cfg.d_model);
    c.probs.resize(static_cast<std::size_t>(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
        auto& pr = c.probs[static_cast<std::size_t>(h)];
        pr.noalias() = c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose();
        pr *= scale;
        softmax_rows(pr, cfg.causal);
        c.o.middleCols(h * dh, dh).noalias() = pr * c.v.middleCols(h * dh, dh);
    }
    Mat<Scalar> h = x;
    h.noalias() += c.o * p.wo;
    c.z2 = layer_norm(h, p.ln2_g, p.ln2_b, &c.ln2);
    c.pre.noalias() = c.z2 * p.w1;
    c.pre.rowwise() += p.b1.row(0);
    c.act = c.pre.unaryExpr([](Scalar v) { return gelu(v); });
    Mat<Scalar> y = h;
    y.noalias() += c.act * p.w2;
    y.rowwise() += p.b2.row(0);
    if (cache)
        c.x = x;
    return y;
}

/// Backward through one block. `grads` may be null when only the input
/// gradient is needed.
template <typename Scalar>
Mat<Scalar> block_backward(const BlockParams<Scalar>& p, const TransformerConfig& cfg, const BlockCache<Scalar>& c,
                           const Mat<Scalar>& dy, BlockParams<Scalar>* grads)
{
    const int dh = cfg.d_model / cfg.n_heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

    // MLP
    if (grads) {
        grads->b2 += dy.colwise().sum();
        grads->w2.noalias() += c.act.transpose() * dy;
    }
    Mat<Scalar> dpre = dy * p.w2.transpose();
    dpre.array() *= c.pre.unaryExpr([](Scalar v) { return gelu_grad(v); }).array();
    if (grads) {
        grads->b1 += dpre.colwise().sum();
        grads->w1.noalias() += c.z2.transpose() * dpre;
    }
    Mat<Scalar> dz2 = dpre * p.w1.transpose();
    Mat<Scalar> dh_ = dy + layer_norm_backward(dz2, p.ln2_g, c.ln2, grads ? &grads->ln2_g : nullptr,
                                               grads ? &grads->ln2_b : nullptr);

    // Attention
    if (grads)
        grads->wo.noalias() += c.o.transpose() * dh_;
    Mat<Scalar> d_o = dh_ * p.wo.transpose();
    Mat<Scalar> dq(c.q.rows(), c.q.cols()), dk(c.k.rows(), c.k.cols()), dv(c.v.rows(), c.v.cols());
    for (int h = 0; h < cfg.n_heads; ++h) {
        const auto& pr = c.probs[static_cast<std::size_t>(h)];
        auto doh = d_o.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh).noalias() = pr.transpose() * doh;
        Mat<Scalar> dp = doh * c.v.middleCols(h * dh, dh).transpose();
        Vec<Scalar> rs = (dp.array() * pr.array()).rowwise().sum().matrix();
        Mat<Scalar> ds = (pr.array() * (dp.colwise() - rs).array()).matrix() * scale;
        dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    if (grads) {
        grads->wq.noalias() += c.z1.transpose() * dq;
        grads->wk.noalias() += c.z1.transpose() * dk;
        grads->wv.noalias() += c.z1.transpose() * dv;
    }
    Mat<Scalar> dz1 = dq * p.wq.transpose();
    dz1.noalias() += dk * p.wk.transpose();
    dz1.noalias() += dv * p.wv.transpose();
    return dh_ + layer_norm_backward(dz1, p.ln1_g, c.ln1, grads ? &grads->ln1_g : nullptr,
                                     grads ? &grads->ln1_b : nullptr);
}

/// Stack of blocks sharing one configuration.
template <typename Scalar>
struct TransformerParams {
    TransformerConfig cfg;
    std::vector<BlockParams<Scalar>> blocks;

    TransformerParams() = default;
    explicit TransformerParams(const TransformerConfig& c) : cfg(c)
    {
        for (int l = 0; l < c.n_layers; ++l)
            blocks.emplace_back(c.d_model, c.d_ff);
    }

    void append_tensors(const std::string& prefix, TensorList<Scalar>& out)
    {
        for (std::size_t l = 0; l < blocks.size(); ++l)
            blocks[l].append_tensors(prefix + "block" + std::to_string(l) + ".", out);
    }

    void init(Rng& rng)
    {
        for (auto& b : blocks)
            b.init(rng, cfg.n_layers);
    }
};

template <typename Scalar>
using StackCache = std::vector<BlockCache<Scalar>>;

/// Runs every block. `residuals`, when non-null, receives the residual stream
/// after each block (index l-1 holds layer l).
template <typename Scalar>
Mat<Scalar> stack_forward(const TransformerParams<Scalar>& p, const Mat<Scalar>& x, StackCache<Scalar>* cache,
                          std::vector<Mat<Scalar>>* residuals = nullptr)
{
    if (cache)
        cache->resize(p.blocks.size());
    Mat<Scalar> h = x;
    for (std::size_t l = 0; l < p.blocks.size(); ++l) {
        h = block_forward(p.blocks[l], p.cfg, h, cache ? &(*cache)[l] : nullptr);
        if (residuals)
            residuals->push_back(h);
    }
    return h;
}

template <typename Scalar>
Mat<Scalar> stack_backward(const TransformerParams<Scalar>& p, const StackCache<Scalar>& cache, const Mat<Scalar>& dy,
                           TransformerParams<Scalar>* grads)
{
    Mat<Scalar> d = dy;
    for (std::size_t l = p.blocks.size(); l-- > 0;)
        d = block_backward(p.blocks[l], p.cfg, cache[l], d, grads ? &grads->blocks[l] : nullptr);
    return d;
}

/// Adam with bias correction over a flat list of parameter tensors.
template <typename Scalar>
class Adam {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit Adam(const TensorList<Scalar>& params)
    {
        for (auto& [name, t] : params) {
            m_.push_back(Mat<Scalar>::Zero(t->rows(), t->cols()));
            v_.push_back(Mat<Scalar>::Zero(t->rows(), t->cols()));
        }
    }

    void step(const TensorList<Scalar>& params, const TensorList<Scalar>& grads, double lr)
    {
        ++t_;
        const double c1 = 1.0 - std::pow(beta1, t_);
        const double c2 = 1.0 - std::pow(beta2, t_);
        const Scalar b1 = Scalar(beta1), b2 = Scalar(beta2);
        const Scalar step_size = Scalar(lr * std::sqrt(c2) / c1);
        const Scalar e = Scalar(eps * std::sqrt(c2));
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& g = *grads[i].second;
            m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
            v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
            params[i].second->array() -= step_size * m_[i].array() / (v_[i].array().sqrt() + e);
        }
    }

    long steps() const { return t_; }

private:
    std::vector<Mat<Scalar>> m_, v_;
    long t_ = 0;
};

}  // namespace xmp
