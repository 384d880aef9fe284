#include "xmp/tinyvit.hpp"

#include <cmath>
#include <numbers>

namespace xmp {

void ViTConfig::validate() const
{
    if (patch_size <= 0 || image_side % patch_size != 0)
        throw PreconditionError("image side must be divisible by patch_size");
    if (d_vis <= 0 || n_heads <= 0 || d_vis % n_heads != 0)
        throw PreconditionError("d_vis must be a positive multiple of n_heads");
    if (n_layers < 1 || d_ff < 1 || channels < 1)
        throw PreconditionError("invalid ViT configuration");
}

nlohmann::json ViTConfig::to_json() const
{
    return {{"kind", "vit"},       {"patch_size", patch_size}, {"d_vis", d_vis},
            {"n_layers", n_layers}, {"n_heads", n_heads},       {"d_ff", d_ff},
            {"image_side", image_side}, {"channels", channels}};
}

ViTConfig ViTConfig::from_json(const nlohmann::json& j)
{
    if (j.value("kind", "") != "vit")
        throw FormatError("not a vision-tower checkpoint");
    ViTConfig c;
    c.patch_size = j.at("patch_size");
    c.d_vis = j.at("d_vis");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_ff = j.at("d_ff");
    c.image_side = j.at("image_side");
    c.channels = j.at("channels");
    c.validate();
    return c;
}

double retrieval_recall_at_1(const ViTWeights<float>& vit, const TextTower<float>& text,
                             const std::vector<ContrastivePair>& pairs, int candidates)
{
    const std::size_t c = static_cast<std::size_t>(candidates);
    std::size_t hits = 0, total = 0;
    for (std::size_t start = 0; start + c <= pairs.size(); start += c) {
        MatF u(candidates, vit.cfg.d_vis), v(candidates, vit.cfg.d_vis);
        for (std::size_t i = 0; i < c; ++i) {
            u.row(static_cast<Eigen::Index>(i)) = image_summary(vit, pairs[start + i].pixels);
            RowVecF t = text_embedding(text, pairs[start + i].caption);
            v.row(static_cast<Eigen::Index>(i)) = t / t.norm();
        }
        MatF sim = u * v.transpose();
        for (Eigen::Index i = 0; i < sim.rows(); ++i) {
            Eigen::Index best;
            sim.row(i).maxCoeff(&best);
            hits += best == i;
            ++total;
        }
    }
    return total ? static_cast<double>(hits) / static_cast<double>(total) : 0.0;
}

ContrastiveResult train_contrastive(const std::vector<ContrastivePair>& pairs, const ViTConfig& cfg,
                                    const ContrastiveOptions& opt, const ProgressFn& progress)
{
    cfg.validate();
    if (opt.batch_size < 2)
        throw PreconditionError("contrastive training needs batch_size >= 2");
    const std::size_t n_val = pairs.size() > opt.val_pairs * 2 ? opt.val_pairs : 0;
    const std::size_t n_train = pairs.size() - n_val;
    if (n_train < 2)
        throw PreconditionError("contrastive training needs at least 2 pairs");

    ContrastiveModel<float> model(cfg, default_tokenizer().vocab_size(), opt.max_caption_len, opt.temperature);
    Rng init_rng(derive_seed(opt.seed, "vit-init"));
    model.vit.init(init_rng);
    model.text.init(init_rng);
    auto params = model.tensors();
    ContrastiveModel<float> grads = model;
    auto glist = grads.tensors();
    Adam<float> adam(params);

    Rng rng(derive_seed(opt.seed, "vit-train"));
    std::vector<std::size_t> idx(n_train);
    const std::size_t bs = static_cast<std::size_t>(opt.batch_size);
    const long total = static_cast<long>(n_train / bs) * opt.epochs;
    const float max_log_scale = std::log(100.0f);
    ContrastiveResult res;
    long step = 0;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        for (std::size_t i = 0; i < n_train; ++i)
            idx[i] = i;
        shuffle(idx, rng);
        for (std::size_t b = 0; b + bs <= n_train; b += bs) {
            std::vector<const ContrastivePair*> batch;
            for (std::size_t k = b; k < b + bs; ++k)
                batch.push_back(&pairs[idx[k]]);
            zero_tensors(glist);
            double loss = contrastive_loss(model, batch, &grads);
            if (!std::isfinite(loss))
                throw Divergence("train_contrastive: non-finite loss at step " + std::to_string(step));
            double lr = opt.lr;
            if (step < opt.warmup_steps)
                lr *= static_cast<double>(step + 1) / opt.warmup_steps;
            else if (total > opt.warmup_steps)
                lr *= 0.1 + 0.9 * 0.5 *
                                (1 + std::cos(std::numbers::pi * static_cast<double>(step - opt.warmup_steps) /
                                              static_cast<double>(total - opt.warmup_steps)));
            adam.step(params, glist, lr);
            model.log_scale(0, 0) = std::min(model.log_scale(0, 0), max_log_scale);
            res.final_loss = loss;
            ++step;
            if (progress && step % 50 == 0)
                progress("vit step " + std::to_string(step) + "/" + std::to_string(total) + " loss " +
                         std::to_string(loss));
        }
    }
    if (!all_finite(params))
        throw Divergence("train_contrastive: non-finite parameters");
    res.steps = step;
    res.vit = model.vit;
    res.text = model.text;
    if (n_val) {
        std::vector<ContrastivePair> val(pairs.end() - static_cast<long>(n_val), pairs.end());
        res.val_recall_at_1 = retrieval_recall_at_1(res.vit, res.text, val, opt.retrieval_candidates);
    }
    return res;
}

std::vector<ContrastivePair> contrastive_pairs(std::size_t n, std::uint64_t seed, double density)
{
    const auto& tok = default_tokenizer();
    std::vector<ContrastivePair> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        auto img = gen_image(derive_seed(seed, i), density);
        out.push_back({img.pixels, tok.tokenize(full_description(img))});
    }
    return out;
}

std::vector<ContrastivePair> contrastive_pairs(const std::vector<DatasetRecord>& records)
{
    const auto& tok = default_tokenizer();
    std::vector<ContrastivePair> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (!r.image_seed || !r.density)
            throw FormatError("contrastive record has no image");
        out.push_back({gen_image(*r.image_seed, *r.density).pixels, tok.tokenize(r.text)});
    }
    return out;
}

void save_vit(const std::filesystem::path& path, const ViTWeights<float>& w)
{
    save_tensor_file(path, to_tensor_file(w.tensors(), w.cfg.to_json()));
}

ViTWeights<float> load_vit(const std::filesystem::path& path)
{
    auto f = load_tensor_file(path);
    ViTWeights<float> w(ViTConfig::from_json(f.config));
    from_tensor_file(f, w.tensors());
    return w;
}

}  // namespace xmp
