#include "xmp/tinylm.hpp"

#include <cmath>
#include <numbers>

namespace xmp {

void LMConfig::validate() const
{
    if (d_model <= 0 || n_heads <= 0 || d_model % n_heads != 0)
        throw PreconditionError("d_model must be a positive multiple of n_heads");
    if (n_layers < 1 || d_ff < 1 || vocab_size < Tokenizer::kNumSpecials)
        throw PreconditionError("invalid LM configuration");
    if (max_context < 2)
        throw PreconditionError("max_context too small");
}

nlohmann::json LMConfig::to_json() const
{
    return {{"kind", "lm"},           {"d_model", d_model},       {"n_layers", n_layers},
            {"n_heads", n_heads},     {"d_ff", d_ff},             {"vocab_size", vocab_size},
            {"max_context", max_context}};
}

LMConfig LMConfig::from_json(const nlohmann::json& j)
{
    if (j.value("kind", "") != "lm")
        throw FormatError("not a language-model checkpoint");
    LMConfig c;
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.d_ff = j.at("d_ff");
    c.vocab_size = j.at("vocab_size");
    c.max_context = j.at("max_context");
    c.validate();
    return c;
}

std::string group_tag_name(PositionGroup g)
{
    switch (g) {
    case PositionGroup::Bos: return "bos";
    case PositionGroup::Visual: return "visual";
    case PositionGroup::Text: return "text";
    }
    return "?";
}

Tokens wrap_document(const Tokens& tokens)
{
    Tokens out;
    out.reserve(tokens.size() + 2);
    out.push_back(Tokenizer::kBos);
    out.insert(out.end(), tokens.begin(), tokens.end());
    out.push_back(Tokenizer::kEos);
    return out;
}

double unigram_entropy(const std::vector<Tokens>& docs)
{
    std::map<TokenId, double> counts;
    double n = 0;
    for (auto& d : docs)
        for (std::size_t i = 1; i < d.size(); ++i) {
            counts[d[i]] += 1;
            n += 1;
        }
    double h = 0;
    for (auto& [t, c] : counts)
        h -= (c / n) * std::log(c / n);
    return h;
}

LMTrainResult train_lm(const std::vector<Tokens>& docs, const LMConfig& cfg, const LMTrainOptions& opt,
                       const ProgressFn& progress)
{
    if (docs.empty())
        throw PreconditionError("train_lm: empty corpus");
    cfg.validate();
    for (const auto& d : docs)
        if (d.size() < 2 || d.front() != Tokenizer::kBos || d.back() != Tokenizer::kEos)
            throw PreconditionError("train_lm: documents must be wrapped as [BOS] ... [EOS]");

    Rng rng(derive_seed(opt.seed, "lm-train"));
    std::vector<std::size_t> order(docs.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    shuffle(order, rng);
    std::size_t n_val = static_cast<std::size_t>(opt.val_fraction * static_cast<double>(docs.size()));
    if (docs.size() < 20)
        n_val = 0;
    std::vector<Tokens> val, train;
    for (std::size_t i = 0; i < order.size(); ++i)
        (i < n_val ? val : train).push_back(docs[order[i]]);

    LMTrainResult res;
    res.unigram_entropy = unigram_entropy(train);
    res.weights = LMWeights<float>(cfg);
    Rng init_rng(derive_seed(opt.seed, "lm-init"));
    res.weights.init(init_rng);

    auto params = res.weights.tensors();
    LMWeights<float> grads(cfg);
    auto glist = grads.tensors();
    Adam<float> adam(params);

    const std::size_t bs = static_cast<std::size_t>(opt.batch_size);
    const long steps_per_epoch = static_cast<long>((train.size() + bs - 1) / bs);
    long total = steps_per_epoch * opt.epochs;
    if (opt.max_steps >= 0)
        total = std::min<long>(total, opt.max_steps);

    std::vector<std::size_t> idx(train.size());
    double ema = 0.0;
    long step = 0;
    for (int epoch = 0; epoch < opt.epochs && step < total; ++epoch) {
        for (std::size_t i = 0; i < idx.size(); ++i)
            idx[i] = i;
        shuffle(idx, rng);
        for (std::size_t b = 0; b < idx.size() && step < total; b += bs) {
            std::vector<Tokens> batch;
            for (std::size_t k = b; k < std::min(b + bs, idx.size()); ++k)
                batch.push_back(train[idx[k]]);
            zero_tensors(glist);
            double loss = lm_batch_loss(res.weights, batch, &grads);
            if (!std::isfinite(loss))
                throw Divergence("train_lm: non-finite loss at step " + std::to_string(step));
            double lr = opt.lr;
            if (step < opt.warmup_steps)
                lr *= static_cast<double>(step + 1) / opt.warmup_steps;
            else if (total > opt.warmup_steps) {
                double p = static_cast<double>(step - opt.warmup_steps) / static_cast<double>(total - opt.warmup_steps);
                lr *= opt.min_lr_fraction + (1 - opt.min_lr_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * p));
            }
            adam.step(params, glist, lr);
            ema = step == 0 ? loss : 0.98 * ema + 0.02 * loss;
            res.final_train_loss = loss;
            ++step;
            if (progress && step % 100 == 0)
                progress("lm step " + std::to_string(step) + "/" + std::to_string(total) +
                         " loss " + std::to_string(ema));
        }
    }
    if (!all_finite(params))
        throw Divergence("train_lm: non-finite parameters");
    res.steps = step;
    res.val_loss = val.empty() ? lm_batch_loss<float>(res.weights, train, nullptr)
                               : lm_batch_loss<float>(res.weights, val, nullptr);
    return res;
}

void save_lm(const std::filesystem::path& path, const LMWeights<float>& w)
{
    save_tensor_file(path, to_tensor_file(w.tensors(), w.cfg.to_json()));
}

LMWeights<float> load_lm(const std::filesystem::path& path)
{
    auto f = load_tensor_file(path);
    LMWeights<float> w(LMConfig::from_json(f.config));
    from_tensor_file(f, w.tensors());
    return w;
}

}  // namespace xmp
