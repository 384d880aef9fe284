#include "xmp/adapter.hpp"

#include <cmath>
#include <sstream>

#include "xmp/tokenizer.hpp"

namespace xmp {

VLMText format_vlm_text(const std::string& instruction, const std::string& answer)
{
    const auto& tok = default_tokenizer();
    VLMText t;
    t.tokens = format_vlm_prompt(instruction);
    t.answer_begin = static_cast<int>(t.tokens.size());
    Tokens a = tok.tokenize(answer);
    t.tokens.insert(t.tokens.end(), a.begin(), a.end());
    t.tokens.push_back(Tokenizer::kEos);
    return t;
}

Tokens format_vlm_prompt(const std::string& instruction)
{
    Tokens t{Tokenizer::kSep};
    Tokens i = default_tokenizer().tokenize(instruction);
    t.insert(t.end(), i.begin(), i.end());
    t.push_back(Tokenizer::kSep);
    return t;
}

std::vector<int> answer_targets(const VLMText& text)
{
    const int offset = 1 + kVisualTokens;
    const int T = offset + static_cast<int>(text.tokens.size());
    std::vector<int> targets(static_cast<std::size_t>(T), -1);
    for (int j = text.answer_begin; j < static_cast<int>(text.tokens.size()); ++j)
        targets[static_cast<std::size_t>(offset + j - 1)] = text.tokens[static_cast<std::size_t>(j)];
    return targets;
}

std::vector<VLMItem> prepare_items(const ViTWeights<float>& vit, const std::vector<MMExample>& examples)
{
    const auto& tok = default_tokenizer();
    std::vector<VLMItem> items;
    items.reserve(examples.size());
    for (const auto& ex : examples) {
        VLMItem it;
        it.patch_rows = vit_forward(vit, ex.image.pixels).rows;
        it.text = format_vlm_text(ex.instruction, ex.answer);
        it.prompt = format_vlm_prompt(ex.instruction);
        it.answer = tok.tokenize(ex.answer);
        it.concepts = ex.image.concepts;
        items.push_back(std::move(it));
    }
    return items;
}

AdapterTrainOptions stage1_options(std::uint64_t seed)
{
    AdapterTrainOptions o;
    o.stage = 1;
    o.lr = 1e-3;
    o.epochs = 1;
    o.batch_size = 32;
    o.warmup_ratio = 0.03;
    o.seed = seed;
    return o;
}

AdapterTrainOptions stage2_options(std::uint64_t seed)
{
    AdapterTrainOptions o;
    o.stage = 2;
    o.lr = 2e-5;
    o.epochs = 3;
    o.batch_size = 16;
    o.warmup_ratio = 0.0;
    o.seed = seed;
    return o;
}

AdapterWeights<float> random_adapter(const LMWeights<float>& lm, const ViTWeights<float>& vit, std::uint64_t seed)
{
    AdapterWeights<float> a(vit.cfg.d_vis, lm.cfg.d_model);
    Rng rng(derive_seed(seed, "adapter_init"));
    a.init(rng);
    return a;
}

namespace {

int answer_token_count(const VLMItem& it)
{
    return static_cast<int>(it.text.tokens.size()) - it.text.answer_begin;
}

}  // namespace

AdapterTrainResult train_adapter(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                 const std::vector<VLMItem>& items, const AdapterWeights<float>& init,
                                 const AdapterTrainOptions& opt, const ProgressFn& progress)
{
    if (opt.batch_size <= 0 || opt.epochs < 0 || opt.lr < 0)
        throw PreconditionError("invalid adapter training options");
    if (init.d_model != lm.cfg.d_model || init.d_vis != vit.cfg.d_vis)
        throw ShapeMismatch("adapter shape does not match backbones");
    AdapterTrainResult res;
    res.lm_checksum = lm.checksum();
    res.vit_checksum = vit.checksum();
    res.weights = init;
    if (items.empty() || opt.epochs == 0)
        return res;

    AdapterWeights<float> grads(init.d_vis, init.d_model);
    Adam<float> adam(res.weights.tensors());
    Rng rng(derive_seed(opt.seed, "adapter_stage_" + std::to_string(opt.stage)));
    std::vector<std::size_t> order(items.size());
    for (std::size_t i = 0; i < order.size(); ++i)
        order[i] = i;
    const long steps_per_epoch = static_cast<long>((items.size() + opt.batch_size - 1) / opt.batch_size);
    const long total_steps = steps_per_epoch * opt.epochs;
    const long warmup = static_cast<long>(std::ceil(opt.warmup_ratio * static_cast<double>(total_steps)));

    for (int ep = 0; ep < opt.epochs; ++ep) {
        shuffle(order, rng);
        double epoch_loss = 0.0;
        long epoch_tokens = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            int n_tok = 0;
            for (std::size_t k = start; k < end; ++k)
                n_tok += answer_token_count(items[order[k]]);
            zero_tensors(grads.tensors());
            double batch_loss = 0.0;
            const float scale = 1.0f / static_cast<float>(std::max(n_tok, 1));
            for (std::size_t k = start; k < end; ++k) {
                const auto& it = items[order[k]];
                batch_loss += vlm_example_loss(lm, it.patch_rows, it.text, res.weights, &grads, scale);
            }
            if (!std::isfinite(batch_loss) || !all_finite(grads.tensors()))
                throw Divergence("adapter stage " + std::to_string(opt.stage) + " diverged at step " +
                                 std::to_string(res.steps));
            ++res.steps;
            double lr = opt.lr;
            if (res.steps <= warmup)
                lr *= static_cast<double>(res.steps) / static_cast<double>(warmup);
            if (lr > 0.0)
                adam.step(res.weights.tensors(), grads.tensors(), lr);
            epoch_loss += batch_loss;
            epoch_tokens += n_tok;
        }
        const double mean = epoch_loss / static_cast<double>(std::max<long>(epoch_tokens, 1));
        if (ep == 0)
            res.first_epoch_loss = mean;
        res.final_epoch_loss = mean;
        if (lm.checksum() != res.lm_checksum)
            throw FrozenWeightViolation("LM weights changed during adapter stage " + std::to_string(opt.stage));
        if (vit.checksum() != res.vit_checksum)
            throw FrozenWeightViolation("ViT weights changed during adapter stage " + std::to_string(opt.stage));
        if (progress) {
            std::ostringstream os;
            os << "adapter stage " << opt.stage << " epoch " << ep + 1 << "/" << opt.epochs << " loss " << mean;
            progress(os.str());
        }
    }
    return res;
}

AdapterTrainResult train_stage1(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                const std::vector<VLMItem>& items, const AdapterTrainOptions& opt,
                                const ProgressFn& progress)
{
    return train_adapter(lm, vit, items, random_adapter(lm, vit, opt.seed), opt, progress);
}

AdapterTrainResult train_stage2(const LMWeights<float>& lm, const ViTWeights<float>& vit,
                                const std::vector<VLMItem>& items, const AdapterWeights<float>& stage1,
                                const AdapterTrainOptions& opt, const ProgressFn& progress)
{
    return train_adapter(lm, vit, items, stage1, opt, progress);
}

double mean_answer_loss(const LMWeights<float>& lm, const std::vector<VLMItem>& items, const AdapterWeights<float>& a)
{
    double loss = 0.0;
    long n = 0;
    for (const auto& it : items) {
        loss += vlm_example_loss(lm, it.patch_rows, it.text, a, static_cast<AdapterWeights<float>*>(nullptr));
        n += answer_token_count(it);
    }
    return n > 0 ? loss / static_cast<double>(n) : 0.0;
}

Tokens greedy_answer(const LMWeights<float>& lm, const MatF& patch_rows, const Tokens& prompt,
                     const AdapterWeights<float>& a, int max_new)
{
    Tokens text = prompt;
    Tokens out;
    const int limit = std::min(max_new, lm.cfg.max_context - 1 - kVisualTokens - static_cast<int>(prompt.size()));
    for (int step = 0; step < limit; ++step) {
        auto seq = assemble_from_patches(lm, patch_rows, text, a);
        auto res = lm_forward(lm, seq.embeddings);
        Eigen::Index next = 0;
        res.logits.row(res.logits.rows() - 1).maxCoeff(&next);
        const auto t = static_cast<TokenId>(next);
        if (t == Tokenizer::kEos)
            break;
        out.push_back(t);
        text.push_back(t);
    }
    return out;
}

double exact_match_accuracy(const LMWeights<float>& lm, const std::vector<VLMItem>& items,
                            const AdapterWeights<float>& a)
{
    if (items.empty())
        return 0.0;
    int hits = 0;
    for (const auto& it : items)
        if (greedy_answer(lm, it.patch_rows, it.prompt, a, static_cast<int>(it.answer.size()) + 1) == it.answer)
            ++hits;
    return static_cast<double>(hits) / static_cast<double>(items.size());
}

void save_adapter(const std::filesystem::path& path, const AdapterWeights<float>& a, int stage)
{
    nlohmann::json cfg = {{"kind", "adapter"}, {"d_vis", a.d_vis}, {"d_model", a.d_model}, {"stage", stage}};
    save_tensor_file(path, to_tensor_file(a.tensors(), cfg));
}

AdapterWeights<float> load_adapter(const std::filesystem::path& path)
{
    auto f = load_tensor_file(path);
    if (f.config.value("kind", "") != "adapter")
        throw FormatError(path.string() + " is not an adapter checkpoint");
    AdapterWeights<float> a(f.config.at("d_vis"), f.config.at("d_model"));
    from_tensor_file(f, a.tensors());
    return a;
}

}  // namespace xmp
