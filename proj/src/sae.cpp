#include "xmp/sae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <queue>
#include <sstream>

#include "xmp/error.hpp"
#include "xmp/rng.hpp"
#include "xmp/tokenizer.hpp"

namespace xmp {

namespace {

SAEWeights<float> init_sae(const MatF& train, int layer, int m, Rng& rng)
{
    const int d = static_cast<int>(train.cols());
    SAEWeights<float> s(layer, d, m);
    fill_normal(s.w_dec, rng, 1.0);
    s.normalize_dictionary();
    s.w_enc = s.w_dec.transpose();
    s.b_dec = train.colwise().mean();
    const double rows = static_cast<double>(train.rows());
    const double var = (train.rowwise() - s.b_dec.row(0)).squaredNorm() / rows;
    const double power = train.squaredNorm() / rows;
    // Near-constant data falls back to the raw second moment.
    const double denom = var > 1e-6 * power ? var : power;
    s.input_scale = denom > 0 ? std::sqrt(d / denom) : 1.0;
    // Encoder rows scaled so initial pre-activations are O(1) on rescaled inputs.
    s.w_enc *= static_cast<float>(s.input_scale / std::sqrt(static_cast<double>(d)));
    return s;
}

int dead_features(const SAEWeights<float>& sae, const MatF& x)
{
    MatF f = encode(x, sae);
    int dead = 0;
    for (Eigen::Index j = 0; j < f.cols(); ++j)
        if ((f.col(j).array() > 0.0f).count() == 0)
            ++dead;
    return dead;
}

}  // namespace

SAETrainResult train_sae(const MatF& acts, int layer, double l1, const SAETrainOptions& opt)
{
    const Eigen::Index n = acts.rows();
    if (n < 10 * static_cast<Eigen::Index>(opt.d_sae))
        throw PreconditionError("train_sae: need at least 10 * d_sae activation vectors, got " + std::to_string(n));
    if (!acts.allFinite())
        throw PreconditionError("train_sae: non-finite activations");
    Rng rng(derive_seed(opt.seed, "sae_layer_" + std::to_string(layer)));
    std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
        order[static_cast<std::size_t>(i)] = i;
    shuffle(order, rng);
    const auto n_hold = static_cast<Eigen::Index>(std::max<double>(1.0, std::floor(opt.heldout_fraction * n)));
    const Eigen::Index n_train = n - n_hold;
    MatF train(n_train, acts.cols()), hold(n_hold, acts.cols());
    for (Eigen::Index i = 0; i < n_train; ++i)
        train.row(i) = acts.row(order[static_cast<std::size_t>(i)]);
    for (Eigen::Index i = 0; i < n_hold; ++i)
        hold.row(i) = acts.row(order[static_cast<std::size_t>(n_train + i)]);

    SAEWeights<float> sae = init_sae(train, layer, opt.d_sae, rng);
    sae.l1_coefficient = l1;
    SAEWeights<float> grads(layer, sae.d_model, sae.d_sae);
    Adam<float> adam(sae.tensors());
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(n_train));
    for (Eigen::Index i = 0; i < n_train; ++i)
        idx[static_cast<std::size_t>(i)] = i;
    MatF batch;
    for (int ep = 0; ep < opt.epochs; ++ep) {
        shuffle(idx, rng);
        for (Eigen::Index start = 0; start + opt.batch_size <= n_train; start += opt.batch_size) {
            batch.resize(opt.batch_size, train.cols());
            for (int b = 0; b < opt.batch_size; ++b)
                batch.row(b) = train.row(idx[static_cast<std::size_t>(start + b)]);
            zero_tensors(grads.tensors());
            const double loss = sae_objective(sae, batch, l1, &grads);
            if (!std::isfinite(loss))
                throw Divergence("SAE training diverged at layer " + std::to_string(layer));
            adam.step(sae.tensors(), grads.tensors(), static_cast<float>(opt.lr));
            sae.normalize_dictionary();
        }
    }

    SAETrainResult res;
    res.chosen.l1 = l1;
    res.chosen.heldout_fvu = fraction_of_variance_unexplained(sae, hold);
    res.chosen.heldout_l0_fraction = mean_l0_fraction(sae, hold);
    res.chosen.train_fvu = fraction_of_variance_unexplained(sae, train);
    res.chosen.dead_features = dead_features(sae, hold);
    res.attempts.push_back(res.chosen);
    res.sae = std::move(sae);
    res.meets_targets =
        res.chosen.heldout_fvu <= opt.fvu_target && res.chosen.heldout_l0_fraction <= opt.l0_target;
    return res;
}

SAETrainResult train_sae_sweep(const MatF& acts, int layer, const SAETrainOptions& opt)
{
    if (opt.l1_sweep.empty())
        throw PreconditionError("empty L1 sweep");
    std::vector<double> sweep = opt.l1_sweep;
    std::sort(sweep.rbegin(), sweep.rend());
    std::vector<SAEAttempt> attempts;
    std::optional<SAETrainResult> best;
    for (double l1 : sweep) {
        SAETrainResult r = train_sae(acts, layer, l1, opt);
        attempts.push_back(r.chosen);
        const bool fvu_ok = r.chosen.heldout_fvu <= opt.fvu_target;
        if (!best || fvu_ok || r.chosen.heldout_fvu < best->chosen.heldout_fvu)
            best = std::move(r);
        if (fvu_ok)
            break;
    }
    best->attempts = attempts;
    std::ostringstream diag;
    diag << "layer " << layer << ":";
    for (const auto& a : attempts)
        diag << " [l1 " << a.l1 << " fvu " << a.heldout_fvu << " l0 " << a.heldout_l0_fraction << " dead "
             << a.dead_features << "]";
    if (!best->meets_targets)
        diag << " targets not met (fvu <= " << opt.fvu_target << ", l0 <= " << opt.l0_target << ")";
    best->diagnostics = diag.str();
    return std::move(*best);
}

void save_sae(const std::filesystem::path& path, const SAEWeights<float>& sae)
{
    nlohmann::json cfg = {{"kind", "sae"},           {"layer", sae.layer},
                          {"d_model", sae.d_model},  {"d_sae", sae.d_sae},
                          {"l1", sae.l1_coefficient}, {"input_scale", sae.input_scale}};
    save_tensor_file(path, to_tensor_file(sae.tensors(), cfg));
}

SAEWeights<float> load_sae(const std::filesystem::path& path)
{
    auto f = load_tensor_file(path);
    if (f.config.value("kind", "") != "sae")
        throw FormatError(path.string() + " is not an SAE checkpoint");
    SAEWeights<float> s(f.config.at("layer"), f.config.at("d_model"), f.config.at("d_sae"));
    s.l1_coefficient = f.config.at("l1");
    s.input_scale = f.config.at("input_scale");
    from_tensor_file(f, s.tensors());
    return s;
}

std::filesystem::path sae_file_name(const std::filesystem::path& dir, int layer)
{
    return dir / ("sae_layer_" + std::to_string(layer) + ".bin");
}

bool FeatureDescription::mentions(Concept c) const
{
    return std::any_of(concepts.begin(), concepts.end(), [c](const ConceptScore& s) { return s.concept_id == c; });
}

namespace {

const std::vector<Tokens>& concept_token_seqs()
{
    static const std::vector<Tokens> seqs = [] {
        std::vector<Tokens> out;
        const auto& tok = default_tokenizer();
        for (Concept c = 0; c < kNumConcepts; ++c) {
            Tokens t;
            for (const auto& w : concept_words(c))
                t.push_back(tok.id(w));
            out.push_back(t);
        }
        return out;
    }();
    return seqs;
}

}  // namespace

bool window_mentions(const Tokens& doc, int lo, int hi, Concept c)
{
    const Tokens& needle = concept_token_seqs().at(static_cast<std::size_t>(c));
    lo = std::max(lo, 0);
    hi = std::min(hi, static_cast<int>(doc.size()) - 1);
    const int len = static_cast<int>(needle.size());
    for (int s = lo; s + len - 1 <= hi; ++s) {
        bool ok = true;
        for (int k = 0; k < len && ok; ++k)
            ok = doc[static_cast<std::size_t>(s + k)] == needle[static_cast<std::size_t>(k)];
        if (ok)
            return true;
    }
    return false;
}

std::vector<FeatureDescription> describe_features(const SAEWeights<float>& sae, const ActivationDump& corpus,
                                                  const DescribeOptions& opt)
{
    if (corpus.acts.cols() != sae.d_model)
        throw ShapeMismatch("describe_features: activation width does not match SAE");
    const std::vector<Eigen::Index> rows = corpus.non_bos_rows();
    const std::vector<Tokens> docs = corpus.documents();
    const int m = sae.d_sae;
    // Per-feature min-heap of (activation, -row) so ties keep the earlier row.
    using Entry = std::pair<float, Eigen::Index>;
    auto worse = [](const Entry& a, const Entry& b) {
        return a.first != b.first ? a.first > b.first : a.second < b.second;
    };
    std::vector<std::priority_queue<Entry, std::vector<Entry>, decltype(worse)>> heaps(
        static_cast<std::size_t>(m), std::priority_queue<Entry, std::vector<Entry>, decltype(worse)>(worse));
    std::vector<long> active(static_cast<std::size_t>(m), 0);
    const Eigen::Index chunk = 4096;
    for (Eigen::Index start = 0; start < static_cast<Eigen::Index>(rows.size()); start += chunk) {
        const Eigen::Index len = std::min<Eigen::Index>(chunk, static_cast<Eigen::Index>(rows.size()) - start);
        std::vector<Eigen::Index> sub(rows.begin() + start, rows.begin() + start + len);
        MatF f = encode(corpus.rows(sub), sae);
        for (Eigen::Index i = 0; i < len; ++i)
            for (int j = 0; j < m; ++j) {
                const float a = f(i, j);
                if (a <= 0.0f)
                    continue;
                ++active[static_cast<std::size_t>(j)];
                auto& h = heaps[static_cast<std::size_t>(j)];
                Entry e{a, sub[static_cast<std::size_t>(i)]};
                if (static_cast<int>(h.size()) < opt.top_contexts)
                    h.push(e);
                else if (worse(e, h.top())) {
                    h.pop();
                    h.push(e);
                }
            }
    }
    std::vector<FeatureDescription> out(static_cast<std::size_t>(m));
    const double total = static_cast<double>(rows.size());
    for (int j = 0; j < m; ++j) {
        auto& d = out[static_cast<std::size_t>(j)];
        d.feature = j;
        d.frequency = total > 0 ? active[static_cast<std::size_t>(j)] / total : 0.0;
        auto& h = heaps[static_cast<std::size_t>(j)];
        std::vector<Eigen::Index> ctx;
        while (!h.empty()) {
            ctx.push_back(h.top().second);
            h.pop();
        }
        d.contexts = static_cast<int>(ctx.size());
        if (d.contexts < opt.min_contexts)
            continue;
        d.described = true;
        for (Concept c = 0; c < kNumConcepts; ++c) {
            int hits = 0;
            for (Eigen::Index r : ctx) {
                const auto& t = corpus.tags[static_cast<std::size_t>(r)];
                if (window_mentions(docs[static_cast<std::size_t>(t.doc)], t.pos - opt.window, t.pos + opt.window, c))
                    ++hits;
            }
            const double p = static_cast<double>(hits) / d.contexts;
            if (p >= opt.precision_threshold)
                d.concepts.push_back({c, p, hits});
        }
        std::stable_sort(d.concepts.begin(), d.concepts.end(),
                         [](const ConceptScore& a, const ConceptScore& b) { return a.precision > b.precision; });
    }
    return out;
}

void save_descriptions_csv(const std::filesystem::path& path, const std::vector<FeatureDescription>& descs)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw Error("cannot write " + path.string());
    out.precision(9);
    out << "feature_id,frequency,concept,precision,support\n";
    for (const auto& d : descs) {
        if (!d.described)
            out << d.feature << ',' << d.frequency << ",UNDESCRIBED,0,0\n";
        else if (d.concepts.empty())
            out << d.feature << ',' << d.frequency << ",NONE,0," << d.contexts << '\n';
        for (const auto& c : d.concepts)
            out << d.feature << ',' << d.frequency << ',' << concept_name(c.concept_id) << ',' << c.precision << ','
                << c.support << '\n';
    }
}

std::vector<FeatureDescription> load_descriptions_csv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot read " + path.string());
    std::map<std::string, Concept> by_name;
    for (Concept c = 0; c < kNumConcepts; ++c)
        by_name[concept_name(c)] = c;
    std::string line;
    std::getline(in, line);
    if (line != "feature_id,frequency,concept,precision,support")
        throw FormatError("unexpected description header in " + path.string());
    std::vector<FeatureDescription> out;
    while (std::getline(in, line)) {
        if (line.empty())
            continue;
        std::istringstream is(line);
        std::string id, freq, cname, prec, support;
        std::getline(is, id, ',');
        std::getline(is, freq, ',');
        std::getline(is, cname, ',');
        std::getline(is, prec, ',');
        std::getline(is, support, ',');
        const int f = std::stoi(id);
        if (f < 0)
            throw FormatError("negative feature id");
        if (static_cast<std::size_t>(f) >= out.size())
            out.resize(static_cast<std::size_t>(f) + 1);
        auto& d = out[static_cast<std::size_t>(f)];
        d.feature = f;
        d.frequency = std::stod(freq);
        if (cname == "UNDESCRIBED")
            continue;
        d.described = true;
        if (cname == "NONE")
            continue;
        auto it = by_name.find(cname);
        if (it == by_name.end())
            throw FormatError("unknown concept '" + cname + "'");
        d.concepts.push_back({it->second, std::stod(prec), std::stoi(support)});
    }
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i].feature = static_cast<int>(i);
    return out;
}

}  // namespace xmp
