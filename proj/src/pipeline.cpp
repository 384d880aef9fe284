#include "xmp/pipeline.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fcntl.h>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "xmp/activations.hpp"
#include "xmp/report.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tensor_io.hpp"

namespace fs = std::filesystem;

namespace xmp {

namespace {

// ---------------------------------------------------------------- config ---

template <typename T>
T parse_number(const std::string& name, std::string_view v)
{
    T out{};
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || ptr != end)
        throw ConfigError(name + ": invalid value '" + std::string(v) + "'");
    return out;
}

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& v)
{
    std::vector<std::string> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ','))
        if (auto t = trim(item); !t.empty())
            out.push_back(t);
    return out;
}

template <typename T>
T parse_value(const std::string& name, const std::string& raw)
{
    const std::string v = trim(raw);
    if constexpr (std::is_same_v<T, std::string> || std::is_same_v<T, fs::path>) {
        if (v.empty())
            throw ConfigError(name + ": empty value");
        return T(v);
    } else if constexpr (std::is_same_v<T, RankStat>) {
        if (v == "max")
            return RankStat::Max;
        if (v == "sum")
            return RankStat::Sum;
        throw ConfigError(name + ": expected max or sum, got '" + v + "'");
    } else if constexpr (std::is_same_v<T, std::vector<int>> || std::is_same_v<T, std::vector<double>>) {
        T out;
        for (const auto& item : split_list(v))
            out.push_back(parse_number<typename T::value_type>(name, item));
        return out;
    } else {
        return parse_number<T>(name, v);
    }
}

template <typename T>
nlohmann::json json_value(const T& v)
{
    if constexpr (std::is_same_v<T, fs::path>)
        return v.string();
    else if constexpr (std::is_same_v<T, RankStat>)
        return v == RankStat::Max ? "max" : "sum";
    else
        return v;
}

struct Field {
    std::string section;
    std::string key;
    std::function<void(PipelineConfig&, const std::string&)> set;
    std::function<nlohmann::json(const PipelineConfig&)> get;

    std::string name() const { return section + "." + key; }
};

template <typename Access>
Field make_field(std::string section, std::string key, Access acc)
{
    using T = std::remove_reference_t<decltype(acc(std::declval<PipelineConfig&>()))>;
    Field f{std::move(section), std::move(key), {}, {}};
    f.set = [acc, name = f.name()](PipelineConfig& c, const std::string& v) { acc(c) = parse_value<T>(name, v); };
    f.get = [acc](const PipelineConfig& c) { return json_value(acc(const_cast<PipelineConfig&>(c))); };
    return f;
}

#define XMP_FIELD(section, key, member) \
    make_field(section, key, [](PipelineConfig& c) -> auto& { return c.member; })

const std::vector<std::string>& section_order()
{
    static const std::vector<std::string> s = {"run",  "paths", "data",     "lm",      "vit",
                                               "acts", "sae",   "describe", "adapter", "probe"};
    return s;
}

const std::vector<Field>& fields()
{
    static const std::vector<Field> f = {
        XMP_FIELD("run", "seed", seed),
        XMP_FIELD("paths", "artifacts", artifacts),

        XMP_FIELD("data", "density", data.density),
        XMP_FIELD("data", "corpus_docs", data.corpus_docs),
        XMP_FIELD("data", "vit_pairs", data.vit_pairs),
        XMP_FIELD("data", "stage1_examples", data.stage1_examples),
        XMP_FIELD("data", "stage2_examples", data.stage2_examples),
        XMP_FIELD("data", "eval_examples", data.eval_examples),
        XMP_FIELD("data", "probe_examples", data.probe_examples),

        XMP_FIELD("lm", "d_model", lm.d_model),
        XMP_FIELD("lm", "n_layers", lm.n_layers),
        XMP_FIELD("lm", "n_heads", lm.n_heads),
        XMP_FIELD("lm", "d_ff", lm.d_ff),
        XMP_FIELD("lm", "max_context", lm.max_context),
        XMP_FIELD("lm", "epochs", lm_train.epochs),
        XMP_FIELD("lm", "batch_size", lm_train.batch_size),
        XMP_FIELD("lm", "lr", lm_train.lr),
        XMP_FIELD("lm", "warmup_steps", lm_train.warmup_steps),
        XMP_FIELD("lm", "min_lr_fraction", lm_train.min_lr_fraction),
        XMP_FIELD("lm", "val_fraction", lm_train.val_fraction),
        XMP_FIELD("lm", "max_steps", lm_train.max_steps),

        XMP_FIELD("vit", "patch_size", vit.patch_size),
        XMP_FIELD("vit", "d_vis", vit.d_vis),
        XMP_FIELD("vit", "n_layers", vit.n_layers),
        XMP_FIELD("vit", "n_heads", vit.n_heads),
        XMP_FIELD("vit", "d_ff", vit.d_ff),
        XMP_FIELD("vit", "epochs", vit_train.epochs),
        XMP_FIELD("vit", "batch_size", vit_train.batch_size),
        XMP_FIELD("vit", "lr", vit_train.lr),
        XMP_FIELD("vit", "warmup_steps", vit_train.warmup_steps),
        XMP_FIELD("vit", "temperature", vit_train.temperature),
        XMP_FIELD("vit", "max_caption_len", vit_train.max_caption_len),
        XMP_FIELD("vit", "val_pairs", vit_train.val_pairs),
        XMP_FIELD("vit", "retrieval_candidates", vit_train.retrieval_candidates),

        XMP_FIELD("acts", "docs", dump_docs),
        XMP_FIELD("acts", "layers", layers),

        XMP_FIELD("sae", "d_sae", sae.d_sae),
        XMP_FIELD("sae", "batch_size", sae.batch_size),
        XMP_FIELD("sae", "epochs", sae.epochs),
        XMP_FIELD("sae", "lr", sae.lr),
        XMP_FIELD("sae", "heldout_fraction", sae.heldout_fraction),
        XMP_FIELD("sae", "fvu_target", sae.fvu_target),
        XMP_FIELD("sae", "l0_target", sae.l0_target),
        XMP_FIELD("sae", "l1_sweep", sae.l1_sweep),

        XMP_FIELD("describe", "top_contexts", describe.top_contexts),
        XMP_FIELD("describe", "min_contexts", describe.min_contexts),
        XMP_FIELD("describe", "window", describe.window),
        XMP_FIELD("describe", "precision_threshold", describe.precision_threshold),

        XMP_FIELD("adapter", "stage1_lr", stage1.lr),
        XMP_FIELD("adapter", "stage1_epochs", stage1.epochs),
        XMP_FIELD("adapter", "stage1_batch_size", stage1.batch_size),
        XMP_FIELD("adapter", "stage1_warmup_ratio", stage1.warmup_ratio),
        XMP_FIELD("adapter", "stage2_lr", stage2.lr),
        XMP_FIELD("adapter", "stage2_epochs", stage2.epochs),
        XMP_FIELD("adapter", "stage2_batch_size", stage2.batch_size),
        XMP_FIELD("adapter", "stage2_warmup_ratio", stage2.warmup_ratio),

        XMP_FIELD("probe", "n_rs", probe.n_rs),
        XMP_FIELD("probe", "n_align", probe.n_align),
        XMP_FIELD("probe", "k", probe.k),
        XMP_FIELD("probe", "image_freq_max", probe.thresholds.image_freq_max),
        XMP_FIELD("probe", "corpus_freq_max", probe.thresholds.corpus_freq_max),
        XMP_FIELD("probe", "activation_threshold", probe.activation_threshold),
        XMP_FIELD("probe", "rank", probe.rank),
        XMP_FIELD("probe", "convergence_rate_fraction", probe.convergence.rate_fraction),
        XMP_FIELD("probe", "convergence_error_ratio", probe.convergence.error_ratio),
    };
    return f;
}

#undef XMP_FIELD

const Field* find_field(const std::string& section, const std::string& key)
{
    for (const auto& f : fields())
        if (f.section == section && f.key == key)
            return &f;
    return nullptr;
}

bool is_path_field(const Field& f) { return f.section == "paths"; }

std::string render_value(const nlohmann::json& v)
{
    if (v.is_string())
        return v.get<std::string>();
    if (v.is_array()) {
        std::string out;
        for (std::size_t i = 0; i < v.size(); ++i)
            out += (i ? ", " : "") + v[i].dump();
        return out;
    }
    return v.dump();
}

void require(bool ok, const std::string& msg)
{
    if (!ok)
        throw ConfigError(msg);
}

std::string now_iso8601()
{
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace

PipelineConfig PipelineConfig::parse(const std::string& text)
{
    namespace pt = boost::property_tree;
    pt::ptree tree;
    std::istringstream in(text);
    try {
        pt::ini_parser::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
    }
    PipelineConfig cfg;
    for (const auto& [section, body] : tree) {
        if (std::find(section_order().begin(), section_order().end(), section) == section_order().end())
            throw ConfigError(body.empty() && !body.data().empty() ? "key '" + section + "' outside a section"
                                                                    : "unknown section [" + section + "]");
        for (const auto& [key, value] : body) {
            if (!value.empty())
                throw ConfigError("nested key in [" + section + "]");
            const Field* f = find_field(section, key);
            if (!f)
                throw ConfigError("unknown key '" + key + "' in [" + section + "]");
            f->set(cfg, value.data());
        }
    }
    cfg.validate();
    return cfg;
}

PipelineConfig PipelineConfig::load(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw ConfigError("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
}

void PipelineConfig::apply_environment()
{
    if (const char* dir = std::getenv("XMP_ARTIFACTS"); dir && *dir)
        artifacts = dir;
}

void PipelineConfig::validate() const
{
    require(data.density > 0.0 && data.density <= 1.0, "data.density must be in (0, 1]");
    require(data.corpus_docs >= 1 && data.vit_pairs >= 2 && data.stage1_examples >= 1 && data.stage2_examples >= 1 &&
                data.eval_examples >= 1 && data.probe_examples >= 1,
            "data sizes must be positive");
    try {
        LMConfig l = lm;
        l.vocab_size = default_tokenizer().vocab_size();
        l.validate();
        vit.validate();
    } catch (const PreconditionError& e) {
        throw ConfigError(e.what());
    }
    require(vit.n_patches() == kVisualTokens,
            "vit must produce " + std::to_string(kVisualTokens) + " patches per image");
    require(lm_train.epochs >= 1 && lm_train.batch_size >= 1 && lm_train.lr > 0.0, "invalid lm training settings");
    require(lm_train.val_fraction > 0.0 && lm_train.val_fraction < 1.0, "lm.val_fraction must be in (0, 1)");
    require(vit_train.epochs >= 1 && vit_train.batch_size >= 2 && vit_train.lr > 0.0 && vit_train.temperature > 0.0,
            "invalid vit training settings");
    require(vit_train.val_pairs < data.vit_pairs, "vit.val_pairs must be below data.vit_pairs");
    require(vit_train.retrieval_candidates >= 2, "vit.retrieval_candidates must be >= 2");
    require(dump_docs >= 1 && dump_docs <= data.corpus_docs, "acts.docs must be in [1, data.corpus_docs]");
    std::set<int> seen;
    for (int l : layers) {
        require(l >= 1 && l <= lm.n_layers, "acts.layers entries must be in [1, lm.n_layers]");
        require(seen.insert(l).second, "acts.layers has a duplicate");
    }
    require(sae.d_sae >= 1 && sae.batch_size >= 1 && sae.epochs >= 1 && sae.lr > 0.0, "invalid sae settings");
    require(sae.heldout_fraction > 0.0 && sae.heldout_fraction < 1.0, "sae.heldout_fraction must be in (0, 1)");
    require(!sae.l1_sweep.empty(), "sae.l1_sweep must not be empty");
    for (double l1 : sae.l1_sweep)
        require(l1 > 0.0, "sae.l1_sweep entries must be positive");
    require(describe.top_contexts >= 1 && describe.min_contexts >= 1 && describe.window >= 0 &&
                describe.precision_threshold >= 0.0 && describe.precision_threshold <= 1.0,
            "invalid describe settings");
    for (const auto* s : {&stage1, &stage2})
        require(s->lr >= 0.0 && s->epochs >= 0 && s->batch_size >= 1 && s->warmup_ratio >= 0.0 &&
                    s->warmup_ratio <= 1.0,
                "invalid adapter stage settings");
    require(probe.n_rs >= 1 && probe.n_align >= 1 && probe.k >= 1, "probe.n_rs, n_align and k must be >= 1");
    require(static_cast<std::size_t>(std::max(probe.n_rs, probe.n_align)) <= data.probe_examples,
            "probe.n_rs and probe.n_align must not exceed data.probe_examples");
    require(probe.thresholds.image_freq_max >= 0.0 && probe.thresholds.image_freq_max <= 1.0 &&
                probe.thresholds.corpus_freq_max >= 0.0 && probe.thresholds.corpus_freq_max <= 1.0,
            "probe frequency thresholds must be in [0, 1]");
    require(probe.convergence.rate_fraction > 0.0 && probe.convergence.rate_fraction <= 1.0 &&
                probe.convergence.error_ratio > 0.0,
            "invalid convergence criteria");
}

std::vector<int> PipelineConfig::probe_layers() const
{
    if (!layers.empty()) {
        auto out = layers;
        std::sort(out.begin(), out.end());
        return out;
    }
    std::vector<int> out;
    for (int l = 1; l <= lm.n_layers; ++l)
        out.push_back(l);
    return out;
}

nlohmann::json PipelineConfig::to_json() const
{
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : fields())
        if (!is_path_field(f))
            j[f.name()] = f.get(*this);
    return j;
}

std::string PipelineConfig::to_text() const
{
    std::string out;
    for (const auto& section : section_order()) {
        out += "[" + section + "]\n";
        for (const auto& f : fields())
            if (f.section == section)
                out += f.key + " = " + render_value(f.get(*this)) + "\n";
        out += "\n";
    }
    return out;
}

std::string PipelineConfig::section_hash(const std::vector<std::string>& sections) const
{
    nlohmann::json j = nlohmann::json::object();
    j["run.seed"] = seed;
    for (const auto& f : fields())
        if (std::find(sections.begin(), sections.end(), f.section) != sections.end())
            j[f.name()] = f.get(*this);
    const auto text = j.dump();
    return sha256_hex(text.data(), text.size());
}

// -------------------------------------------------------------- manifest ---

nlohmann::json RunManifest::to_json() const
{
    return {{"stage", stage},   {"tool_version", tool_version}, {"config_hash", config_hash},
            {"config", config}, {"seed", seed},                 {"inputs", inputs},
            {"outputs", outputs}, {"parents", parents},         {"extra", extra},
            {"wall_time_s", wall_time_s}, {"created", created}};
}

RunManifest RunManifest::from_json(const nlohmann::json& j)
{
    RunManifest m;
    m.stage = j.at("stage").get<std::string>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.config = j.at("config");
    m.seed = j.at("seed").get<std::uint64_t>();
    m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    m.parents = j.at("parents").get<std::map<std::string, std::string>>();
    m.extra = j.value("extra", nlohmann::json::object());
    m.wall_time_s = j.value("wall_time_s", 0.0);
    m.created = j.value("created", "");
    return m;
}

std::string RunManifest::hash() const
{
    auto j = to_json();
    j.erase("wall_time_s");
    j.erase("created");
    const auto text = j.dump();
    return sha256_hex(text.data(), text.size());
}

fs::path manifest_path(const fs::path& artifacts, const std::string& stage)
{
    return artifacts / "manifests" / (stage + ".json");
}

std::optional<RunManifest> read_manifest(const fs::path& artifacts, const std::string& stage)
{
    const auto path = manifest_path(artifacts, stage);
    if (!fs::exists(path))
        return std::nullopt;
    const auto bytes = read_bytes(path);
    try {
        return RunManifest::from_json(nlohmann::json::parse(std::string(bytes.begin(), bytes.end())));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("corrupt manifest " + path.string() + ": " + e.what());
    }
}

void write_manifest(const fs::path& artifacts, const RunManifest& m)
{
    const auto path = manifest_path(artifacts, m.stage);
    fs::create_directories(path.parent_path());
    const auto text = m.to_json().dump(2) + "\n";
    write_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

const std::vector<std::string>& stage_names()
{
    static const std::vector<std::string> s = {"gen",        "train-lm",      "train-vit", "dump-acts", "train-saes",
                                               "describe",   "train-adapter", "probe",     "report"};
    return s;
}

const std::vector<std::string>& stage_parents(const std::string& stage)
{
    static const std::map<std::string, std::vector<std::string>> p = {
        {"gen", {}},
        {"train-lm", {"gen"}},
        {"train-vit", {"gen"}},
        {"dump-acts", {"gen", "train-lm"}},
        {"train-saes", {"dump-acts"}},
        {"describe", {"dump-acts", "train-saes"}},
        {"train-adapter", {"gen", "train-lm", "train-vit"}},
        {"probe", {"gen", "train-lm", "train-vit", "train-saes", "describe", "train-adapter"}},
        {"report", {"probe"}},
    };
    const auto it = p.find(stage);
    if (it == p.end())
        throw ConfigError("unknown stage '" + stage + "'");
    return it->second;
}

const std::vector<std::string>& stage_sections(const std::string& stage)
{
    static const std::map<std::string, std::vector<std::string>> s = {
        {"gen", {"data"}},          {"train-lm", {"lm"}},       {"train-vit", {"vit"}},
        {"dump-acts", {"acts"}},    {"train-saes", {"sae"}},    {"describe", {"describe"}},
        {"train-adapter", {"adapter"}}, {"probe", {"probe"}},   {"report", {"probe"}},
    };
    const auto it = s.find(stage);
    if (it == s.end())
        throw ConfigError("unknown stage '" + stage + "'");
    return it->second;
}

// ------------------------------------------------------------------ lock ---

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / kLockFile)
{
    fs::create_directories(dir);
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw Error("artifact directory " + dir.string() + " is locked by another pipeline (remove " +
                    path_.string() + " if stale)");
    const auto pid = std::to_string(::getpid()) + "\n";
    [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
    ::close(fd);
}

DirectoryLock::~DirectoryLock()
{
    std::error_code ec;
    fs::remove(path_, ec);
}

// ---------------------------------------------------------------- stages ---

namespace {

struct StageContext {
    const PipelineConfig& cfg;
    fs::path dir;
    std::uint64_t seed;
    nlohmann::json echo;
    LogFn log;
    std::vector<std::string> outputs;
    nlohmann::json extra = nlohmann::json::object();

    fs::path in(const std::string& rel) const { return dir / rel; }

    fs::path out(const std::string& rel)
    {
        outputs.push_back(rel);
        const auto p = dir / rel;
        fs::create_directories(p.parent_path());
        return p;
    }

    void say(const std::string& msg) const
    {
        if (log)
            log(msg);
    }

    // Echoes the pipeline config into a tensor file's header.
    void stamp(const fs::path& path) const
    {
        auto f = load_tensor_file(path);
        f.config["pipeline_config"] = echo;
        save_tensor_file(path, f);
    }

    void write_json(const std::string& rel, nlohmann::json j)
    {
        j["pipeline_config"] = echo;
        const auto text = j.dump(2) + "\n";
        write_bytes(out(rel), std::vector<std::uint8_t>(text.begin(), text.end()));
    }

    void save_dump(const std::string& rel, const ActivationDump& d)
    {
        const auto p = out(rel);
        outputs.push_back(rel + ".tags.csv");
        save_activation_dump(p, d);
        stamp(p);
    }
};

std::string layer_file(const std::string& stem, int layer, const std::string& ext)
{
    return stem + "_layer_" + std::to_string(layer) + ext;
}

std::vector<MMExample> load_examples(const fs::path& path)
{
    std::vector<MMExample> out;
    for (const auto& r : read_dataset(path))
        out.push_back(example_from_record(r));
    return out;
}

void stage_gen(StageContext& c)
{
    const auto& d = c.cfg.data;
    auto seed = [&](const char* name) { return derive_seed(c.seed, name); };
    write_dataset(c.out("data/corpus.jsonl"), text_corpus_records(d.corpus_docs, seed("corpus"), d.density));
    write_dataset(c.out("data/vit_pairs.jsonl"), description_records(d.vit_pairs, seed("vit_pairs"), d.density));
    write_dataset(c.out("data/stage1.jsonl"), mm_records(d.stage1_examples, seed("stage1"), d.density, true));
    write_dataset(c.out("data/stage2.jsonl"), mm_records(d.stage2_examples, seed("stage2"), d.density, false));
    write_dataset(c.out("data/eval.jsonl"), mm_records(d.eval_examples, seed("eval"), d.density, false));
    write_dataset(c.out("data/probe.jsonl"), mm_records(d.probe_examples, seed("probe"), d.density, false));
}

void stage_train_lm(StageContext& c)
{
    const auto& tok = default_tokenizer();
    std::vector<Tokens> docs;
    for (const auto& r : read_dataset(c.in("data/corpus.jsonl")))
        docs.push_back(wrap_document(tok.tokenize(r.text)));
    LMConfig lc = c.cfg.lm;
    lc.vocab_size = tok.vocab_size();
    LMTrainOptions opt = c.cfg.lm_train;
    opt.seed = c.seed;
    auto res = train_lm(docs, lc, opt, c.log);
    const auto path = c.out("models/lm.bin");
    save_lm(path, res.weights);
    c.stamp(path);
    c.write_json("models/lm_train.json", {{"final_train_loss", res.final_train_loss},
                                          {"val_loss", res.val_loss},
                                          {"unigram_entropy", res.unigram_entropy},
                                          {"steps", res.steps}});
    c.say("lm val loss " + std::to_string(res.val_loss) + " (unigram entropy " +
          std::to_string(res.unigram_entropy) + ")");
}

void stage_train_vit(StageContext& c)
{
    auto pairs = contrastive_pairs(read_dataset(c.in("data/vit_pairs.jsonl")));
    ContrastiveOptions opt = c.cfg.vit_train;
    opt.seed = c.seed;
    auto res = train_contrastive(pairs, c.cfg.vit, opt, c.log);
    const auto path = c.out("models/vit.bin");
    save_vit(path, res.vit);
    c.stamp(path);
    c.write_json("models/vit_train.json",
                 {{"final_loss", res.final_loss}, {"val_recall_at_1", res.val_recall_at_1}, {"steps", res.steps}});
    c.say("vit recall@1 " + std::to_string(res.val_recall_at_1));
}

void stage_dump_acts(StageContext& c)
{
    const auto& tok = default_tokenizer();
    const auto lm = load_lm(c.in("models/lm.bin"));
    const auto records = read_dataset(c.in("data/corpus.jsonl"));
    std::vector<Tokens> docs;
    for (std::size_t i = 0; i < c.cfg.dump_docs && i < records.size(); ++i)
        docs.push_back(tok.tokenize(records[i].text));
    for (const auto& d : collect_text_activations(lm, docs, c.cfg.probe_layers()))
        c.save_dump(layer_file("acts/text", d.layer, ".bin"), d);
}

void stage_train_saes(StageContext& c)
{
    SAETrainOptions opt = c.cfg.sae;
    opt.seed = c.seed;
    nlohmann::json layers = nlohmann::json::array();
    for (int l : c.cfg.probe_layers()) {
        const auto dump = load_activation_dump(c.in(layer_file("acts/text", l, ".bin")));
        auto res = train_sae_sweep(dump.rows(dump.non_bos_rows()), l, opt);
        c.say("sae layer " + std::to_string(l) + ": " + res.diagnostics);
        const auto path = c.out(layer_file("saes/sae", l, ".bin"));
        save_sae(path, res.sae);
        c.stamp(path);
        nlohmann::json attempts = nlohmann::json::array();
        for (const auto& a : res.attempts)
            attempts.push_back({{"l1", a.l1},
                                {"heldout_fvu", a.heldout_fvu},
                                {"heldout_l0_fraction", a.heldout_l0_fraction},
                                {"train_fvu", a.train_fvu},
                                {"dead_features", a.dead_features}});
        layers.push_back({{"layer", l},
                          {"l1", res.chosen.l1},
                          {"heldout_fvu", res.chosen.heldout_fvu},
                          {"heldout_l0_fraction", res.chosen.heldout_l0_fraction},
                          {"meets_targets", res.meets_targets},
                          {"attempts", attempts}});
    }
    c.write_json("saes/sae_train.json", {{"layers", layers}});
}

void stage_describe(StageContext& c)
{
    nlohmann::json layers = nlohmann::json::array();
    for (int l : c.cfg.probe_layers()) {
        const auto sae = load_sae(c.in(layer_file("saes/sae", l, ".bin")));
        const auto dump = load_activation_dump(c.in(layer_file("acts/text", l, ".bin")));
        const auto desc = describe_features(sae, dump, c.cfg.describe);
        save_descriptions_csv(c.out(layer_file("saes/descriptions", l, ".csv")), desc);
        int described = 0, with_concept = 0;
        for (const auto& d : desc) {
            described += d.described;
            with_concept += !d.concepts.empty();
        }
        layers.push_back({{"layer", l}, {"described", described}, {"with_concept", with_concept}});
        c.say("layer " + std::to_string(l) + ": " + std::to_string(described) + " described, " +
              std::to_string(with_concept) + " with a concept");
    }
    c.write_json("saes/describe.json", {{"layers", layers}});
}

void stage_train_adapter(StageContext& c)
{
    const auto lm_path = c.in("models/lm.bin");
    const auto vit_path = c.in("models/vit.bin");
    const auto lm_before = sha256_file(lm_path);
    const auto vit_before = sha256_file(vit_path);
    const auto lm = load_lm(lm_path);
    const auto vit = load_vit(vit_path);

    const auto s1 = prepare_items(vit, load_examples(c.in("data/stage1.jsonl")));
    const auto s2 = prepare_items(vit, load_examples(c.in("data/stage2.jsonl")));
    const auto eval = prepare_items(vit, load_examples(c.in("data/eval.jsonl")));

    AdapterTrainOptions o1 = c.cfg.stage1;
    o1.stage = 1;
    o1.seed = derive_seed(c.seed, "stage1");
    AdapterTrainOptions o2 = c.cfg.stage2;
    o2.stage = 2;
    o2.seed = derive_seed(c.seed, "stage2");

    const auto init = random_adapter(lm, vit, o1.seed);
    const auto r1 = train_adapter(lm, vit, s1, init, o1, c.log);
    const auto r2 = train_stage2(lm, vit, s2, r1.weights, o2, c.log);

    for (const auto& [name, a, stage] : {std::tuple{"models/adapter_init.bin", &init, 0},
                                         std::tuple{"models/adapter_stage1.bin", &r1.weights, 1},
                                         std::tuple{"models/adapter_stage2.bin", &r2.weights, 2}}) {
        const auto p = c.out(name);
        save_adapter(p, *a, stage);
        c.stamp(p);
    }

    const double acc_trained = exact_match_accuracy(lm, eval, r2.weights);
    const double acc_init = exact_match_accuracy(lm, eval, init);
    c.say("held-out QA exact match: trained " + std::to_string(acc_trained) + ", random init " +
          std::to_string(acc_init));

    const auto lm_after = sha256_file(lm_path);
    const auto vit_after = sha256_file(vit_path);
    if (lm_after != lm_before || vit_after != vit_before || r1.lm_checksum != r2.lm_checksum ||
        r1.vit_checksum != r2.vit_checksum || r2.lm_checksum != lm.checksum() || r2.vit_checksum != vit.checksum())
        throw FrozenWeightViolation("backbone checkpoint changed during adapter training");

    c.extra["frozen"] = {{"models/lm.bin", {{"before", lm_before}, {"after", lm_after}}},
                         {"models/vit.bin", {{"before", vit_before}, {"after", vit_after}}}};
    c.write_json("models/adapter_train.json", {{"stage1", {{"first_epoch_loss", r1.first_epoch_loss},
                                                           {"final_epoch_loss", r1.final_epoch_loss},
                                                           {"steps", r1.steps}}},
                                               {"stage2", {{"first_epoch_loss", r2.first_epoch_loss},
                                                           {"final_epoch_loss", r2.final_epoch_loss},
                                                           {"steps", r2.steps}}},
                                               {"eval_examples", eval.size()},
                                               {"qa_exact_match_trained", acc_trained},
                                               {"qa_exact_match_random", acc_init},
                                               {"lm_checksum", r2.lm_checksum},
                                               {"vit_checksum", r2.vit_checksum}});
}

void write_metrics(StageContext& c, const std::string& dir, MetricsReport rep)
{
    rep.config["pipeline"] = c.echo;
    const auto json = rep.to_json().dump(2) + "\n";
    const auto csv = rep.to_csv();
    write_bytes(c.out(dir + "/metrics.json"), std::vector<std::uint8_t>(json.begin(), json.end()));
    write_bytes(c.out(dir + "/metrics.csv"), std::vector<std::uint8_t>(csv.begin(), csv.end()));
}

void stage_probe(StageContext& c)
{
    const auto lm = load_lm(c.in("models/lm.bin"));
    const auto vit = load_vit(c.in("models/vit.bin"));
    const auto trained = load_adapter(c.in("models/adapter_stage2.bin"));
    const auto init = load_adapter(c.in("models/adapter_init.bin"));
    ProbeModels models{&lm, &vit, &trained, {}, {}};
    for (int l : c.cfg.probe_layers()) {
        models.saes[l] = load_sae(c.in(layer_file("saes/sae", l, ".bin")));
        models.descriptions[l] = load_descriptions_csv(c.in(layer_file("saes/descriptions", l, ".csv")));
    }
    const auto examples = load_examples(c.in("data/probe.jsonl"));

    ProbeActivations acts;
    auto rep = run_probe(models, examples, c.cfg.probe, &acts);
    write_metrics(c, "probe", rep);
    for (const auto& [l, d] : acts.vlm)
        c.save_dump(layer_file("probe/acts/vlm", l, ".bin"), d);
    for (const auto& [l, d] : acts.baseline)
        c.save_dump(layer_file("probe/acts/baseline", l, ".bin"), d);
    acts = {};

    models.adapter = &init;
    write_metrics(c, "probe/control", run_probe(models, examples, c.cfg.probe));
    const auto t = trend_stats(rep, c.cfg.probe.convergence);
    c.say("probe: spearman " + std::to_string(t.spearman_rho) + ", alignment first/last third " +
          std::to_string(t.first_third_alignment) + "/" + std::to_string(t.last_third_alignment) +
          ", convergence " + (t.convergence_layer ? std::to_string(*t.convergence_layer) : std::string("none")));
}

void stage_report(StageContext& c)
{
    for (const auto& [src, dst] : {std::pair{"probe", "report"}, std::pair{"probe/control", "report/control"}}) {
        fs::create_directories(c.dir / dst);
        for (const auto& name : write_report(c.dir / src, c.dir / dst))
            c.outputs.push_back(std::string(dst) + "/" + name);
    }
}

using StageFn = void (*)(StageContext&);

StageFn stage_fn(const std::string& stage)
{
    static const std::map<std::string, StageFn> fns = {
        {"gen", stage_gen},
        {"train-lm", stage_train_lm},
        {"train-vit", stage_train_vit},
        {"dump-acts", stage_dump_acts},
        {"train-saes", stage_train_saes},
        {"describe", stage_describe},
        {"train-adapter", stage_train_adapter},
        {"probe", stage_probe},
        {"report", stage_report},
    };
    const auto it = fns.find(stage);
    if (it == fns.end())
        throw ConfigError("unknown stage '" + stage + "'");
    return it->second;
}

// Inputs of a stage: every output of its parents.
std::map<std::string, std::string> recorded_inputs(const fs::path& dir, const std::string& stage)
{
    std::map<std::string, std::string> in;
    for (const auto& p : stage_parents(stage)) {
        const auto m = read_manifest(dir, p);
        if (!m)
            throw StageError(stage, "upstream stage '" + p + "' has not run");
        for (const auto& [path, sha] : m->outputs)
            in[path] = sha;
    }
    return in;
}

bool file_matches(const fs::path& path, const std::string& sha)
{
    return fs::is_regular_file(path) && sha256_file(path) == sha;
}

}  // namespace

Pipeline::Pipeline(PipelineConfig cfg, LogFn log) : cfg_(std::move(cfg)), log_(std::move(log))
{
    cfg_.validate();
}

void Pipeline::log(const std::string& msg) const
{
    if (log_)
        log_(msg);
}

std::uint64_t Pipeline::stage_seed(const std::string& stage) const { return derive_seed(cfg_.seed, stage); }

bool Pipeline::up_to_date(const std::string& stage) const
{
    const auto m = read_manifest(dir(), stage);
    if (!m || m->config_hash != cfg_.section_hash(stage_sections(stage)) || m->tool_version != kToolVersion)
        return false;
    for (const auto& p : stage_parents(stage)) {
        const auto pm = read_manifest(dir(), p);
        const auto it = m->parents.find(p);
        if (!pm || it == m->parents.end() || it->second != pm->hash())
            return false;
    }
    for (const auto& set : {m->inputs, m->outputs})
        for (const auto& [path, sha] : set)
            if (!file_matches(dir() / path, sha))
                return false;
    return true;
}

StageOutcome Pipeline::run_stage(const std::string& stage, bool force)
{
    stage_fn(stage);
    for (const auto& p : stage_parents(stage))
        if (!up_to_date(p))
            throw StageError(stage, "upstream stage '" + p + "' is missing or out of date");
    if (!force && up_to_date(stage)) {
        log("[" + stage + "] up to date, skipped");
        return {stage, true, 0.0};
    }

    if (const auto old = read_manifest(dir(), stage)) {
        for (const auto& [path, sha] : old->outputs)
            fs::remove(dir() / path);
        fs::remove(manifest_path(dir(), stage));
    }

    RunManifest m;
    m.stage = stage;
    m.config_hash = cfg_.section_hash(stage_sections(stage));
    m.config = cfg_.to_json();
    m.seed = stage_seed(stage);
    m.inputs = recorded_inputs(dir(), stage);
    for (const auto& p : stage_parents(stage))
        m.parents[p] = read_manifest(dir(), p)->hash();

    log("[" + stage + "] running");
    const auto t0 = std::chrono::steady_clock::now();
    StageContext ctx{cfg_, dir(), m.seed, m.config, [this, stage](const std::string& s) { log("[" + stage + "] " + s); },
                     {}, nlohmann::json::object()};
    auto discard = [&] {
        std::error_code ec;
        for (const auto& rel : ctx.outputs)
            fs::remove(dir() / rel, ec);
        for (const auto& rel : ctx.outputs)
            for (auto d = (dir() / rel).parent_path(); d != dir() && fs::is_empty(d, ec); d = d.parent_path())
                fs::remove(d, ec);
    };
    try {
        stage_fn(stage)(ctx);
    } catch (const StageError&) {
        discard();
        throw;
    } catch (const std::exception& e) {
        discard();
        throw StageError(stage, e.what());
    }
    m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.created = now_iso8601();
    m.extra = ctx.extra;
    for (const auto& rel : ctx.outputs)
        m.outputs[rel] = sha256_file(dir() / rel);
    write_manifest(dir(), m);
    log("[" + stage + "] done in " + std::to_string(m.wall_time_s) + " s");
    return {stage, false, m.wall_time_s};
}

std::vector<StageOutcome> Pipeline::run_all(bool force)
{
    std::vector<StageOutcome> out;
    for (const auto& s : stage_names())
        out.push_back(run_stage(s, force));
    return out;
}

// ---------------------------------------------------------------- verify ---

VerifyResult verify_artifacts(const fs::path& artifacts)
{
    VerifyResult r;
    auto fail = [&](const std::string& msg) {
        r.ok = false;
        r.failures.push_back(msg);
    };
    if (!fs::is_directory(artifacts)) {
        fail("artifact directory " + artifacts.string() + " does not exist");
        return r;
    }

    std::map<std::string, RunManifest> manifests;
    for (const auto& s : stage_names()) {
        try {
            if (auto m = read_manifest(artifacts, s))
                manifests.emplace(s, *m);
        } catch (const std::exception& e) {
            fail(s + ": " + e.what());
        }
    }
    if (manifests.empty() && r.ok)
        fail("no manifests in " + artifacts.string());

    std::set<std::string> owned;
    for (const auto& [stage, m] : manifests) {
        if (m.stage != stage)
            fail(stage + ": manifest names stage '" + m.stage + "'");
        for (const auto& p : stage_parents(stage)) {
            const auto pm = manifests.find(p);
            const auto rec = m.parents.find(p);
            if (pm == manifests.end())
                fail(stage + ": parent manifest '" + p + "' is missing");
            else if (rec == m.parents.end() || rec->second != pm->second.hash())
                fail(stage + ": broken parent hash for '" + p + "'");
        }
        for (const auto& [path, sha] : m.inputs) {
            if (!fs::is_regular_file(artifacts / path))
                fail(stage + ": input " + path + " is missing");
            else if (sha256_file(artifacts / path) != sha)
                fail(stage + ": input " + path + " checksum drift");
            bool produced = false;
            for (const auto& p : stage_parents(stage)) {
                const auto pm = manifests.find(p);
                if (pm != manifests.end()) {
                    const auto it = pm->second.outputs.find(path);
                    produced = produced || (it != pm->second.outputs.end() && it->second == sha);
                }
            }
            if (!produced)
                fail(stage + ": input " + path + " does not match any parent output");
        }
        for (const auto& [path, sha] : m.outputs) {
            owned.insert(path);
            if (!fs::is_regular_file(artifacts / path))
                fail(stage + ": output " + path + " is missing");
            else if (sha256_file(artifacts / path) != sha)
                fail(stage + ": output " + path + " checksum drift");
        }
        if (m.extra.contains("frozen"))
            for (const auto& [path, v] : m.extra["frozen"].items()) {
                const auto before = v.at("before").get<std::string>();
                const auto after = v.at("after").get<std::string>();
                if (before != after)
                    fail(stage + ": frozen checkpoint " + path + " changed during the stage");
                else if (!file_matches(artifacts / path, after))
                    fail(stage + ": frozen checkpoint " + path + " differs from the bytes the stage used");
            }
    }

    for (const auto& entry : fs::recursive_directory_iterator(artifacts)) {
        if (!entry.is_regular_file())
            continue;
        const auto rel = fs::relative(entry.path(), artifacts).generic_string();
        if (rel == kLockFile)
            continue;
        if (rel.rfind("manifests/", 0) == 0) {
            const auto stem = entry.path().stem().string();
            if (entry.path().extension() == ".json" && manifests.count(stem))
                continue;
        }
        if (!owned.count(rel))
            fail("orphan file " + rel + " is not produced by any stage");
    }
    return r;
}

}  // namespace xmp
