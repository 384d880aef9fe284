#pragma once

#include "xmp/adapter.hpp"
#include "xmp/error.hpp"
#include "xmp/probe.hpp"
#include "xmp/sae.hpp"
#include "xmp/tinylm.hpp"
#include "xmp/tinyvit.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace xmp {

struct ConfigError : Error {
    using Error::Error;
};

/// A stage failed; the message names the stage.
struct StageError : Error {
    std::string stage;
    StageError(std::string stage_name, const std::string& what)
        : Error(stage_name + ": " + what), stage(std::move(stage_name))
    {
    }
};

struct DataSizes {
    double density = 0.4;
    std::size_t corpus_docs = 20000;
    std::size_t vit_pairs = 8000;
    std::size_t stage1_examples = 20000;
    std::size_t stage2_examples = 8000;
    std::size_t eval_examples = 400;
    std::size_t probe_examples = 2000;
};

/// Everything a run depends on. The key-value file grammar:
///
///     # comment            ; comment
///     [section]
///     key = value
///
/// Values are scalars, comma-separated lists or string paths. Every key
/// belongs to a section and unknown sections or keys are rejected. The
/// environment may override only the artifact path (XMP_ARTIFACTS).
struct PipelineConfig {
    std::uint64_t seed = 1;
    std::filesystem::path artifacts = "artifacts";

    DataSizes data;
    LMConfig lm;
    LMTrainOptions lm_train{.epochs = 8};
    ViTConfig vit;
    ContrastiveOptions vit_train;
    std::size_t dump_docs = 3000;
    std::vector<int> layers;  // empty: every LM layer
    SAETrainOptions sae;
    DescribeOptions describe;
    AdapterTrainOptions stage1 = stage1_options(0);
    AdapterTrainOptions stage2 = stage2_options(0);
    ProbeConfig probe;

    static PipelineConfig parse(const std::string& text);
    static PipelineConfig load(const std::filesystem::path& path);
    void apply_environment();
    void validate() const;

    std::vector<int> probe_layers() const;

    /// Every setting except paths, keyed "section.key".
    nlohmann::json to_json() const;
    /// Canonical key-value text; parse(to_text()) reproduces the config.
    std::string to_text() const;
    /// Hash of the listed sections plus the global seed.
    std::string section_hash(const std::vector<std::string>& sections) const;
};

inline constexpr const char* kToolVersion = "xmprobe 0.1.0";

/// Provenance record for one stage. Paths are relative to the artifact
/// directory. `created` and `wall_time_s` are excluded from hash().
struct RunManifest {
    std::string stage;
    std::string tool_version = kToolVersion;
    std::string config_hash;
    nlohmann::json config;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> inputs;
    std::map<std::string, std::string> outputs;
    std::map<std::string, std::string> parents;  // stage -> manifest hash
    nlohmann::json extra = nlohmann::json::object();
    double wall_time_s = 0.0;
    std::string created;

    std::string hash() const;
    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

std::filesystem::path manifest_path(const std::filesystem::path& artifacts, const std::string& stage);
std::optional<RunManifest> read_manifest(const std::filesystem::path& artifacts, const std::string& stage);
void write_manifest(const std::filesystem::path& artifacts, const RunManifest& m);

/// Stage names in execution order.
const std::vector<std::string>& stage_names();
/// Direct upstream stages.
const std::vector<std::string>& stage_parents(const std::string& stage);
/// Config sections a stage depends on.
const std::vector<std::string>& stage_sections(const std::string& stage);

/// Exclusive lock on an artifact directory (a lock file created with O_EXCL).
class DirectoryLock {
public:
    explicit DirectoryLock(const std::filesystem::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    std::filesystem::path path_;
};

inline constexpr const char* kLockFile = ".lock";

using LogFn = std::function<void(const std::string&)>;

struct StageOutcome {
    std::string stage;
    bool skipped = false;
    double wall_time_s = 0.0;
};

class Pipeline {
public:
    Pipeline(PipelineConfig cfg, LogFn log = {});

    const PipelineConfig& config() const { return cfg_; }
    const std::filesystem::path& dir() const { return cfg_.artifacts; }

    /// True when the stage's manifest matches the current config, parents and
    /// files on disk.
    bool up_to_date(const std::string& stage) const;

    /// Runs one stage (after checking its parents are complete). Skips it when
    /// up to date unless `force`. Throws StageError.
    StageOutcome run_stage(const std::string& stage, bool force = false);
    std::vector<StageOutcome> run_all(bool force = false);

private:
    PipelineConfig cfg_;
    LogFn log_;

    void log(const std::string& msg) const;
    std::uint64_t stage_seed(const std::string& stage) const;
};

struct VerifyResult {
    bool ok = true;
    std::vector<std::string> failures;  // each begins with the offending stage
};

/// Rechecks every manifest against the files on disk: output and input
/// checksums, parent manifest hashes, the frozen LM/ViT checksums recorded
/// around adapter training, and files not produced by any stage.
VerifyResult verify_artifacts(const std::filesystem::path& artifacts);

}  // namespace xmp
