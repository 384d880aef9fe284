// Pipeline driver: one command per stage plus run-all, report and verify.
//
//   xmprobe <command> [--config <path>] [--seed <int>] [--artifacts <dir>] [--force]
//
// Stage commands run a single stage and require their upstream stages to be
// complete and current. run-all runs every stage in order and skips the ones
// whose manifests match the current config and inputs.

#include <map>

#include "cli_common.hpp"

using namespace xmp;

int main(int argc, char** argv)
{
    CLI::App app{"Layer-wise SAE probe of a frozen-backbone vision-language model"};
    app.require_subcommand(1, 1);

    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string artifacts;
    bool force = false;
    bool print_config = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "Key-value config file")->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "Global seed (overrides run.seed)");
        sub->add_option("--artifacts", artifacts, "Artifact directory (overrides paths.artifacts)");
    };

    std::map<CLI::App*, std::string> stage_of;
    for (const auto& stage : stage_names()) {
        auto* sub = app.add_subcommand(stage, "Run the " + stage + " stage");
        add_common(sub);
        sub->add_flag("--force", force, "Rerun even when the manifest is current");
        stage_of[sub] = stage;
    }
    auto* run_all = app.add_subcommand("run-all", "Run every stage, skipping cached ones");
    add_common(run_all);
    run_all->add_flag("--force", force, "Rerun every stage");
    run_all->add_flag("--print-config", print_config, "Print the effective config and exit");
    auto* verify = app.add_subcommand("verify", "Check manifests, checksums and frozen backbones");
    add_common(verify);

    return cli::run(app, argc, argv, [&]() -> int {
        PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : PipelineConfig::load(config_path);
        cfg.apply_environment();
        if (seed)
            cfg.seed = *seed;
        if (!artifacts.empty())
            cfg.artifacts = artifacts;
        cfg.validate();

        if (verify->parsed()) {
            const auto r = verify_artifacts(cfg.artifacts);
            for (const auto& f : r.failures)
                std::cerr << "verify: " << f << "\n";
            std::cout << (r.ok ? "verify: pass" : "verify: FAIL") << std::endl;
            return r.ok ? cli::kOk : cli::kVerifyFailure;
        }
        if (print_config) {
            std::cout << cfg.to_text();
            return cli::kOk;
        }

        DirectoryLock lock(cfg.artifacts);
        Pipeline pipeline(cfg, cli::log_line);
        if (run_all->parsed()) {
            for (const auto& o : pipeline.run_all(force))
                std::cout << o.stage << ": " << (o.skipped ? "cached" : "ran") << "\n";
            return cli::kOk;
        }
        for (const auto& [sub, stage] : stage_of)
            if (sub->parsed()) {
                const auto o = pipeline.run_stage(stage, force);
                std::cout << o.stage << ": " << (o.skipped ? "cached" : "ran") << "\n";
            }
        return cli::kOk;
    });
}
