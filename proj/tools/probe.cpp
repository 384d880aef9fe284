// probe run --lm --vit --adapter --saes <dir> --data <path> --out <dir>
//           [--n-rs 2000 --n-align 1000 --k 3 --img-freq 0.05 --corpus-freq 0.005]
//
// The SAE directory holds sae_layer_<l>.bin and descriptions_layer_<l>.csv
// for every probed layer. Writes metrics.json, metrics.csv and the residual
// dumps (acts/vlm_layer_<l>.bin, acts/baseline_layer_<l>.bin).

#include <filesystem>
#include <regex>

#include "cli_common.hpp"
#include "xmp/probe.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tensor_io.hpp"

using namespace xmp;
namespace fs = std::filesystem;

int main(int argc, char** argv)
{
    CLI::App app{"Layer-wise SAE probe"};
    app.require_subcommand(1, 1);
    auto* run = app.add_subcommand("run", "Compute reconstruction, sparsity and alignment per layer");
    std::string lm_path, vit_path, adapter_path, saes, data, out;
    ProbeConfig cfg;
    std::string rank = "max";
    bool dumps = true;
    run->add_option("--lm", lm_path, "LM checkpoint")->required()->check(CLI::ExistingFile);
    run->add_option("--vit", vit_path, "ViT checkpoint")->required()->check(CLI::ExistingFile);
    run->add_option("--adapter", adapter_path, "Adapter checkpoint")->required()->check(CLI::ExistingFile);
    run->add_option("--saes", saes, "Directory of SAEs and descriptions")->required()->check(CLI::ExistingDirectory);
    run->add_option("--data", data, "Dataset of mm records")->required()->check(CLI::ExistingFile);
    run->add_option("--out", out, "Output directory")->required();
    run->add_option("--n-rs", cfg.n_rs, "Examples for reconstruction error and sparsity")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    run->add_option("--n-align", cfg.n_align, "Examples for alignment")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);
    run->add_option("--k", cfg.k, "Top features per example")->capture_default_str()->check(CLI::PositiveNumber);
    run->add_option("--img-freq", cfg.thresholds.image_freq_max, "Image-frequency filter")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    run->add_option("--corpus-freq", cfg.thresholds.corpus_freq_max, "Corpus-frequency filter")
        ->capture_default_str()
        ->check(CLI::Range(0.0, 1.0));
    run->add_option("--rank", rank, "Per-example ranking statistic")
        ->capture_default_str()
        ->check(CLI::IsMember({"max", "sum"}));
    run->add_flag("!--no-dumps", dumps, "Skip writing activation dumps");

    return cli::run(app, argc, argv, [&] {
        cfg.rank = rank == "max" ? RankStat::Max : RankStat::Sum;
        const auto lm = load_lm(lm_path);
        const auto vit = load_vit(vit_path);
        const auto adapter = load_adapter(adapter_path);
        ProbeModels models{&lm, &vit, &adapter, {}, {}};
        const std::regex name(R"(sae_layer_(\d+)\.bin)");
        for (const auto& e : fs::directory_iterator(saes)) {
            std::smatch m;
            const auto fname = e.path().filename().string();
            if (!std::regex_match(fname, m, name))
                continue;
            const int l = std::stoi(m[1]);
            models.saes[l] = load_sae(e.path());
            models.descriptions[l] =
                load_descriptions_csv(fs::path(saes) / ("descriptions_layer_" + std::to_string(l) + ".csv"));
        }
        if (models.saes.empty())
            throw ConfigError("no sae_layer_<l>.bin files in " + saes);
        std::vector<MMExample> examples;
        for (const auto& r : read_dataset(data))
            examples.push_back(example_from_record(r));

        ProbeActivations acts;
        const auto rep = run_probe(models, examples, cfg, dumps ? &acts : nullptr);
        fs::create_directories(out);
        const auto json = rep.to_json().dump(2) + "\n";
        const auto csv = rep.to_csv();
        write_bytes(fs::path(out) / "metrics.json", std::vector<std::uint8_t>(json.begin(), json.end()));
        write_bytes(fs::path(out) / "metrics.csv", std::vector<std::uint8_t>(csv.begin(), csv.end()));
        if (dumps) {
            fs::create_directories(fs::path(out) / "acts");
            for (const auto& [l, d] : acts.vlm)
                save_activation_dump(fs::path(out) / "acts" / ("vlm_layer_" + std::to_string(l) + ".bin"), d);
            for (const auto& [l, d] : acts.baseline)
                save_activation_dump(fs::path(out) / "acts" / ("baseline_layer_" + std::to_string(l) + ".bin"), d);
        }
        const auto t = trend_stats(rep, cfg.convergence);
        std::cout << "layers " << rep.layers.size() << ", spearman " << t.spearman_rho << ", convergence "
                  << (t.convergence_layer ? std::to_string(*t.convergence_layer) : std::string("none")) << "\n";
        return 0;
    });
}
