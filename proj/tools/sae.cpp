// sae train --acts <dump|dir> --layer <l> --out <dir>
// sae describe --sae <file> --corpus <dump> --out <csv>
//
// A directory passed to --acts is searched for text_layer_<l>.bin. The
// describe corpus is a text activation dump for the SAE's layer; its tag
// sidecar supplies the token contexts.

#include <filesystem>

#include "cli_common.hpp"
#include "xmp/activations.hpp"
#include "xmp/sae.hpp"

using namespace xmp;
namespace fs = std::filesystem;

int main(int argc, char** argv)
{
    CLI::App app{"Per-layer sparse autoencoders"};
    app.require_subcommand(1, 1);

    auto* train = app.add_subcommand("train", "Train one layer's SAE over the L1 sweep");
    std::string acts, out_dir;
    int layer = 0;
    SAETrainOptions opt;
    train->add_option("--acts", acts, "Activation dump or directory of dumps")->required()->check(CLI::ExistingPath);
    train->add_option("--layer", layer, "Layer")->required()->check(CLI::PositiveNumber);
    train->add_option("--out", out_dir, "Output directory")->required();
    train->add_option("--seed", opt.seed, "Seed")->capture_default_str();
    train->add_option("--d-sae", opt.d_sae, "Dictionary size")->capture_default_str();
    train->add_option("--epochs", opt.epochs, "Epochs per attempt")->capture_default_str();

    auto* describe = app.add_subcommand("describe", "Describe features from corpus contexts");
    std::string sae_path, corpus, csv;
    DescribeOptions dopt;
    describe->add_option("--sae", sae_path, "SAE checkpoint")->required()->check(CLI::ExistingFile);
    describe->add_option("--corpus", corpus, "Text activation dump for the SAE's layer")
        ->required()
        ->check(CLI::ExistingFile);
    describe->add_option("--out", csv, "Output CSV")->required();

    return cli::run(app, argc, argv, [&] {
        if (train->parsed()) {
            fs::path src = acts;
            if (fs::is_directory(src))
                src /= "text_layer_" + std::to_string(layer) + ".bin";
            const auto dump = load_activation_dump(src);
            if (dump.layer != layer)
                throw ConfigError(src.string() + " holds layer " + std::to_string(dump.layer));
            auto res = train_sae_sweep(dump.rows(dump.non_bos_rows()), layer, opt);
            fs::create_directories(out_dir);
            save_sae(sae_file_name(out_dir, layer), res.sae);
            std::cout << res.diagnostics << "\n";
            if (!res.meets_targets)
                std::cerr << "warning: no L1 coefficient met the FVU and L0 targets\n";
            return 0;
        }
        const auto sae = load_sae(sae_path);
        const auto dump = load_activation_dump(corpus);
        if (dump.layer != sae.layer)
            throw ConfigError("corpus dump is layer " + std::to_string(dump.layer) + ", SAE is layer " +
                              std::to_string(sae.layer));
        const auto desc = describe_features(sae, dump, dopt);
        save_descriptions_csv(csv, desc);
        int described = 0, with_concept = 0;
        for (const auto& d : desc) {
            described += d.described;
            with_concept += !d.concepts.empty();
        }
        std::cout << described << " of " << desc.size() << " features described, " << with_concept
                  << " with a concept\n";
        return 0;
    });
}
