// adapter train --stage 1|2 --lm <ckpt> --vit <ckpt> --data <path> --out <ckpt> --seed <int>
//
// Stage 2 continues from a stage-1 checkpoint given with --init.

#include "cli_common.hpp"
#include "xmp/adapter.hpp"
#include "xmp/synthworld.hpp"

using namespace xmp;

int main(int argc, char** argv)
{
    CLI::App app{"Linear vision-to-language adapter"};
    app.require_subcommand(1, 1);
    auto* train = app.add_subcommand("train", "Train one stage with both backbones frozen");
    int stage = 1;
    std::string lm_path, vit_path, data, out, init_path;
    std::uint64_t seed = 0;
    train->add_option("--stage", stage, "1 (alignment) or 2 (instruction tuning)")
        ->required()
        ->check(CLI::IsMember({1, 2}));
    train->add_option("--lm", lm_path, "LM checkpoint")->required()->check(CLI::ExistingFile);
    train->add_option("--vit", vit_path, "ViT checkpoint")->required()->check(CLI::ExistingFile);
    train->add_option("--data", data, "Dataset of mm records")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out, "Adapter checkpoint")->required();
    train->add_option("--seed", seed, "Seed")->required();
    train->add_option("--init", init_path, "Stage-1 adapter (required for stage 2)")->check(CLI::ExistingFile);

    return cli::run(app, argc, argv, [&] {
        if (stage == 2 && init_path.empty())
            throw ConfigError("stage 2 needs --init <stage-1 adapter>");
        const auto lm = load_lm(lm_path);
        const auto vit = load_vit(vit_path);
        std::vector<MMExample> examples;
        for (const auto& r : read_dataset(data))
            examples.push_back(example_from_record(r));
        const auto items = prepare_items(vit, examples);
        const auto res = stage == 1
                             ? train_stage1(lm, vit, items, stage1_options(seed), cli::log_line)
                             : train_stage2(lm, vit, items, load_adapter(init_path), stage2_options(seed), cli::log_line);
        save_adapter(out, res.weights, stage);
        std::cout << "stage " << stage << " loss " << res.first_epoch_loss << " -> " << res.final_epoch_loss
                  << " over " << res.steps << " steps; lm " << res.lm_checksum.substr(0, 12) << " vit "
                  << res.vit_checksum.substr(0, 12) << " unchanged\n";
        return 0;
    });
}
