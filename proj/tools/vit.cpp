// vit train --data <path> --out <ckpt> --seed <int>

#include "cli_common.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tinyvit.hpp"

using namespace xmp;

int main(int argc, char** argv)
{
    CLI::App app{"Tiny patch-transformer vision tower"};
    app.require_subcommand(1, 1);
    auto* train = app.add_subcommand("train", "Contrastive pretraining on image/caption records");
    std::string data, out;
    ContrastiveOptions opt;
    train->add_option("--data", data, "Dataset of caption records with image seeds")
        ->required()
        ->check(CLI::ExistingFile);
    train->add_option("--out", out, "Checkpoint path")->required();
    train->add_option("--seed", opt.seed, "Seed")->required();
    train->add_option("--epochs", opt.epochs, "Epochs")->capture_default_str();

    return cli::run(app, argc, argv, [&] {
        auto pairs = contrastive_pairs(read_dataset(data));
        if (pairs.size() <= opt.val_pairs)
            opt.val_pairs = pairs.size() / 4;
        auto res = train_contrastive(pairs, ViTConfig{}, opt, cli::log_line);
        save_vit(out, res.vit);
        std::cout << "final loss " << res.final_loss << ", val recall@1 " << res.val_recall_at_1 << "\n";
        return 0;
    });
}
