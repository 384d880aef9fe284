// lm train --corpus <path> --out <ckpt> --seed <int>

#include "cli_common.hpp"
#include "xmp/synthworld.hpp"
#include "xmp/tinylm.hpp"

using namespace xmp;

int main(int argc, char** argv)
{
    CLI::App app{"Tiny decoder-only language model"};
    app.require_subcommand(1, 1);
    auto* train = app.add_subcommand("train", "Train on a text corpus");
    std::string corpus, out;
    LMTrainOptions opt;
    train->add_option("--corpus", corpus, "Dataset file")->required()->check(CLI::ExistingFile);
    train->add_option("--out", out, "Checkpoint path")->required();
    train->add_option("--seed", opt.seed, "Seed")->required();
    train->add_option("--epochs", opt.epochs, "Epochs")->capture_default_str();
    train->add_option("--lr", opt.lr, "Peak learning rate")->capture_default_str();
    train->add_option("--max-steps", opt.max_steps, "Step cap (-1: none)")->capture_default_str();

    return cli::run(app, argc, argv, [&] {
        const auto& tok = default_tokenizer();
        std::vector<Tokens> docs;
        for (const auto& r : read_dataset(corpus))
            docs.push_back(wrap_document(tok.tokenize(r.text)));
        LMConfig cfg;
        cfg.vocab_size = tok.vocab_size();
        auto res = train_lm(docs, cfg, opt, cli::log_line);
        save_lm(out, res.weights);
        std::cout << "train loss " << res.final_train_loss << ", val loss " << res.val_loss << ", unigram entropy "
                  << res.unigram_entropy << "\n";
        return 0;
    });
}
