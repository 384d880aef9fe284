// synth gen --n <count> --seed <int> --density <float> --out <path> [--kind ...]

#include "cli_common.hpp"
#include "xmp/synthworld.hpp"

using namespace xmp;

int main(int argc, char** argv)
{
    CLI::App app{"Synthetic grid-world datasets"};
    app.require_subcommand(1, 1);
    auto* gen = app.add_subcommand("gen", "Write a line-delimited dataset");
    std::size_t n = 0;
    std::uint64_t seed = 0;
    double density = 0.4;
    std::string out;
    std::string kind = "corpus";
    gen->add_option("--n", n, "Number of records")->required()->check(CLI::PositiveNumber);
    gen->add_option("--seed", seed, "Seed")->required();
    gen->add_option("--density", density, "Cell occupancy probability")->check(CLI::Range(1e-9, 1.0));
    gen->add_option("--out", out, "Output path")->required();
    gen->add_option("--kind", kind, "corpus | descriptions | captions | qa")
        ->check(CLI::IsMember({"corpus", "descriptions", "captions", "qa"}));

    return cli::run(app, argc, argv, [&] {
        std::vector<DatasetRecord> records;
        if (kind == "corpus")
            records = text_corpus_records(n, seed, density);
        else if (kind == "descriptions")
            records = description_records(n, seed, density);
        else
            records = mm_records(n, seed, density, kind == "captions");
        write_dataset(out, records);
        std::cout << "wrote " << records.size() << " records to " << out << "\n";
        return 0;
    });
}
