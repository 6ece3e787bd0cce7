// Writes a small synthetic corpus (embeddings, labels, attribute metadata,
// continuous scores and thresholds) for trying the templaudit commands.
//
//   make_fixture <out-dir> [n_samples] [n_in] [seed]

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "support/planted.hpp"
#include "templaudit/csv.hpp"

int main(int argc, char** argv) {
    using namespace templaudit;
    if (argc < 2) {
        std::cerr << "usage: make_fixture <out-dir> [n_samples] [n_in] [seed]\n";
        return 2;
    }
    const std::filesystem::path dir = argv[1];
    planted::PlantedOptions opt;
    opt.n_samples = argc > 2 ? std::stoul(argv[2]) : 2000;
    opt.n_in = argc > 3 ? std::stoul(argv[3]) : 16;
    opt.seed = argc > 4 ? std::stoull(argv[4]) : 1;
    const auto planted = planted::make_planted(opt);
    const auto& d = planted.data;

    std::filesystem::create_directories(dir);
    csv::write_file(dir / "embeddings.csv", embeddings_to_csv(d.embeddings()));
    csv::write_file(dir / "labels.csv", labels_to_csv(d.labels));
    csv::write_file(dir / "attributes.csv", attribute_meta_to_csv(d.labels.attributes));

    // Continuous scores: the planted coordinate plus noise, for the clean command.
    Rng rng = Rng(opt.seed).split("scores");
    std::string scores = "sample_id";
    std::string thresholds = "attribute,lower,upper\n";
    for (const auto& a : d.labels.attributes) {
        scores += "," + a.name;
        thresholds += a.name + ",-0.3,0.3\n";
    }
    scores += "\n";
    for (std::size_t i = 0; i < d.size(); ++i) {
        scores += d.sample_ids[i];
        for (std::size_t a = 0; a < d.labels.n_attributes(); ++a) {
            const double s = planted.kinds[a] == planted::Kind::Noise ? rng.normal() : d.vectors(i, a) + 0.2 * rng.normal();
            scores += "," + csv::format_double(s);
        }
        scores += "\n";
    }
    csv::write_file(dir / "scores.csv", scores);
    csv::write_file(dir / "thresholds.csv", thresholds);
    csv::write_file(dir / "train.cfg",
                    "# small layout for quick runs\nepochs=20\nbatch_size=64\ntrunk=64\nbranch=32\nmc_passes=30\n");
    std::cout << "wrote fixture with " << d.size() << " samples to " << dir.string() << "\n";
    return 0;
}
