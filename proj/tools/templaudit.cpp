// templaudit: clean attribute labels, train the attribute classifier on
// embedding vectors, and audit which attributes it can predict.

#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "templaudit/cli.hpp"

int main(int argc, char** argv) {
    namespace cli = templaudit::cli;

    CLI::App app{"Soft-biometric attribute audit of fixed-length embedding vectors"};
    app.set_version_flag("--version", std::string(TEMPLAUDIT_VERSION));
    app.require_subcommand(1);
    app.fallthrough();

    cli::GlobalOptions global;
    std::uint64_t seed = 0;
    std::string out;
    auto* seed_opt = app.add_option("--seed", seed, "Random seed (overrides the config file)");
    auto* out_opt = app.add_option("--out", out, "Output directory (default: runs/<manifest hash>)");
    app.add_option("--threads", global.threads, "Worker threads; results do not depend on this")
        ->check(CLI::PositiveNumber);
    seed_opt->configurable(false);
    out_opt->configurable(false);

    cli::CleanArgs clean;
    auto* clean_cmd = app.add_subcommand("clean", "Binarize continuous attribute scores and check class support");
    clean_cmd->add_option("--scores", clean.scores, "Score CSV: sample_id,<attr>,...")->required();
    clean_cmd->add_option("--thresholds", clean.thresholds, "Threshold file: attribute,lower,upper")->required();
    clean_cmd->add_option("--attributes", clean.attributes, "Attribute metadata: name,category,n_out")->required();
    std::string clean_emb, clean_split;
    auto* ce = clean_cmd->add_option("--embeddings", clean_emb, "Embedding CSV used to derive the split");
    auto* cs = clean_cmd->add_option("--split", clean_split, "Existing split CSV: sample_id,side");
    ce->excludes(cs);
    clean_cmd->add_option("--train-fraction", clean.train_fraction, "Train share when deriving the split")
        ->check(CLI::Range(0.0, 1.0));
    clean_cmd->add_option("--min-count", clean.min_count, "Minimum samples per class per split");

    cli::TrainArgs train;
    auto* train_cmd = app.add_subcommand("train", "Split, optionally search the layout, and train the classifier");
    train_cmd->add_option("--embeddings", train.embeddings, "Embedding CSV")->required();
    train_cmd->add_option("--labels", train.labels, "Label CSV with 1/0/? cells")->required();
    train_cmd->add_option("--attributes", train.attributes, "Attribute metadata")->required();
    std::string train_config;
    train_cmd->add_option("--config", train_config, "key=value training config");
    train_cmd->add_flag("--search", train.search, "Run the random structure search first");

    cli::AuditArgs audit;
    auto* audit_cmd = app.add_subcommand("audit", "Reliability-filtered balanced accuracy per attribute");
    audit_cmd->add_option("--model", audit.model, "Model file written by train")->required();
    audit_cmd->add_option("--embeddings", audit.embeddings, "Embedding CSV")->required();
    audit_cmd->add_option("--labels", audit.labels, "Label CSV")->required();
    audit_cmd->add_option("--attributes", audit.attributes, "Attribute metadata")->required();
    audit_cmd->add_option("--split", audit.split, "Split CSV written by train")->required();
    std::string audit_config;
    audit_cmd->add_option("--config", audit_config, "key=value config (mc_passes, reliability_alpha, ...)");
    std::string fractions = "1.0,0.5";
    audit_cmd->add_option("--fractions", fractions, "Ratios of considered predictions")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : cli::kInputError;
    }

    if (seed_opt->count() > 0) global.seed = seed;
    if (out_opt->count() > 0) global.out = out;

    if (clean_cmd->parsed()) {
        if (ce->count() > 0) clean.embeddings = clean_emb;
        if (cs->count() > 0) clean.split = clean_split;
        return cli::cmd_clean(clean, global, std::cerr);
    }
    if (train_cmd->parsed()) {
        if (!train_config.empty()) train.config = train_config;
        return cli::cmd_train(train, global, std::cerr);
    }
    if (audit_cmd->parsed()) {
        if (!audit_config.empty()) audit.config = audit_config;
        try {
            audit.fractions = cli::parse_fractions(fractions);
        } catch (const templaudit::Error& e) {
            std::cerr << "error: " << e.what() << "\n";
            return cli::kInputError;
        }
        return cli::cmd_audit(audit, global, std::cerr);
    }
    return cli::kInputError;
}
