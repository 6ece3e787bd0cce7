#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "templaudit/analysis.hpp"
#include "templaudit/csv.hpp"
#include "templaudit/data_io.hpp"
#include "templaudit/errors.hpp"
#include "templaudit/label_prep.hpp"
#include "templaudit/mac_model.hpp"
#include "templaudit/model_io.hpp"
#include "templaudit/parallel.hpp"
#include "templaudit/reliability.hpp"
#include "templaudit/training.hpp"

#ifndef TEMPLAUDIT_VERSION
#define TEMPLAUDIT_VERSION "0.0.0"
#endif

// Command implementations behind the `templaudit` executable. Each command
// reads its inputs, computes every output in memory, and only then writes the
// files into the run directory, so a failing command leaves nothing behind.
namespace templaudit::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kInputError = 2, kInternalError = 3 };

struct GlobalOptions {
    std::optional<std::uint64_t> seed;
    std::optional<fs::path> out;
    std::size_t threads = 1;
    fs::path runs_root = "runs";
};

// ---------------------------------------------------------------------------
// Run configuration

/// Everything a key=value config file can set. Keys not present keep these
/// defaults.
struct RunConfig {
    TrainConfig train;
    std::vector<std::size_t> trunk_sizes{512};
    std::vector<std::size_t> branch_sizes{512};
    double p_drop = 0.5;
    bool regularize_heads = false;
    double train_fraction = 0.7;
    double validation_fraction = 0.2;  // share of the training split held out during structure search
    ReliabilityConfig reliability;
    SearchSpace search;

    std::map<std::string, std::string> snapshot() const {
        auto sizes = [](const std::vector<std::size_t>& v) {
            std::string s;
            for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "-" : "") + std::to_string(v[i]);
            return s;
        };
        return {
            {"epochs", std::to_string(train.epochs)},
            {"lr", csv::format_double(train.learning_rate)},
            {"decay", csv::format_double(train.decay_rate())},
            {"batch_size", std::to_string(train.batch_size)},
            {"seed", std::to_string(train.seed)},
            {"class_weighting", train.class_weighting ? "1" : "0"},
            {"trunk", sizes(trunk_sizes)},
            {"branch", sizes(branch_sizes)},
            {"p_drop", csv::format_double(p_drop)},
            {"regularize_heads", regularize_heads ? "1" : "0"},
            {"train_fraction", csv::format_double(train_fraction)},
            {"validation_fraction", csv::format_double(validation_fraction)},
            {"mc_passes", std::to_string(reliability.m)},
            {"reliability_alpha", csv::format_double(reliability.alpha)},
            {"deterministic_class", reliability.deterministic_class ? "1" : "0"},
            {"search_candidates", std::to_string(search.n_candidates)},
            {"search_repeats", std::to_string(search.n_repeats)},
        };
    }
};

namespace detail {

inline std::vector<std::size_t> parse_sizes(const std::string& value, const std::string& key) {
    std::vector<std::size_t> out;
    if (value.empty() || value == "none") return out;
    for (const auto& part : csv::split(value, '-')) {
        const auto v = csv::parse_int<std::size_t>(part);
        if (!v || *v == 0) throw ConfigError("config: '" + key + "' must be dash-separated positive sizes");
        out.push_back(*v);
    }
    return out;
}

inline bool parse_bool(const std::string& value, const std::string& key) {
    if (value == "1" || value == "true" || value == "on") return true;
    if (value == "0" || value == "false" || value == "off") return false;
    throw ConfigError("config: '" + key + "' must be a boolean");
}

template <class Int>
Int parse_count(const std::string& value, const std::string& key) {
    const auto v = csv::parse_int<Int>(value);
    if (!v) throw ConfigError("config: '" + key + "' must be a non-negative integer");
    return *v;
}

inline double parse_real(const std::string& value, const std::string& key) {
    const auto v = csv::parse_double(value);
    if (!v || !std::isfinite(*v)) throw ConfigError("config: '" + key + "' must be a number");
    return *v;
}

}  // namespace detail

/// Line-oriented `key=value` records; `#` starts a comment.
inline RunConfig load_run_config(const fs::path& path) {
    RunConfig cfg;
    csv::LineReader reader(path);
    std::string line;
    while (reader.next(line)) {
        const auto hash = line.find('#');
        const std::string body(csv::trim(line.substr(0, hash)));
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) reader.fail("expected key=value");
        const std::string key(csv::trim(std::string_view(body).substr(0, eq)));
        const std::string value(csv::trim(std::string_view(body).substr(eq + 1)));
        try {
            if (key == "epochs") cfg.train.epochs = detail::parse_count<std::size_t>(value, key);
            else if (key == "lr") cfg.train.learning_rate = detail::parse_real(value, key);
            else if (key == "decay") cfg.train.decay = detail::parse_real(value, key);
            else if (key == "batch_size") cfg.train.batch_size = detail::parse_count<std::size_t>(value, key);
            else if (key == "seed") cfg.train.seed = detail::parse_count<std::uint64_t>(value, key);
            else if (key == "class_weighting") cfg.train.class_weighting = detail::parse_bool(value, key);
            else if (key == "trunk") cfg.trunk_sizes = detail::parse_sizes(value, key);
            else if (key == "branch") cfg.branch_sizes = detail::parse_sizes(value, key);
            else if (key == "p_drop") cfg.p_drop = detail::parse_real(value, key);
            else if (key == "regularize_heads") cfg.regularize_heads = detail::parse_bool(value, key);
            else if (key == "train_fraction") cfg.train_fraction = detail::parse_real(value, key);
            else if (key == "validation_fraction") cfg.validation_fraction = detail::parse_real(value, key);
            else if (key == "mc_passes") cfg.reliability.m = detail::parse_count<std::size_t>(value, key);
            else if (key == "reliability_alpha") cfg.reliability.alpha = detail::parse_real(value, key);
            else if (key == "deterministic_class") cfg.reliability.deterministic_class = detail::parse_bool(value, key);
            else if (key == "search_candidates") cfg.search.n_candidates = detail::parse_count<std::size_t>(value, key);
            else if (key == "search_repeats") cfg.search.n_repeats = detail::parse_count<std::size_t>(value, key);
            else reader.fail("unknown config key '" + key + "'");
        } catch (const ConfigError& e) {
            reader.fail(e.what());
        }
    }
    if (cfg.train.learning_rate <= 0.0) throw ConfigError("config: lr must be positive");
    if (cfg.train.decay && *cfg.train.decay < 0.0) throw ConfigError("config: decay must be non-negative");
    if (!(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0)) {
        throw ConfigError("config: validation_fraction must lie in (0,1)");
    }
    cfg.reliability.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Manifest and staged output

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::uint64_t file_digest(const fs::path& path) { return fnv1a64(csv::read_file(path)); }

struct RunManifest {
    std::string command;
    std::map<std::string, std::string> config;
    std::map<std::string, std::pair<std::string, std::uint64_t>> inputs;  // role -> (path, digest)
    std::uint64_t seed = 0;
    std::string tool_version = TEMPLAUDIT_VERSION;
    std::map<std::string, std::string> notes;  // derived facts worth keeping with the run

    void add_input(const std::string& role, const fs::path& path) {
        inputs[role] = {path.string(), file_digest(path)};
    }

    std::string to_text() const {
        std::string out = "command=" + command + "\n";
        for (const auto& [k, v] : config) out += "config." + k + "=" + v + "\n";
        for (const auto& [role, entry] : inputs) {
            out += "input." + role + ".path=" + entry.first + "\n";
            out += "input." + role + ".fnv1a64=" + hex64(entry.second) + "\n";
        }
        for (const auto& [k, v] : notes) out += "note." + k + "=" + v + "\n";
        out += "seed=" + std::to_string(seed) + "\n";
        out += "tool_version=" + tool_version + "\n";
        return out;
    }
};

/// Output files held in memory until commit().
class OutputStage {
public:
    void add(const std::string& name, std::string contents) { files_[name] = std::move(contents); }

    /// Writes each file under a temporary name, then renames all of them.
    void commit(const fs::path& dir) const {
        fs::create_directories(dir);
        std::vector<std::pair<fs::path, fs::path>> moves;
        try {
            for (const auto& [name, contents] : files_) {
                const fs::path tmp = dir / ("." + name + ".tmp");
                csv::write_file(tmp, contents);
                moves.emplace_back(tmp, dir / name);
            }
        } catch (...) {
            for (const auto& [tmp, final_path] : moves) fs::remove(tmp);
            throw;
        }
        for (const auto& [tmp, final_path] : moves) fs::rename(tmp, final_path);
    }

    const std::map<std::string, std::string>& files() const { return files_; }

private:
    std::map<std::string, std::string> files_;
};

inline fs::path run_directory(const GlobalOptions& global, const RunManifest& manifest) {
    if (global.out) return *global.out;
    return global.runs_root / hex64(fnv1a64(manifest.to_text()));
}

inline void finish(const GlobalOptions& global, RunManifest& manifest, OutputStage& stage, std::ostream& log) {
    const fs::path dir = run_directory(global, manifest);
    stage.add("manifest.txt", manifest.to_text());
    stage.commit(dir);
    log << "wrote " << stage.files().size() << " files to " << dir.string() << "\n";
}

/// Maps library errors to exit codes: input problems are 2, broken internal
/// invariants 3.
template <class Fn>
int guarded(std::ostream& log, Fn&& fn) {
    try {
        return fn();
    } catch (const ConsistencyError& e) {
        log << "internal error: " << e.what() << "\n";
        return kInternalError;
    } catch (const NumericError& e) {
        log << "internal error: " << e.what() << "\n";
        return kInternalError;
    } catch (const Error& e) {
        log << "error: " << e.what() << "\n";
        return kInputError;
    } catch (const fs::filesystem_error& e) {
        log << "error: " << e.what() << "\n";
        return kInputError;
    } catch (const std::exception& e) {
        log << "internal error: " << e.what() << "\n";
        return kInternalError;
    }
}

// ---------------------------------------------------------------------------
// clean

struct CleanArgs {
    fs::path scores;
    fs::path thresholds;
    fs::path attributes;
    std::optional<fs::path> embeddings;  // derive the split from subjects
    std::optional<fs::path> split;       // or reuse an existing split file
    double train_fraction = 0.7;
    std::size_t min_count = kDefaultMinCount;
};

inline int cmd_clean(const CleanArgs& args, const GlobalOptions& global, std::ostream& log) {
    return guarded(log, [&] {
        set_worker_count(global.threads);
        if (!args.embeddings && !args.split) throw ConfigError("clean: need --embeddings or --split to count per split");
        const auto metas = load_attribute_meta(args.attributes);
        const auto thresholds = load_thresholds(args.thresholds);
        const auto scores = load_scores(args.scores);
        const auto cleaned = clean_labels(scores, thresholds, metas);
        const std::uint64_t seed = global.seed.value_or(0);

        RunManifest manifest;
        manifest.command = "clean";
        manifest.seed = seed;
        manifest.add_input("scores", args.scores);
        manifest.add_input("thresholds", args.thresholds);
        manifest.add_input("attributes", args.attributes);
        manifest.config["min_count"] = std::to_string(args.min_count);

        SplitAssignment split;
        if (args.split) {
            split = load_split(*args.split);
            manifest.add_input("split", *args.split);
        } else {
            const auto emb = load_embeddings(*args.embeddings);
            Rng rng = Rng(seed).split("split");
            split = subject_exclusive_split(emb, args.train_fraction, rng);
            manifest.add_input("embeddings", *args.embeddings);
            manifest.config["train_fraction"] = csv::format_double(args.train_fraction);
        }
        const auto flags = sufficiency_filter(cleaned, split, args.min_count);
        const auto reduction = label_reduction(cleaned);
        manifest.notes["label_reduction_cells"] = csv::format_fixed(reduction.cell_fraction);
        manifest.notes["label_reduction_samples"] = csv::format_fixed(reduction.sample_fraction);
        std::size_t insufficient = 0;
        for (const auto& f : flags)
            if (!f.sufficient) ++insufficient;
        log << "cleaned " << cleaned.n_attributes() << " attributes over " << cleaned.size() << " samples; "
            << insufficient << " insufficient; undefined cells " << csv::format_fixed(reduction.cell_fraction * 100, 1)
            << "%, fully undefined samples " << csv::format_fixed(reduction.sample_fraction * 100, 1) << "%\n";

        OutputStage stage;
        stage.add("labels.csv", labels_to_csv(cleaned));
        stage.add("sufficiency.csv", sufficiency_to_csv(flags));
        finish(global, manifest, stage, log);
        return kOk;
    });
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
    fs::path embeddings;
    fs::path labels;
    fs::path attributes;
    std::optional<fs::path> config;
    bool search = false;
};

inline Dataset load_joined(const fs::path& embeddings, const fs::path& labels, const fs::path& attributes,
                           std::ostream& log) {
    const auto metas = load_attribute_meta(attributes);
    const auto emb = load_embeddings(embeddings);
    const auto lab = load_labels(labels, metas);
    auto joined = join(emb, lab);
    if (joined.dropped_embeddings || joined.dropped_labels) {
        log << "join dropped " << joined.dropped_embeddings << " unlabelled embeddings and " << joined.dropped_labels
            << " labels without embeddings\n";
    }
    if (joined.data.size() == 0) throw DataError("no sample appears in both embeddings and labels");
    return std::move(joined.data);
}

inline int cmd_train(const TrainArgs& args, const GlobalOptions& global, std::ostream& log) {
    return guarded(log, [&] {
        set_worker_count(global.threads);
        RunConfig cfg = args.config ? load_run_config(*args.config) : RunConfig{};
        if (global.seed) cfg.train.seed = *global.seed;
        const auto data = load_joined(args.embeddings, args.labels, args.attributes, log);

        RunManifest manifest;
        manifest.command = args.search ? "train --search" : "train";
        manifest.seed = cfg.train.seed;
        manifest.config = cfg.snapshot();
        manifest.add_input("embeddings", args.embeddings);
        manifest.add_input("labels", args.labels);
        manifest.add_input("attributes", args.attributes);
        if (args.config) manifest.add_input("config", *args.config);

        const Rng root(cfg.train.seed);
        Rng split_rng = root.split("split");
        const auto split = subject_exclusive_split(data.embeddings(), cfg.train_fraction, split_rng);
        const auto train_set = data.subset(split.train_sample_ids);
        log << "split: " << split.train_sample_ids.size() << " train / " << split.test_sample_ids.size() << " test\n";

        MacSpec spec = spec_for(train_set, cfg.trunk_sizes, cfg.branch_sizes, cfg.p_drop);
        spec.regularize_heads = cfg.regularize_heads;
        OutputStage stage;
        if (args.search) {
            Rng search_split_rng = root.split("search-split");
            const auto inner = subject_exclusive_split(train_set.embeddings(), 1.0 - cfg.validation_fraction,
                                                       search_split_rng);
            const auto result = structure_search(cfg.search, train_set.subset(inner.train_sample_ids),
                                                 train_set.subset(inner.test_sample_ids), spec, cfg.train);
            spec = result.chosen;
            stage.add("search.csv", search_report_to_csv(result));
            log << "structure search chose candidate " << result.chosen_index << "\n";
        }

        Rng init = root.split("init");
        MacModel model = build_mac(spec, init);
        const auto history = train(model, train_set, cfg.train);
        if (!history.epoch_loss.empty()) log << "final epoch loss " << csv::format_fixed(history.epoch_loss.back()) << "\n";

        const auto bytes = serialize(model);
        stage.add("model.macb", std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
        stage.add("history.csv", history_to_csv(history));
        stage.add("split.csv", split_to_csv(split));
        finish(global, manifest, stage, log);
        return kOk;
    });
}

// ---------------------------------------------------------------------------
// audit

struct AuditArgs {
    fs::path model;
    fs::path embeddings;
    fs::path labels;
    fs::path attributes;
    fs::path split;
    std::optional<fs::path> config;
    std::vector<double> fractions{1.0, 0.5};
};

/// Parses "1.0,0.5" style fraction lists.
inline std::vector<double> parse_fractions(const std::string& text) {
    std::vector<double> out;
    for (const auto& part : csv::split(text)) {
        const auto v = csv::parse_double(part);
        if (!v || !(*v > 0.0 && *v <= 1.0)) throw ConfigError("fractions must be numbers in (0,1], got '" + part + "'");
        if (std::find(out.begin(), out.end(), *v) != out.end()) throw ConfigError("duplicate fraction '" + part + "'");
        out.push_back(*v);
    }
    if (out.empty()) throw ConfigError("no fractions given");
    return out;
}

inline constexpr std::size_t kAuditChunk = 1024;

inline int cmd_audit(const AuditArgs& args, const GlobalOptions& global, std::ostream& log) {
    return guarded(log, [&] {
        set_worker_count(global.threads);
        RunConfig cfg = args.config ? load_run_config(*args.config) : RunConfig{};
        if (global.seed) cfg.train.seed = *global.seed;
        const MacModel model = load_model(args.model);
        const auto data = load_joined(args.embeddings, args.labels, args.attributes, log);
        const auto split = load_split(args.split);
        const auto test = data.subset(split.test_sample_ids);
        if (test.size() == 0) throw DataError("audit: test split has no labelled samples");
        if (test.vectors.cols() != model.spec.n_in) {
            throw DataError("audit: embeddings have " + std::to_string(test.vectors.cols()) + " dims, model expects " +
                            std::to_string(model.spec.n_in));
        }
        const auto cols = templaudit::detail::head_columns(model, test.labels);

        RunManifest manifest;
        manifest.command = "audit";
        manifest.seed = cfg.train.seed;
        manifest.config = cfg.snapshot();
        std::string fr;
        for (std::size_t i = 0; i < args.fractions.size(); ++i) fr += (i ? "," : "") + csv::format_double(args.fractions[i]);
        manifest.config["fractions"] = fr;
        manifest.add_input("model", args.model);
        manifest.add_input("embeddings", args.embeddings);
        manifest.add_input("labels", args.labels);
        manifest.add_input("attributes", args.attributes);
        manifest.add_input("split", args.split);
        if (args.config) manifest.add_input("config", *args.config);

        std::vector<std::string> head_names;
        for (const auto& h : model.spec.heads) head_names.push_back(h.name);
        const Rng mc_root = Rng(cfg.train.seed).split("mc-dropout");
        std::vector<PredictionRecord> records;
        for (std::size_t start = 0, chunk = 0; start < test.size(); start += kAuditChunk, ++chunk) {
            const std::size_t end = std::min(test.size(), start + kAuditChunk);
            std::vector<std::size_t> idx(end - start);
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = start + i;
            const Matrix x = gather_rows(test.vectors, idx);
            const auto passes = mc_passes(model, x, cfg.reliability, mc_root.split(static_cast<std::uint64_t>(chunk)));
            std::optional<std::vector<Matrix>> det;
            if (cfg.reliability.deterministic_class) det = predict(model, x, ForwardMode::Infer);
            const std::span<const std::string> ids(test.sample_ids.data() + start, end - start);
            auto part = predict_with_reliability(passes, cfg.reliability, ids, head_names, det ? &*det : nullptr);
            records.insert(records.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        }

        // Evaluate only the heads the model has, in model order.
        LabelSet truth;
        truth.sample_ids = test.labels.sample_ids;
        for (const auto c : cols) truth.attributes.push_back(test.labels.attributes[c]);
        truth.values.resize(truth.sample_ids.size() * cols.size());
        for (std::size_t i = 0; i < truth.size(); ++i)
            for (std::size_t h = 0; h < cols.size(); ++h) truth.at(i, h) = test.labels.at(i, cols[h]);
        const auto rows = rcp_accuracy_table(records, truth, args.fractions);

        std::vector<std::size_t> binary;
        for (std::size_t a = 0; a < data.labels.n_attributes(); ++a)
            if (data.labels.attributes[a].n_out == 2) binary.push_back(a);
        const auto corr = pearson_matrix(data.labels, binary);

        OutputStage stage;
        stage.add("predictions.csv", predictions_to_csv(records));
        stage.add("rcp.csv", rcp_table_to_csv(rows, args.fractions));
        stage.add("correlation.csv", correlation_to_csv(corr));
        stage.add("summary.csv", category_summary_csv(rows));
        std::size_t defined_pairs = 0;
        for (std::size_t i = 0; i < corr.size(); ++i)
            for (std::size_t j = i + 1; j < corr.size(); ++j)
                if (corr.at(i, j)) ++defined_pairs;
        if (defined_pairs > 0) {
            const auto top = top_correlations(corr, std::min(kDefaultTopPairs, defined_pairs));
            std::string text = "sign,first,second,pearson\n";
            for (const auto& p : top.positive) text += "positive," + p.first + "," + p.second + "," + csv::format_fixed(p.value) + "\n";
            for (const auto& p : top.negative) text += "negative," + p.first + "," + p.second + "," + csv::format_fixed(p.value) + "\n";
            stage.add("top_correlations.csv", text);
        }
        for (const auto& row : rows) {
            log << row.attribute;
            for (std::size_t i = 0; i < row.fractions.size(); ++i) {
                log << "  " << rcp_column_name(row.fractions[i]) << "="
                    << (row.accuracy[i] ? csv::format_fixed(*row.accuracy[i], 4) : std::string("n/a"));
            }
            log << "\n";
        }
        finish(global, manifest, stage, log);
        return kOk;
    });
}

}  // namespace templaudit::cli
