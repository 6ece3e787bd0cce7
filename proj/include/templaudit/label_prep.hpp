#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "templaudit/csv.hpp"
#include "templaudit/data_io.hpp"
#include "templaudit/errors.hpp"

namespace templaudit {

struct ThresholdPair {
    std::string attribute;
    double lower = 0.0;
    double upper = 0.0;
};

struct SufficiencyCounts {
    std::size_t train_pos = 0;
    std::size_t train_neg = 0;
    std::size_t test_pos = 0;
    std::size_t test_neg = 0;

    std::size_t min() const { return std::min({train_pos, train_neg, test_pos, test_neg}); }
};

struct SufficiencyFlag {
    std::string attribute;
    SufficiencyCounts counts;
    bool sufficient = false;
};

inline constexpr std::size_t kDefaultMinCount = 100;
inline constexpr std::size_t kDefaultProbeSize = 10;

/// Continuous per-sample scores for a set of attributes.
struct ScoreTable {
    std::vector<std::string> sample_ids;
    std::vector<std::string> attributes;
    std::vector<double> values;  // row-major, n_samples x n_attributes

    std::vector<double> column(std::size_t a) const {
        std::vector<double> out(sample_ids.size());
        for (std::size_t i = 0; i < sample_ids.size(); ++i) out[i] = values[i * attributes.size() + a];
        return out;
    }
};

/// score > upper is TRUE, score < lower is FALSE, anything in between UNDEFINED.
inline std::vector<int> binarize_scores(std::span<const double> scores, const ThresholdPair& t) {
    if (t.lower > t.upper) {
        throw ConfigError("threshold for '" + t.attribute + "' has lower > upper");
    }
    std::vector<int> out;
    out.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const double s = scores[i];
        if (std::isnan(s)) throw DataError("NaN score at position " + std::to_string(i));
        out.push_back(s > t.upper ? kTrue : s < t.lower ? kFalse : kUndefined);
    }
    return out;
}

/// The k sample ids whose scores lie closest to `candidate`, nearest first,
/// ties broken by id. Used while hand-tuning thresholds: the caller inspects
/// these samples and decides whether the candidate is acceptable.
inline std::vector<std::string> threshold_probe(std::span<const double> scores,
                                                std::span<const std::string> ids, double candidate,
                                                std::size_t k = kDefaultProbeSize) {
    if (scores.size() != ids.size()) throw ShapeError("threshold_probe: scores and ids differ in length");
    if (k > scores.size()) {
        throw RangeError("threshold_probe: k=" + std::to_string(k) + " exceeds " +
                         std::to_string(scores.size()) + " samples");
    }
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double da = std::abs(scores[a] - candidate);
        const double db = std::abs(scores[b] - candidate);
        if (da != db) return da < db;
        return ids[a] < ids[b];
    });
    std::vector<std::string> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(ids[order[i]]);
    return out;
}

/// Per-split, per-class counts of every binary attribute; an attribute is
/// sufficient only when all four counts reach `min_count`.
inline std::vector<SufficiencyFlag> sufficiency_filter(const LabelSet& labels, const SplitAssignment& split,
                                                       std::size_t min_count = kDefaultMinCount) {
    std::vector<SufficiencyFlag> flags;
    for (std::size_t a = 0; a < labels.n_attributes(); ++a) {
        if (labels.attributes[a].n_out != 2) {
            throw ConfigError("sufficiency_filter: attribute '" + labels.attributes[a].name + "' is not binary");
        }
        SufficiencyFlag flag{labels.attributes[a].name, {}, false};
        for (std::size_t i = 0; i < labels.size(); ++i) {
            const int y = labels.at(i, a);
            if (y == kUndefined) continue;
            const auto& id = labels.sample_ids[i];
            if (split.train_sample_ids.contains(id)) {
                ++(y == kTrue ? flag.counts.train_pos : flag.counts.train_neg);
            } else if (split.test_sample_ids.contains(id)) {
                ++(y == kTrue ? flag.counts.test_pos : flag.counts.test_neg);
            }
        }
        flag.sufficient = flag.counts.min() >= min_count;
        flags.push_back(std::move(flag));
    }
    return flags;
}

inline std::string sufficiency_to_csv(const std::vector<SufficiencyFlag>& flags) {
    std::string out = "attribute,train_pos,train_neg,test_pos,test_neg,sufficient\n";
    for (const auto& f : flags) {
        out += f.attribute + "," + std::to_string(f.counts.train_pos) + "," + std::to_string(f.counts.train_neg) +
               "," + std::to_string(f.counts.test_pos) + "," + std::to_string(f.counts.test_neg) + "," +
               (f.sufficient ? "1" : "0") + "\n";
    }
    return out;
}

/// `attribute,lower,upper` records; an optional header line is skipped.
inline std::vector<ThresholdPair> load_thresholds(const std::filesystem::path& path) {
    csv::LineReader reader(path);
    std::vector<ThresholdPair> out;
    std::unordered_set<std::string> seen;
    std::string line;
    bool first = true;
    while (reader.next(line)) {
        const auto cells = csv::split(line);
        if (first && !cells.empty() && cells[0] == "attribute") {
            first = false;
            continue;
        }
        first = false;
        if (cells.size() != 3) reader.fail("expected attribute,lower,upper");
        const auto lower = csv::parse_double(cells[1]);
        const auto upper = csv::parse_double(cells[2]);
        if (!lower || !upper || !std::isfinite(*lower) || !std::isfinite(*upper)) {
            reader.fail("thresholds must be finite numbers");
        }
        if (*lower > *upper) reader.fail("lower threshold exceeds upper for '" + cells[0] + "'");
        if (!seen.insert(cells[0]).second) reader.fail("duplicate attribute '" + cells[0] + "'");
        out.push_back({cells[0], *lower, *upper});
    }
    if (out.empty()) reader.fail("no thresholds");
    return out;
}

/// Score CSV: header `sample_id,<attr1>,...`, one real score per cell.
inline ScoreTable load_scores(const std::filesystem::path& path) {
    csv::LineReader reader(path);
    std::string line;
    if (!reader.next(line)) reader.fail("no samples");
    const auto header = csv::split(line);
    if (header.size() < 2 || header[0] != "sample_id") reader.fail("header must be sample_id,<attr>,...");
    ScoreTable table;
    table.attributes.assign(header.begin() + 1, header.end());
    std::unordered_set<std::string> seen;
    while (reader.next(line)) {
        const auto cells = csv::split(line);
        if (cells.size() != header.size()) reader.fail("ragged row");
        if (!seen.insert(cells[0]).second) reader.fail("duplicate sample_id '" + cells[0] + "'");
        table.sample_ids.push_back(cells[0]);
        for (std::size_t j = 1; j < cells.size(); ++j) {
            const auto v = csv::parse_double(cells[j]);
            if (!v || std::isnan(*v)) reader.fail("non-numeric score '" + cells[j] + "'");
            table.values.push_back(*v);
        }
    }
    if (table.sample_ids.empty()) reader.fail("no samples");
    return table;
}

/// Applies per-attribute thresholds to every score column. Every column must
/// have a threshold and a metadata record.
inline LabelSet clean_labels(const ScoreTable& scores, const std::vector<ThresholdPair>& thresholds,
                             const std::vector<AttributeMeta>& metas) {
    LabelSet out;
    out.sample_ids = scores.sample_ids;
    std::vector<std::vector<int>> columns;
    for (std::size_t a = 0; a < scores.attributes.size(); ++a) {
        const auto& name = scores.attributes[a];
        const auto t = std::find_if(thresholds.begin(), thresholds.end(),
                                    [&](const ThresholdPair& p) { return p.attribute == name; });
        if (t == thresholds.end()) throw ConfigError("no threshold for attribute '" + name + "'");
        const auto m = std::find_if(metas.begin(), metas.end(),
                                    [&](const AttributeMeta& meta) { return meta.name == name; });
        if (m == metas.end()) throw ConfigError("no metadata for attribute '" + name + "'");
        if (m->n_out != 2) throw ConfigError("attribute '" + name + "' is not binary");
        out.attributes.push_back(*m);
        columns.push_back(binarize_scores(scores.column(a), *t));
    }
    out.values.resize(out.sample_ids.size() * out.attributes.size());
    for (std::size_t i = 0; i < out.sample_ids.size(); ++i)
        for (std::size_t a = 0; a < out.attributes.size(); ++a) out.at(i, a) = columns[a][i];
    return out;
}

/// Share of labels lost to cleaning, counted two ways: over individual cells,
/// and over samples that lost every label.
struct LabelReduction {
    double cell_fraction = 0.0;
    double sample_fraction = 0.0;
};

inline LabelReduction label_reduction(const LabelSet& cleaned) {
    LabelReduction r;
    if (cleaned.size() == 0 || cleaned.n_attributes() == 0) return r;
    std::size_t undefined_cells = 0;
    std::size_t empty_samples = 0;
    for (std::size_t i = 0; i < cleaned.size(); ++i) {
        std::size_t undefined_here = 0;
        for (std::size_t a = 0; a < cleaned.n_attributes(); ++a)
            if (cleaned.at(i, a) == kUndefined) ++undefined_here;
        undefined_cells += undefined_here;
        if (undefined_here == cleaned.n_attributes()) ++empty_samples;
    }
    r.cell_fraction = static_cast<double>(undefined_cells) / static_cast<double>(cleaned.values.size());
    r.sample_fraction = static_cast<double>(empty_samples) / static_cast<double>(cleaned.size());
    return r;
}

}  // namespace templaudit
