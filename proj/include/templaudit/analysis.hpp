#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <unordered_map>
#include <vector>

#include "templaudit/csv.hpp"
#include "templaudit/data_io.hpp"
#include "templaudit/errors.hpp"
#include "templaudit/reliability.hpp"

namespace templaudit {

// ---------------------------------------------------------------------------
// Balanced accuracy

/// Mean per-class recall over K classes; equals accuracy with class-balanced
/// sample weights. Every class must occur in y_true.
inline double balanced_accuracy(std::span<const int> y_true, std::span<const int> y_pred, std::size_t n_classes) {
    if (y_true.size() != y_pred.size()) throw ShapeError("balanced_accuracy: length mismatch");
    std::vector<std::size_t> total(n_classes, 0);
    std::vector<std::size_t> hit(n_classes, 0);
    for (std::size_t i = 0; i < y_true.size(); ++i) {
        const int y = y_true[i];
        if (y < 0 || static_cast<std::size_t>(y) >= n_classes) {
            throw DataError("balanced_accuracy: true label " + std::to_string(y) + " out of range");
        }
        ++total[static_cast<std::size_t>(y)];
        if (y_pred[i] == y) ++hit[static_cast<std::size_t>(y)];
    }
    double sum = 0.0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (total[c] == 0) throw DegenerateError("balanced_accuracy: class " + std::to_string(c) + " absent from truth");
        sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
    }
    return sum / static_cast<double>(n_classes);
}

// ---------------------------------------------------------------------------
// RCP tables

struct RcpRow {
    std::string attribute;
    std::string category;
    std::vector<double> fractions;
    std::vector<std::optional<double>> accuracy;  // parallel to fractions; empty when undefined

    std::optional<double> at(double fraction) const {
        for (std::size_t i = 0; i < fractions.size(); ++i)
            if (fractions[i] == fraction) return accuracy[i];
        return std::nullopt;
    }
};

/// Balanced accuracy of each attribute after keeping the most reliable share
/// of its predictions, for every requested fraction. Predictions whose true
/// label is undefined are left out before filtering. A cell whose retained
/// subset misses a class is left undefined.
inline std::vector<RcpRow> rcp_accuracy_table(std::span<const PredictionRecord> records, const LabelSet& truth,
                                              std::span<const double> fractions) {
    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < truth.size(); ++i) row_of.emplace(truth.sample_ids[i], i);

    std::vector<RcpRow> rows;
    for (std::size_t a = 0; a < truth.n_attributes(); ++a) {
        const auto& meta = truth.attributes[a];
        std::vector<PredictionRecord> mine;
        bool seen = false;
        for (const auto& r : records) {
            if (r.attribute != meta.name) continue;
            seen = true;
            const auto it = row_of.find(r.sample_id);
            if (it == row_of.end()) throw DataError("rcp_accuracy_table: no truth for sample '" + r.sample_id + "'");
            if (truth.at(it->second, a) == kUndefined) continue;
            mine.push_back(r);
        }
        if (!seen) continue;
        RcpRow row{meta.name, meta.category, {fractions.begin(), fractions.end()}, {}};
        for (const double f : fractions) {
            if (mine.empty()) {
                row.accuracy.push_back(std::nullopt);
                continue;
            }
            const auto kept = rcp_filter(mine, f);
            std::vector<int> y_true;
            std::vector<int> y_pred;
            for (const auto& r : kept) {
                y_true.push_back(truth.at(row_of.at(r.sample_id), a));
                y_pred.push_back(static_cast<int>(r.predicted_class));
            }
            try {
                row.accuracy.push_back(balanced_accuracy(y_true, y_pred, meta.n_out));
            } catch (const DegenerateError&) {
                row.accuracy.push_back(std::nullopt);
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Predictability classes

enum class PredictabilityClass { Easily, Predictable, Hardly };

inline constexpr double kPredictabilityThreshold = 0.90;

inline const char* marker(PredictabilityClass c) {
    switch (c) {
        case PredictabilityClass::Easily: return "++";
        case PredictabilityClass::Predictable: return "+";
        case PredictabilityClass::Hardly: return "0";
    }
    return "?";
}

/// EASILY when acc100 > threshold, else PREDICTABLE when acc50 > threshold,
/// else HARDLY. Comparisons are strict.
inline PredictabilityClass assign_predictability(double acc100, double acc50,
                                                 double threshold = kPredictabilityThreshold) {
    if (acc100 > threshold) return PredictabilityClass::Easily;
    if (acc50 > threshold) return PredictabilityClass::Predictable;
    return PredictabilityClass::Hardly;
}

/// How to fold the classes one attribute received under several embedding
/// models into a single marker.
enum class ClassAggregation {
    First,  // the first (reference) embedding decides
    Best,
    Worst,
};

inline PredictabilityClass aggregate_classes(std::span<const PredictabilityClass> classes, ClassAggregation policy) {
    if (classes.empty()) throw RangeError("aggregate_classes: no classes");
    // Enum order runs from most to least predictable.
    switch (policy) {
        case ClassAggregation::First: return classes.front();
        case ClassAggregation::Best: return *std::min_element(classes.begin(), classes.end());
        case ClassAggregation::Worst: return *std::max_element(classes.begin(), classes.end());
    }
    return classes.front();
}

inline std::string rcp_column_name(double fraction) {
    return "acc_rcp" + std::to_string(static_cast<long>(std::lround(fraction * 100.0)));
}

/// `attribute,category,acc_rcp100,acc_rcp50,...[,class]`. The class column is
/// written only when both the 100% and 50% levels are present.
inline std::string rcp_table_to_csv(std::span<const RcpRow> rows, std::span<const double> fractions) {
    const bool with_class = std::find(fractions.begin(), fractions.end(), 1.0) != fractions.end() &&
                            std::find(fractions.begin(), fractions.end(), 0.5) != fractions.end();
    std::string out = "attribute,category";
    for (const double f : fractions) out += "," + rcp_column_name(f);
    if (with_class) out += ",class";
    out += '\n';
    for (const auto& row : rows) {
        out += row.attribute + "," + row.category;
        for (const auto& acc : row.accuracy) out += "," + (acc ? csv::format_fixed(*acc) : std::string());
        if (with_class) {
            const auto a100 = row.at(1.0);
            const auto a50 = row.at(0.5);
            out += ",";
            if (a100 && a50) out += marker(assign_predictability(*a100, *a50));
        }
        out += '\n';
    }
    return out;
}

/// Category rollup: how many attributes of each category landed in each class.
/// Attributes without both accuracies are not counted.
inline std::string category_summary_csv(std::span<const RcpRow> rows) {
    std::vector<std::string> order;
    std::map<std::string, std::array<std::size_t, 3>> counts;
    for (const auto& row : rows) {
        const auto a100 = row.at(1.0);
        const auto a50 = row.at(0.5);
        if (!counts.contains(row.category)) {
            order.push_back(row.category);
            counts[row.category] = {0, 0, 0};
        }
        if (!a100 || !a50) continue;
        ++counts[row.category][static_cast<std::size_t>(assign_predictability(*a100, *a50))];
    }
    std::string out = "category,n_easily,n_predictable,n_hardly\n";
    for (const auto& cat : order) {
        const auto& c = counts[cat];
        out += cat + "," + std::to_string(c[0]) + "," + std::to_string(c[1]) + "," + std::to_string(c[2]) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Label correlations

struct CorrelationMatrix {
    std::vector<std::string> attributes;
    std::vector<std::optional<double>> values;  // n x n, row-major

    std::size_t size() const { return attributes.size(); }
    const std::optional<double>& at(std::size_t i, std::size_t j) const { return values[i * attributes.size() + j]; }
    std::optional<double>& at(std::size_t i, std::size_t j) { return values[i * attributes.size() + j]; }
};

/// Pearson coefficient of the 0/1 encodings for every attribute pair, over
/// samples where both labels are defined. Cells with fewer than two joint
/// samples or a constant column are undefined.
inline CorrelationMatrix pearson_matrix(const LabelSet& labels, std::span<const std::size_t> attributes) {
    CorrelationMatrix m;
    const std::size_t n = attributes.size();
    for (const auto a : attributes) {
        if (a >= labels.n_attributes()) throw RangeError("pearson_matrix: attribute index out of range");
        if (labels.attributes[a].n_out != 2) {
            throw ConfigError("pearson_matrix: attribute '" + labels.attributes[a].name + "' is not binary");
        }
        m.attributes.push_back(labels.attributes[a].name);
    }
    m.values.assign(n * n, std::nullopt);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i; j < n; ++j) {
            const auto ai = attributes[i];
            const auto aj = attributes[j];
            double count = 0.0, sx = 0.0, sy = 0.0;
            for (std::size_t s = 0; s < labels.size(); ++s) {
                const int x = labels.at(s, ai);
                const int y = labels.at(s, aj);
                if (x == kUndefined || y == kUndefined) continue;
                count += 1.0;
                sx += x;
                sy += y;
            }
            if (count < 2.0) continue;
            const double mx = sx / count;
            const double my = sy / count;
            double sxy = 0.0, sxx = 0.0, syy = 0.0;
            for (std::size_t s = 0; s < labels.size(); ++s) {
                const int x = labels.at(s, ai);
                const int y = labels.at(s, aj);
                if (x == kUndefined || y == kUndefined) continue;
                const double dx = x - mx;
                const double dy = y - my;
                sxy += dx * dy;
                sxx += dx * dx;
                syy += dy * dy;
            }
            if (sxx == 0.0 || syy == 0.0) continue;
            const double r = i == j ? 1.0 : std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
            m.at(i, j) = r;
            m.at(j, i) = r;
        }
    }
    return m;
}

inline CorrelationMatrix pearson_matrix(const LabelSet& labels) {
    std::vector<std::size_t> all(labels.n_attributes());
    for (std::size_t a = 0; a < all.size(); ++a) all[a] = a;
    return pearson_matrix(labels, all);
}

struct CorrelationPair {
    std::string first;   // lexicographically smaller name
    std::string second;
    double value = 0.0;
};

struct TopCorrelations {
    std::vector<CorrelationPair> positive;  // most positive first
    std::vector<CorrelationPair> negative;  // most negative first
};

inline constexpr std::size_t kDefaultTopPairs = 15;

/// The k most positive and k most negative defined off-diagonal pairs.
inline TopCorrelations top_correlations(const CorrelationMatrix& m, std::size_t k = kDefaultTopPairs) {
    std::vector<CorrelationPair> pairs;
    for (std::size_t i = 0; i < m.size(); ++i) {
        for (std::size_t j = i + 1; j < m.size(); ++j) {
            if (!m.at(i, j)) continue;
            auto a = m.attributes[i];
            auto b = m.attributes[j];
            if (b < a) std::swap(a, b);
            pairs.push_back({a, b, *m.at(i, j)});
        }
    }
    if (k == 0 || k > pairs.size()) {
        throw RangeError("top_correlations: k=" + std::to_string(k) + " but only " + std::to_string(pairs.size()) +
                         " defined pairs");
    }
    const auto by_name = [](const CorrelationPair& x, const CorrelationPair& y) {
        return std::tie(x.first, x.second) < std::tie(y.first, y.second);
    };
    TopCorrelations top;
    auto sorted = pairs;
    std::sort(sorted.begin(), sorted.end(), [&](const CorrelationPair& x, const CorrelationPair& y) {
        if (x.value != y.value) return x.value > y.value;
        return by_name(x, y);
    });
    top.positive.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(sorted.begin(), sorted.end(), [&](const CorrelationPair& x, const CorrelationPair& y) {
        if (x.value != y.value) return x.value < y.value;
        return by_name(x, y);
    });
    top.negative.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k));
    return top;
}

/// Square matrix with attribute names as header row and first column;
/// undefined cells are left empty.
inline std::string correlation_to_csv(const CorrelationMatrix& m) {
    std::string out = "attribute";
    for (const auto& a : m.attributes) out += "," + a;
    out += '\n';
    for (std::size_t i = 0; i < m.size(); ++i) {
        out += m.attributes[i];
        for (std::size_t j = 0; j < m.size(); ++j) {
            out += ",";
            if (m.at(i, j)) out += csv::format_fixed(*m.at(i, j));
        }
        out += '\n';
    }
    return out;
}

}  // namespace templaudit
