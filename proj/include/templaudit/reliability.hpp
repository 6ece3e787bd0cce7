#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "templaudit/csv.hpp"
#include "templaudit/errors.hpp"
#include "templaudit/mac_model.hpp"
#include "templaudit/numeric.hpp"
#include "templaudit/parallel.hpp"

namespace templaudit {

struct ReliabilityConfig {
    std::size_t m = 100;        // stochastic forward passes
    double alpha = 0.5;         // centrality vs. dispersion weight
    /// Pick the class from one dropout-free pass instead of the mean of the
    /// stochastic passes.
    bool deterministic_class = false;

    void validate() const {
        if (m == 0) throw ConfigError("reliability: m must be positive");
        if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("reliability: alpha must lie in [0,1]");
    }
};

struct PredictionRecord {
    std::string sample_id;
    std::string attribute;
    std::size_t predicted_class = 0;
    double reliability = 0.0;
    std::vector<double> passes;  // probability of predicted_class in each pass
};

/// Stack of stochastic outputs: passes[i][h] is head h's softmax in pass i.
using PassStack = std::vector<std::vector<Matrix>>;

/// m dropout passes with running batch-norm statistics. Pass i draws its masks
/// from rng.split(i), so the stack is the same for any worker count.
inline PassStack mc_passes(const MacModel& model, const Matrix& batch, const ReliabilityConfig& cfg, const Rng& rng) {
    cfg.validate();
    PassStack stack(cfg.m);
    parallel_for(cfg.m, [&](std::size_t i) {
        Rng pass_rng = rng.split(static_cast<std::uint64_t>(i));
        stack[i] = predict(model, batch, ForwardMode::McDropout, &pass_rng);
    });
    return stack;
}

/// (1-alpha)/m * sum x_i  -  alpha/m^2 * sum_i sum_j |x_i - x_j|
///
/// The pairwise sum is evaluated in O(m log m): with x sorted ascending,
/// sum_{i<j} (x_j - x_i) = sum_k x_k (2k - m + 1).
inline double reliability_score(std::span<const double> x, double alpha) {
    if (x.empty()) throw RangeError("reliability_score: empty input");
    const double m = static_cast<double>(x.size());
    std::vector<double> sorted(x.begin(), x.end());
    std::sort(sorted.begin(), sorted.end());
    double total = 0.0;
    double pairwise = 0.0;
    for (std::size_t k = 0; k < sorted.size(); ++k) {
        total += sorted[k];
        pairwise += sorted[k] * (2.0 * static_cast<double>(k) - m + 1.0);
    }
    return (1.0 - alpha) / m * total - alpha / (m * m) * (2.0 * pairwise);
}

/// One record per (sample, head). The class is the argmax of the mean softmax
/// over passes (or of `deterministic[h]` when given); x collects that class's
/// probability from every pass.
inline std::vector<PredictionRecord> predict_with_reliability(const PassStack& passes,
                                                              const ReliabilityConfig& cfg,
                                                              std::span<const std::string> sample_ids,
                                                              std::span<const std::string> attributes,
                                                              const std::vector<Matrix>* deterministic = nullptr) {
    cfg.validate();
    if (passes.empty()) throw ShapeError("predict_with_reliability: no passes");
    const std::size_t n_heads = passes.front().size();
    if (attributes.size() != n_heads) throw ShapeError("predict_with_reliability: attribute count != head count");
    for (const auto& pass : passes) {
        if (pass.size() != n_heads) throw ShapeError("predict_with_reliability: inconsistent head count");
        for (std::size_t h = 0; h < n_heads; ++h) {
            if (pass[h].rows() != sample_ids.size() || pass[h].cols() != passes.front()[h].cols()) {
                throw ShapeError("predict_with_reliability: pass shape mismatch on head " + std::to_string(h));
            }
        }
    }
    if (deterministic && deterministic->size() != n_heads) {
        throw ShapeError("predict_with_reliability: deterministic output head count mismatch");
    }

    const std::size_t n = sample_ids.size();
    const std::size_t m = passes.size();
    std::vector<PredictionRecord> records;
    records.reserve(n * n_heads);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t k = passes.front()[h].cols();
            std::size_t cls = 0;
            if (deterministic) {
                const auto row = (*deterministic)[h].row(i);
                for (std::size_t c = 1; c < k; ++c)
                    if (row[c] > row[cls]) cls = c;
            } else {
                std::vector<double> mean(k, 0.0);
                for (const auto& pass : passes) {
                    const auto row = pass[h].row(i);
                    for (std::size_t c = 0; c < k; ++c) mean[c] += row[c];
                }
                for (std::size_t c = 1; c < k; ++c)
                    if (mean[c] > mean[cls]) cls = c;
            }
            PredictionRecord rec;
            rec.sample_id = sample_ids[i];
            rec.attribute = attributes[h];
            rec.predicted_class = cls;
            rec.passes.resize(m);
            for (std::size_t p = 0; p < m; ++p) rec.passes[p] = passes[p][h](i, cls);
            rec.reliability = reliability_score(rec.passes, cfg.alpha);
            records.push_back(std::move(rec));
        }
    }
    return records;
}

/// Number of records kept at a given ratio of considered predictions.
inline std::size_t rcp_keep_count(std::size_t n, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw RangeError("RCP fraction must lie in (0,1]");
    // The epsilon absorbs representation error such as 0.7 * 10 = 7.000000000000001.
    const double exact = fraction * static_cast<double>(n);
    const auto keep = static_cast<std::size_t>(std::ceil(exact - 1e-9));
    return std::clamp<std::size_t>(keep, 1, n);
}

/// The ceil(fraction * n) most reliable records, highest first; ties at equal
/// reliability go to the lower sample id.
inline std::vector<PredictionRecord> rcp_filter(std::span<const PredictionRecord> records, double fraction) {
    if (records.empty()) throw RangeError("rcp_filter: no records");
    const std::size_t keep = rcp_keep_count(records.size(), fraction);
    std::vector<std::size_t> order(records.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (records[a].reliability != records[b].reliability) return records[a].reliability > records[b].reliability;
        return records[a].sample_id < records[b].sample_id;
    });
    std::vector<PredictionRecord> out;
    out.reserve(keep);
    for (std::size_t i = 0; i < keep; ++i) out.push_back(records[order[i]]);
    return out;
}

inline std::string predictions_to_csv(std::span<const PredictionRecord> records) {
    std::string out = "sample_id,attribute,predicted_class,reliability\n";
    for (const auto& r : records) {
        out += r.sample_id + "," + r.attribute + "," + std::to_string(r.predicted_class) + "," +
               csv::format_double(r.reliability) + "\n";
    }
    return out;
}

}  // namespace templaudit
