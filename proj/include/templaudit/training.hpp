#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "templaudit/analysis.hpp"
#include "templaudit/data_io.hpp"
#include "templaudit/errors.hpp"
#include "templaudit/mac_model.hpp"
#include "templaudit/numeric.hpp"
#include "templaudit/parallel.hpp"

namespace templaudit {

struct TrainConfig {
    std::size_t epochs = 200;
    double learning_rate = 1e-3;
    /// Learning-rate decay; defaults to learning_rate / epochs when unset.
    std::optional<double> decay;
    std::size_t batch_size = 1024;
    std::uint64_t seed = 0;
    /// Weight each sample's loss by its inverse class frequency.
    bool class_weighting = false;

    double decay_rate() const {
        if (decay) return *decay;
        return epochs == 0 ? 0.0 : learning_rate / static_cast<double>(epochs);
    }
};

/// eta_t = lr / (1 + decay * t), t counting parameter updates from zero.
inline double lr_schedule(const TrainConfig& cfg, std::uint64_t t) {
    return cfg.learning_rate / (1.0 + cfg.decay_rate() * static_cast<double>(t));
}

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
    double loss = 0.0;
    std::vector<double> head_loss;
    std::vector<Matrix> grads;  // d loss / d softmax output, per head
};

/// Equal-weight sum over heads of the mean cross-entropy over each head's
/// defined samples. targets[h][i] is the class of sample i for head h, or
/// kUndefined to mask it. Optional class_weights[h][c] scale each term.
inline LossResult multitask_loss(const std::vector<Matrix>& outputs, const std::vector<std::vector<int>>& targets,
                                 const std::vector<std::vector<double>>* class_weights = nullptr) {
    if (targets.size() != outputs.size()) throw ShapeError("multitask_loss: target head count mismatch");
    if (class_weights && class_weights->size() != outputs.size()) {
        throw ShapeError("multitask_loss: class weight head count mismatch");
    }
    LossResult result;
    result.head_loss.assign(outputs.size(), 0.0);
    result.grads.reserve(outputs.size());
    for (std::size_t h = 0; h < outputs.size(); ++h) {
        const Matrix& p = outputs[h];
        const auto& y = targets[h];
        if (y.size() != p.rows()) throw ShapeError("multitask_loss: target length mismatch on head " + std::to_string(h));
        Matrix g(p.rows(), p.cols());
        std::size_t defined = 0;
        for (const int c : y)
            if (c != kUndefined) ++defined;
        if (defined > 0) {
            const double inv_n = 1.0 / static_cast<double>(defined);
            double sum = 0.0;
            for (std::size_t i = 0; i < y.size(); ++i) {
                if (y[i] == kUndefined) continue;
                if (y[i] < 0 || static_cast<std::size_t>(y[i]) >= p.cols()) {
                    throw DataError("multitask_loss: label " + std::to_string(y[i]) + " out of range on head " +
                                    std::to_string(h));
                }
                const auto c = static_cast<std::size_t>(y[i]);
                const double w = class_weights ? (*class_weights)[h][c] : 1.0;
                const double prob = std::max(p(i, c), 1e-300);
                sum += -w * std::log(prob);
                g(i, c) = -w * inv_n / prob;
            }
            result.head_loss[h] = sum * inv_n;
        }
        result.loss += result.head_loss[h];
        result.grads.push_back(std::move(g));
    }
    return result;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    std::uint64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::vector<std::vector<double>> first_moment;
    std::vector<std::vector<double>> second_moment;
};

/// One bias-corrected Adam update over every block. Blocks must keep the same
/// order and sizes between calls.
inline void adam_step(AdamState& state, std::span<const ParameterBlock> blocks, double lr) {
    for (const auto& b : blocks) {
        if (b.grad.size() != b.values.size()) throw ShapeError("adam_step: gradient size mismatch in " + b.name);
        if (!all_finite(b.grad)) throw NumericError("adam_step: non-finite gradient in " + b.name);
    }
    if (state.first_moment.empty()) {
        for (const auto& b : blocks) {
            state.first_moment.emplace_back(b.values.size(), 0.0);
            state.second_moment.emplace_back(b.values.size(), 0.0);
        }
    }
    if (state.first_moment.size() != blocks.size()) throw ShapeError("adam_step: block count changed");
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double c1 = 1.0 - std::pow(state.beta1, t);
    const double c2 = 1.0 - std::pow(state.beta2, t);
    for (std::size_t k = 0; k < blocks.size(); ++k) {
        auto& m = state.first_moment[k];
        auto& v = state.second_moment[k];
        const auto& b = blocks[k];
        if (m.size() != b.values.size()) throw ShapeError("adam_step: block " + b.name + " changed size");
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double g = b.grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            const double m_hat = m[i] / c1;
            const double v_hat = v[i] / c2;
            b.values[i] -= lr * m_hat / (std::sqrt(v_hat) + state.epsilon);
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainHistory {
    std::vector<double> epoch_loss;
};

namespace detail {

/// Column index in `labels` for each model head, matched by name.
inline std::vector<std::size_t> head_columns(const MacModel& model, const LabelSet& labels) {
    std::vector<std::size_t> cols;
    for (const auto& head : model.spec.heads) {
        const auto a = labels.attribute_index(head.name);
        if (labels.attributes[a].n_out != head.n_out) {
            throw ConfigError("head '" + head.name + "' has " + std::to_string(head.n_out) +
                              " outputs but the labels declare " + std::to_string(labels.attributes[a].n_out));
        }
        cols.push_back(a);
    }
    return cols;
}

}  // namespace detail

inline MacSpec spec_for(const Dataset& data, std::vector<std::size_t> trunk = {512}, std::vector<std::size_t> branch = {512},
                        double p_drop = 0.5) {
    MacSpec spec;
    spec.n_in = data.vectors.cols();
    spec.trunk_sizes = std::move(trunk);
    spec.branch_sizes = std::move(branch);
    spec.p_drop = p_drop;
    for (const auto& a : data.labels.attributes) spec.heads.push_back({a.name, a.n_out});
    return spec;
}

/// Mini-batch training for cfg.epochs epochs. Samples are reshuffled every
/// epoch; a trailing batch smaller than 2 samples is dropped. Deterministic
/// for a given cfg.seed.
inline TrainHistory train(MacModel& model, const Dataset& data, const TrainConfig& cfg) {
    if (data.size() == 0) throw ConfigError("train: empty training set");
    if (cfg.batch_size < 2) throw ConfigError("train: batch_size must be at least 2");
    if (cfg.epochs > 0 && cfg.batch_size > data.size()) {
        throw ConfigError("train: batch_size " + std::to_string(cfg.batch_size) + " exceeds " +
                          std::to_string(data.size()) + " training samples");
    }
    if (data.size() < 2) throw ConfigError("train: need at least 2 training samples");
    const auto cols = detail::head_columns(model, data.labels);

    std::optional<std::vector<std::vector<double>>> weights;
    if (cfg.class_weighting) {
        weights.emplace();
        for (std::size_t h = 0; h < cols.size(); ++h) {
            weights->push_back(class_balance_weights(data.labels.column(cols[h]), model.spec.heads[h].n_out));
        }
    }

    const Rng root(cfg.seed);
    Rng shuffle_rng = root.split("shuffle");
    Rng dropout_rng = root.split("dropout");
    AdamState adam;
    TrainHistory history;
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < 2) break;
            const std::span<const std::size_t> idx(order.data() + start, end - start);
            const Matrix x = gather_rows(data.vectors, idx);
            std::vector<std::vector<int>> targets(cols.size());
            for (std::size_t h = 0; h < cols.size(); ++h) {
                targets[h].reserve(idx.size());
                for (const auto i : idx) targets[h].push_back(data.labels.at(i, cols[h]));
            }
            auto fwd = forward(model, x, ForwardMode::Train, &dropout_rng);
            const auto loss = multitask_loss(fwd.outputs, targets, weights ? &*weights : nullptr);
            auto grads = backward(model, fwd.cache, loss.grads);
            const auto blocks = parameter_blocks(model, &grads);
            adam_step(adam, blocks, lr_schedule(cfg, adam.step));
            model.touch();
            loss_sum += loss.loss;
            ++batches;
        }
        history.epoch_loss.push_back(batches ? loss_sum / static_cast<double>(batches) : 0.0);
    }
    return history;
}

/// Per-attribute balanced accuracy of dropout-free predictions. Attributes
/// whose defined labels miss a class come back empty.
inline std::vector<std::optional<double>> evaluate_balanced_accuracy(const MacModel& model, const Dataset& data) {
    const auto cols = detail::head_columns(model, data.labels);
    const auto outputs = predict(model, data.vectors, ForwardMode::Infer);
    std::vector<std::optional<double>> acc;
    for (std::size_t h = 0; h < cols.size(); ++h) {
        const auto pred = argmax_rows(outputs[h]);
        std::vector<int> y_true, y_pred;
        for (std::size_t i = 0; i < data.size(); ++i) {
            const int y = data.labels.at(i, cols[h]);
            if (y == kUndefined) continue;
            y_true.push_back(y);
            y_pred.push_back(static_cast<int>(pred[i]));
        }
        try {
            acc.push_back(balanced_accuracy(y_true, y_pred, model.spec.heads[h].n_out));
        } catch (const DegenerateError&) {
            acc.push_back(std::nullopt);
        }
    }
    return acc;
}

// ---------------------------------------------------------------------------
// Structure search

struct SearchSpace {
    std::vector<std::size_t> trunk_depths{1, 2, 3};
    std::vector<std::size_t> branch_depths{1, 2, 3};
    std::vector<std::size_t> layer_sizes{128, 256, 512};
    std::size_t n_candidates = 10;
    std::size_t n_repeats = 3;
};

struct SearchRun {
    std::size_t candidate = 0;
    std::size_t repeat = 0;
    std::uint64_t seed = 0;
    std::vector<std::optional<double>> validation_accuracy;  // per head
};

struct SearchCandidate {
    MacSpec spec;
    double stability = 0.0;      // mean over attributes of across-repeat std. deviation
    double mean_accuracy = 0.0;  // mean over attributes and repeats
};

struct SearchResult {
    MacSpec chosen;
    std::size_t chosen_index = 0;
    std::vector<SearchCandidate> candidates;
    std::vector<SearchRun> runs;  // candidate-major, repeat-minor
};

/// Draws n_candidates layouts uniformly from the space, trains each n_repeats
/// times with distinct seeds, and keeps the layout whose validation balanced
/// accuracy varies least across repeats (ties: higher mean accuracy, then
/// lower index). `base` supplies n_in, heads and dropout.
inline SearchResult structure_search(const SearchSpace& space, const Dataset& train_data, const Dataset& validation,
                                     const MacSpec& base, const TrainConfig& cfg) {
    if (space.n_candidates < 1) throw ConfigError("structure_search: n_candidates must be >= 1");
    if (space.n_repeats < 2) throw ConfigError("structure_search: n_repeats must be >= 2");
    if (space.trunk_depths.empty() || space.branch_depths.empty() || space.layer_sizes.empty()) {
        throw ConfigError("structure_search: empty search space");
    }
    const Rng root = Rng(cfg.seed).split("structure-search");
    Rng draw = root.split("draw");
    auto pick = [&](const std::vector<std::size_t>& options) { return options[draw.below(options.size())]; };

    SearchResult result;
    for (std::size_t c = 0; c < space.n_candidates; ++c) {
        MacSpec spec = base;
        spec.trunk_sizes.assign(pick(space.trunk_depths), 0);
        for (auto& s : spec.trunk_sizes) s = pick(space.layer_sizes);
        spec.branch_sizes.assign(pick(space.branch_depths), 0);
        for (auto& s : spec.branch_sizes) s = pick(space.layer_sizes);
        result.candidates.push_back({spec, 0.0, 0.0});
    }

    result.runs.resize(space.n_candidates * space.n_repeats);
    parallel_for(result.runs.size(), [&](std::size_t k) {
        const std::size_t c = k / space.n_repeats;
        const std::size_t r = k % space.n_repeats;
        const Rng run_rng = root.split(static_cast<std::uint64_t>(k));
        TrainConfig run_cfg = cfg;
        Rng seed_rng = run_rng.split("train");
        run_cfg.seed = seed_rng.next_u64();
        Rng init = run_rng.split("init");
        MacModel model = build_mac(result.candidates[c].spec, init);
        train(model, train_data, run_cfg);
        result.runs[k] = {c, r, run_cfg.seed, evaluate_balanced_accuracy(model, validation)};
    });

    for (std::size_t c = 0; c < space.n_candidates; ++c) {
        const std::size_t n_heads = base.heads.size();
        double stability_sum = 0.0, acc_sum = 0.0;
        std::size_t stability_terms = 0, acc_terms = 0;
        for (std::size_t h = 0; h < n_heads; ++h) {
            std::vector<double> xs;
            for (std::size_t r = 0; r < space.n_repeats; ++r) {
                const auto& v = result.runs[c * space.n_repeats + r].validation_accuracy[h];
                if (v) xs.push_back(*v);
            }
            if (xs.size() < 2) continue;
            double mean = 0.0;
            for (const double x : xs) mean += x;
            mean /= static_cast<double>(xs.size());
            double ss = 0.0;
            for (const double x : xs) ss += (x - mean) * (x - mean);
            stability_sum += std::sqrt(ss / static_cast<double>(xs.size() - 1));
            ++stability_terms;
            acc_sum += mean;
            ++acc_terms;
        }
        result.candidates[c].stability = stability_terms ? stability_sum / static_cast<double>(stability_terms) : 0.0;
        result.candidates[c].mean_accuracy = acc_terms ? acc_sum / static_cast<double>(acc_terms) : 0.0;
    }

    std::size_t best = 0;
    for (std::size_t c = 1; c < result.candidates.size(); ++c) {
        const auto& a = result.candidates[c];
        const auto& b = result.candidates[best];
        if (a.stability < b.stability || (a.stability == b.stability && a.mean_accuracy > b.mean_accuracy)) best = c;
    }
    result.chosen_index = best;
    result.chosen = result.candidates[best].spec;
    return result;
}

inline std::string history_to_csv(const TrainHistory& history) {
    std::string out = "epoch,loss\n";
    for (std::size_t e = 0; e < history.epoch_loss.size(); ++e) {
        out += std::to_string(e + 1) + "," + csv::format_double(history.epoch_loss[e]) + "\n";
    }
    return out;
}

inline std::string search_report_to_csv(const SearchResult& result) {
    auto join_sizes = [](const std::vector<std::size_t>& sizes) {
        std::string s;
        for (std::size_t i = 0; i < sizes.size(); ++i) s += (i ? "-" : "") + std::to_string(sizes[i]);
        return s;
    };
    std::string out = "candidate,repeat,trunk,branch,seed,mean_validation_accuracy,stability,chosen\n";
    for (const auto& run : result.runs) {
        const auto& cand = result.candidates[run.candidate];
        double sum = 0.0;
        std::size_t n = 0;
        for (const auto& v : run.validation_accuracy)
            if (v) {
                sum += *v;
                ++n;
            }
        out += std::to_string(run.candidate) + "," + std::to_string(run.repeat) + "," + join_sizes(cand.spec.trunk_sizes) +
               "," + join_sizes(cand.spec.branch_sizes) + "," + std::to_string(run.seed) + "," +
               (n ? csv::format_fixed(sum / static_cast<double>(n)) : std::string()) + "," +
               csv::format_fixed(cand.stability) + "," + (run.candidate == result.chosen_index ? "1" : "0") + "\n";
    }
    return out;
}

}  // namespace templaudit
