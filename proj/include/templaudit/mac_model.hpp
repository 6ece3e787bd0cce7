#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "templaudit/errors.hpp"
#include "templaudit/numeric.hpp"
#include "templaudit/parallel.hpp"

namespace templaudit {

struct HeadSpec {
    std::string name;
    std::size_t n_out = 2;

    bool operator==(const HeadSpec&) const = default;
};

/// Layout of the multi-branch attribute classifier: a shared trunk of dense
/// layers, then one branch of dense layers per attribute ending in a softmax head.
struct MacSpec {
    std::size_t n_in = 0;
    std::vector<std::size_t> trunk_sizes{512};
    std::vector<std::size_t> branch_sizes{512};
    std::vector<HeadSpec> heads;
    double p_drop = 0.5;
    /// Also apply batch-norm and dropout to the head logits (before softmax).
    bool regularize_heads = false;
    double bn_momentum = 0.99;
    double bn_epsilon = 1e-5;

    void validate() const {
        if (n_in == 0) throw ConfigError("MacSpec: n_in must be positive");
        if (heads.empty()) throw ConfigError("MacSpec: at least one head required");
        for (const auto& h : heads)
            if (h.n_out < 2) throw ConfigError("MacSpec: head '" + h.name + "' needs n_out >= 2");
        for (const auto s : trunk_sizes)
            if (s == 0) throw ConfigError("MacSpec: trunk layer size must be positive");
        for (const auto s : branch_sizes)
            if (s == 0) throw ConfigError("MacSpec: branch layer size must be positive");
        if (!(p_drop >= 0.0 && p_drop < 1.0)) throw ConfigError("MacSpec: p_drop must lie in [0,1)");
        if (!(bn_momentum >= 0.0 && bn_momentum <= 1.0)) throw ConfigError("MacSpec: bn_momentum must lie in [0,1]");
        if (!(bn_epsilon > 0.0)) throw ConfigError("MacSpec: bn_epsilon must be positive");
    }

    std::size_t trunk_width() const { return trunk_sizes.empty() ? n_in : trunk_sizes.back(); }

    bool operator==(const MacSpec&) const = default;
};

/// Dense layer, optionally followed by batch-norm. Hidden layers add ReLU and
/// dropout on top; heads add softmax.
struct DenseLayer {
    Matrix weight;  // fan_in x fan_out
    std::vector<double> bias;
    bool normalized = false;
    std::vector<double> gamma;
    std::vector<double> beta;
    std::vector<double> running_mean;
    std::vector<double> running_var;

    std::size_t fan_in() const { return weight.rows(); }
    std::size_t fan_out() const { return weight.cols(); }

    bool operator==(const DenseLayer&) const = default;
};

struct Branch {
    std::vector<DenseLayer> hidden;
    DenseLayer head;

    bool operator==(const Branch&) const = default;
};

struct MacModel {
    MacSpec spec;
    std::vector<DenseLayer> trunk;
    std::vector<Branch> branches;
    /// Bumped whenever trainable parameters change; caches remember it.
    std::uint64_t version = 0;

    void touch() noexcept { ++version; }
};

enum class ForwardMode {
    Train,       // dropout on, batch statistics, running statistics updated
    Infer,       // dropout off, running statistics
    McDropout,   // dropout on, running statistics, nothing updated
};

// ---------------------------------------------------------------------------
// Construction

namespace detail {

inline DenseLayer make_layer(std::size_t fan_in, std::size_t fan_out, bool normalized, Rng& rng) {
    DenseLayer layer;
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    layer.weight = Matrix(fan_in, fan_out);
    for (double& w : layer.weight.values()) w = rng.uniform(-limit, limit);
    layer.bias.assign(fan_out, 0.0);
    layer.normalized = normalized;
    if (normalized) {
        layer.gamma.assign(fan_out, 1.0);
        layer.beta.assign(fan_out, 0.0);
        layer.running_mean.assign(fan_out, 0.0);
        layer.running_var.assign(fan_out, 1.0);
    }
    return layer;
}

}  // namespace detail

/// Fresh model: Glorot-uniform weights, zero biases, identity batch-norm.
inline MacModel build_mac(const MacSpec& spec, Rng& rng) {
    spec.validate();
    MacModel model;
    model.spec = spec;
    std::size_t width = spec.n_in;
    for (const auto size : spec.trunk_sizes) {
        model.trunk.push_back(detail::make_layer(width, size, true, rng));
        width = size;
    }
    for (const auto& head : spec.heads) {
        Branch branch;
        std::size_t w = width;
        for (const auto size : spec.branch_sizes) {
            branch.hidden.push_back(detail::make_layer(w, size, true, rng));
            w = size;
        }
        branch.head = detail::make_layer(w, head.n_out, spec.regularize_heads, rng);
        model.branches.push_back(std::move(branch));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Forward

/// Everything backward needs from one forward pass through a layer.
struct LayerCache {
    Matrix input;
    Matrix xhat;                  // normalized pre-activations (normalized layers only)
    std::vector<double> inv_std;  // 1/sqrt(var + eps) used for normalization
    Matrix activated;             // post-normalization, pre-ReLU values (hidden) / logits (head)
    Matrix dropout_mask;          // per-element multiplier, empty when dropout is off
};

struct BranchCache {
    std::vector<LayerCache> hidden;
    LayerCache head;
};

struct ForwardCache {
    ForwardMode mode = ForwardMode::Infer;
    std::uint64_t version = 0;
    std::vector<LayerCache> trunk;
    std::vector<BranchCache> branches;
    std::vector<Matrix> outputs;  // per-head softmax
};

struct ForwardResult {
    std::vector<Matrix> outputs;  // per-head softmax, n_b x n_out
    ForwardCache cache;
};

inline void softmax_rows(Matrix& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto row = m.row(r);
        const double top = *std::max_element(row.begin(), row.end());
        double sum = 0.0;
        for (double& v : row) {
            v = std::exp(v - top);
            sum += v;
        }
        for (double& v : row) v /= sum;
    }
}

namespace detail {

struct LayerPass {
    bool batch_stats = false;   // normalize with batch statistics
    bool dropout = false;
    bool relu = true;
    double p_drop = 0.0;
    double epsilon = 1e-5;
    double momentum = 0.99;
    bool update_running = false;
};

// Runs one layer in place on `x`; records what backward needs into `cache`.
inline Matrix layer_forward(DenseLayer& layer, const Matrix& x, const LayerPass& pass, Rng* rng, LayerCache& cache) {
    Matrix z = matmul(x, layer.weight);
    const std::size_t n = z.rows();
    const std::size_t f = z.cols();
    for (std::size_t r = 0; r < n; ++r) {
        auto row = z.row(r);
        for (std::size_t c = 0; c < f; ++c) row[c] += layer.bias[c];
    }
    cache.input = x;

    if (layer.normalized) {
        std::vector<double> mean(f, 0.0);
        std::vector<double> var(f, 0.0);
        if (pass.batch_stats) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) mean[c] += z(r, c);
            for (auto& m : mean) m /= static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) {
                    const double d = z(r, c) - mean[c];
                    var[c] += d * d;
                }
            for (auto& v : var) v /= static_cast<double>(n);
            if (pass.update_running) {
                for (std::size_t c = 0; c < f; ++c) {
                    layer.running_mean[c] = pass.momentum * layer.running_mean[c] + (1.0 - pass.momentum) * mean[c];
                    layer.running_var[c] = pass.momentum * layer.running_var[c] + (1.0 - pass.momentum) * var[c];
                }
            }
        } else {
            mean = layer.running_mean;
            var = layer.running_var;
        }
        cache.inv_std.resize(f);
        for (std::size_t c = 0; c < f; ++c) cache.inv_std[c] = 1.0 / std::sqrt(var[c] + pass.epsilon);
        cache.xhat = Matrix(n, f);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < f; ++c) {
                const double xh = (z(r, c) - mean[c]) * cache.inv_std[c];
                cache.xhat(r, c) = xh;
                z(r, c) = layer.gamma[c] * xh + layer.beta[c];
            }
    }
    cache.activated = z;

    if (pass.relu)
        for (double& v : z.values()) v = v > 0.0 ? v : 0.0;

    if (pass.dropout && pass.p_drop > 0.0) {
        const double keep_scale = 1.0 / (1.0 - pass.p_drop);
        cache.dropout_mask = Matrix(n, f);
        auto mask = cache.dropout_mask.values();
        auto out = z.values();
        for (std::size_t i = 0; i < mask.size(); ++i) {
            mask[i] = rng->uniform() < pass.p_drop ? 0.0 : keep_scale;
            out[i] *= mask[i];
        }
    }
    return z;
}

}  // namespace detail

namespace detail {

inline ForwardResult forward_impl(MacModel& model, const Matrix& batch, ForwardMode mode, Rng* rng, bool mutate) {
    const auto& spec = model.spec;
    if (batch.cols() != spec.n_in) {
        throw ShapeError("forward: batch " + batch.shape_string() + " does not match n_in=" + std::to_string(spec.n_in));
    }
    if (batch.rows() == 0) throw BatchError("forward: empty batch");
    if (mode == ForwardMode::Train && batch.rows() < 2) {
        throw BatchError("forward: TRAIN mode needs at least 2 samples per batch, got " + std::to_string(batch.rows()));
    }
    const bool dropout = mode != ForwardMode::Infer;
    if (dropout && rng == nullptr) throw ConfigError("forward: dropout modes need an Rng");

    LayerPass hidden_pass;
    hidden_pass.batch_stats = mode == ForwardMode::Train;
    hidden_pass.dropout = dropout;
    hidden_pass.p_drop = spec.p_drop;
    hidden_pass.epsilon = spec.bn_epsilon;
    hidden_pass.momentum = spec.bn_momentum;
    hidden_pass.update_running = mutate && mode == ForwardMode::Train;
    LayerPass head_pass = hidden_pass;
    head_pass.relu = false;
    head_pass.dropout = dropout && spec.regularize_heads;

    // One draw from the caller's stream seeds every dropout mask of this pass,
    // so branches can run concurrently without sharing a stream.
    std::optional<Rng> base;
    if (dropout) base.emplace(rng->next_u64());

    ForwardResult result;
    auto& cache = result.cache;
    cache.mode = mode;
    cache.version = model.version;
    cache.trunk.resize(model.trunk.size());
    std::optional<Rng> trunk_rng;
    if (base) trunk_rng.emplace(base->split("trunk"));

    Matrix x = batch;
    for (std::size_t l = 0; l < model.trunk.size(); ++l) {
        x = layer_forward(model.trunk[l], x, hidden_pass, trunk_rng ? &*trunk_rng : nullptr, cache.trunk[l]);
    }

    const std::size_t n_heads = model.branches.size();
    cache.branches.resize(n_heads);
    result.outputs.resize(n_heads);
    parallel_for(n_heads, [&](std::size_t h) {
        std::optional<Rng> branch_rng;
        if (base) branch_rng.emplace(base->split(static_cast<std::uint64_t>(h)));
        Rng* r = branch_rng ? &*branch_rng : nullptr;
        auto& branch = model.branches[h];
        auto& bc = cache.branches[h];
        bc.hidden.resize(branch.hidden.size());
        Matrix y = x;
        for (std::size_t l = 0; l < branch.hidden.size(); ++l) y = layer_forward(branch.hidden[l], y, hidden_pass, r, bc.hidden[l]);
        y = layer_forward(branch.head, y, head_pass, r, bc.head);
        softmax_rows(y);
        result.outputs[h] = std::move(y);
    });
    cache.outputs = result.outputs;
    return result;
}

}  // namespace detail

/// Forward pass. TRAIN mode updates batch-norm running statistics.
inline ForwardResult forward(MacModel& model, const Matrix& batch, ForwardMode mode, Rng* rng = nullptr) {
    return detail::forward_impl(model, batch, mode, rng, true);
}

/// Read-only forward for INFER and MC_DROPOUT; safe to call concurrently.
inline std::vector<Matrix> predict(const MacModel& model, const Matrix& batch, ForwardMode mode, Rng* rng = nullptr) {
    if (mode == ForwardMode::Train) throw ConfigError("predict: TRAIN mode mutates the model, use forward()");
    // forward_impl only writes running statistics when mutate is set.
    return detail::forward_impl(const_cast<MacModel&>(model), batch, mode, rng, false).outputs;
}

// ---------------------------------------------------------------------------
// Backward

struct LayerGradients {
    Matrix weight;
    std::vector<double> bias;
    std::vector<double> gamma;
    std::vector<double> beta;
};

struct Gradients {
    std::vector<LayerGradients> trunk;
    std::vector<std::vector<LayerGradients>> branches;  // hidden layers, then head
};

namespace detail {

// Propagates `grad_out` (d loss / d layer output) back through one layer.
inline Matrix layer_backward(const DenseLayer& layer, const LayerCache& cache, Matrix grad, bool relu,
                             bool batch_stats, bool need_input_grad, LayerGradients& out) {
    const std::size_t n = grad.rows();
    const std::size_t f = grad.cols();
    if (!cache.dropout_mask.empty()) {
        auto g = grad.values();
        const auto m = cache.dropout_mask.values();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] *= m[i];
    }
    if (relu) {
        auto g = grad.values();
        const auto a = cache.activated.values();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!(a[i] > 0.0)) g[i] = 0.0;
    }
    if (layer.normalized) {
        out.gamma.assign(f, 0.0);
        out.beta.assign(f, 0.0);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < f; ++c) {
                out.gamma[c] += grad(r, c) * cache.xhat(r, c);
                out.beta[c] += grad(r, c);
            }
        // d loss / d xhat, then through the normalization.
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t c = 0; c < f; ++c) grad(r, c) *= layer.gamma[c];
        if (batch_stats) {
            std::vector<double> sum_g(f, 0.0);
            std::vector<double> sum_gx(f, 0.0);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) {
                    sum_g[c] += grad(r, c);
                    sum_gx[c] += grad(r, c) * cache.xhat(r, c);
                }
            const double nn = static_cast<double>(n);
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) {
                    grad(r, c) = cache.inv_std[c] / nn * (nn * grad(r, c) - sum_g[c] - cache.xhat(r, c) * sum_gx[c]);
                }
        } else {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < f; ++c) grad(r, c) *= cache.inv_std[c];
        }
    }
    out.weight = matmul_tn(cache.input, grad);
    out.bias.assign(f, 0.0);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < f; ++c) out.bias[c] += grad(r, c);
    if (!need_input_grad) return {};
    return matmul_nt(grad, layer.weight);
}

}  // namespace detail

/// Exact parameter gradients of the cached forward pass. `upstream[h]` is
/// d loss / d softmax output of head h, shaped like that head's output.
inline Gradients backward(const MacModel& model, const ForwardCache& cache, const std::vector<Matrix>& upstream) {
    if (cache.version != model.version) {
        throw ConsistencyError("backward: cache from parameter version " + std::to_string(cache.version) +
                               ", model is at version " + std::to_string(model.version));
    }
    if (upstream.size() != model.branches.size() || cache.branches.size() != model.branches.size()) {
        throw ShapeError("backward: expected " + std::to_string(model.branches.size()) + " head gradients");
    }
    for (std::size_t h = 0; h < upstream.size(); ++h) {
        if (upstream[h].rows() != cache.outputs[h].rows() || upstream[h].cols() != cache.outputs[h].cols()) {
            throw ShapeError("backward: head " + std::to_string(h) + " gradient " + upstream[h].shape_string() +
                             " does not match output " + cache.outputs[h].shape_string());
        }
    }
    const bool batch_stats = cache.mode == ForwardMode::Train;
    Gradients grads;
    grads.branches.resize(model.branches.size());
    std::vector<Matrix> trunk_grad(model.branches.size());

    parallel_for(model.branches.size(), [&](std::size_t h) {
        const auto& branch = model.branches[h];
        const auto& bc = cache.branches[h];
        const Matrix& p = cache.outputs[h];
        const Matrix& g = upstream[h];
        // Softmax Jacobian: dz_j = p_j * (g_j - sum_k g_k p_k).
        Matrix dz(p.rows(), p.cols());
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < p.cols(); ++c) dot += g(r, c) * p(r, c);
            for (std::size_t c = 0; c < p.cols(); ++c) dz(r, c) = p(r, c) * (g(r, c) - dot);
        }
        auto& layer_grads = grads.branches[h];
        layer_grads.resize(branch.hidden.size() + 1);
        Matrix d = detail::layer_backward(branch.head, bc.head, std::move(dz), false, batch_stats, true,
                                          layer_grads.back());
        for (std::size_t l = branch.hidden.size(); l-- > 0;) {
            d = detail::layer_backward(branch.hidden[l], bc.hidden[l], std::move(d), true, batch_stats, true,
                                       layer_grads[l]);
        }
        trunk_grad[h] = std::move(d);
    });

    Matrix d = std::move(trunk_grad[0]);
    for (std::size_t h = 1; h < trunk_grad.size(); ++h) {
        auto dst = d.values();
        const auto src = trunk_grad[h].values();
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
    grads.trunk.resize(model.trunk.size());
    for (std::size_t l = model.trunk.size(); l-- > 0;) {
        d = detail::layer_backward(model.trunk[l], cache.trunk[l], std::move(d), true, batch_stats, l > 0,
                                   grads.trunk[l]);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Flat parameter access

/// A named contiguous block of trainable parameters paired with its gradient.
struct ParameterBlock {
    std::string name;
    std::span<double> values;
    std::span<const double> grad;
};

namespace detail {

template <class Visit>
void visit_layers(MacModel& model, Gradients* grads, Visit&& visit) {
    for (std::size_t l = 0; l < model.trunk.size(); ++l) {
        visit("trunk." + std::to_string(l), model.trunk[l], grads ? &grads->trunk[l] : nullptr);
    }
    for (std::size_t h = 0; h < model.branches.size(); ++h) {
        const std::string prefix = "branch." + model.spec.heads[h].name + ".";
        auto& branch = model.branches[h];
        for (std::size_t l = 0; l < branch.hidden.size(); ++l) {
            visit(prefix + std::to_string(l), branch.hidden[l], grads ? &grads->branches[h][l] : nullptr);
        }
        visit(prefix + "head", branch.head, grads ? &grads->branches[h].back() : nullptr);
    }
}

}  // namespace detail

/// Trainable blocks in canonical order: per layer weight, bias, then gamma and
/// beta for normalized layers. Trunk first, then each branch, head last.
inline std::vector<ParameterBlock> parameter_blocks(MacModel& model, Gradients* grads = nullptr) {
    std::vector<ParameterBlock> blocks;
    detail::visit_layers(model, grads, [&](const std::string& name, DenseLayer& layer, LayerGradients* g) {
        blocks.push_back({name + ".weight", layer.weight.values(), g ? std::span<const double>(g->weight.values()) : std::span<const double>{}});
        blocks.push_back({name + ".bias", layer.bias, g ? std::span<const double>(g->bias) : std::span<const double>{}});
        if (layer.normalized) {
            blocks.push_back({name + ".gamma", layer.gamma, g ? std::span<const double>(g->gamma) : std::span<const double>{}});
            blocks.push_back({name + ".beta", layer.beta, g ? std::span<const double>(g->beta) : std::span<const double>{}});
        }
    });
    return blocks;
}

/// Flat copy of every gradient entry, in parameter_blocks order.
inline std::vector<double> flatten(const Gradients& grads, const MacModel& model) {
    std::vector<double> out;
    auto& m = const_cast<MacModel&>(model);
    auto& g = const_cast<Gradients&>(grads);
    for (const auto& block : parameter_blocks(m, &g)) out.insert(out.end(), block.grad.begin(), block.grad.end());
    return out;
}

}  // namespace templaudit
