#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "fedinit/dataset.hpp"
#include "fedinit/errors.hpp"
#include "fedinit/param_vector.hpp"

namespace fedinit {

enum class ModelKind { quadratic, linear_regression, logistic_regression, mlp };

inline const char* to_string(ModelKind kind) {
    switch (kind) {
    case ModelKind::quadratic: return "quadratic";
    case ModelKind::linear_regression: return "linear-regression";
    case ModelKind::logistic_regression: return "logistic-regression";
    case ModelKind::mlp: return "mlp";
    }
    return "?";
}

inline ModelKind parse_model_kind(const std::string& name) {
    if (name == "quadratic") return ModelKind::quadratic;
    if (name == "linear-regression" || name == "linear") return ModelKind::linear_regression;
    if (name == "logistic-regression" || name == "logistic") return ModelKind::logistic_regression;
    if (name == "mlp") return ModelKind::mlp;
    throw ConfigError("unknown model kind '" + name +
                      "' (valid: quadratic, linear-regression, logistic-regression, mlp)");
}

/// Fixed architecture with a documented flat parameter layout.
///
/// - quadratic: d parameters; each sample row is a target point z and the
///   per-sample loss is ½(w−z)ᵀA(w−z) with A = `curvature` (d×d, row-major).
/// - linear-regression / logistic-regression: p weights followed by one bias.
///   Logistic labels are 0/1.
/// - mlp: for each layer l, W_l (out×in, row-major) then b_l (out). Hidden
///   layers use tanh, the output layer softmax cross-entropy over class ids.
struct ModelSpec {
    ModelKind kind = ModelKind::linear_regression;
    std::vector<std::size_t> layers;
    std::vector<double> curvature;

    static ModelSpec quadratic(std::size_t d, std::vector<double> curvature) {
        require(d >= 1, "quadratic model needs d >= 1");
        require(curvature.size() == d * d, "quadratic curvature must be d*d");
        return {ModelKind::quadratic, {d}, std::move(curvature)};
    }
    static ModelSpec linear_regression(std::size_t inputs) {
        require(inputs >= 1, "linear model needs at least one input");
        return {ModelKind::linear_regression, {inputs}, {}};
    }
    static ModelSpec logistic_regression(std::size_t inputs) {
        require(inputs >= 1, "logistic model needs at least one input");
        return {ModelKind::logistic_regression, {inputs}, {}};
    }
    static ModelSpec mlp(std::vector<std::size_t> sizes) {
        require(sizes.size() >= 2, "mlp needs at least input and output sizes");
        for (auto s : sizes) require(s >= 1, "mlp layer sizes must be positive");
        require(sizes.back() >= 2, "mlp output layer needs at least two classes");
        return {ModelKind::mlp, std::move(sizes), {}};
    }

    std::size_t input_dim() const { return layers.front(); }

    std::size_t param_count() const {
        switch (kind) {
        case ModelKind::quadratic: return layers.front();
        case ModelKind::linear_regression:
        case ModelKind::logistic_regression: return layers.front() + 1;
        case ModelKind::mlp: {
            std::size_t n = 0;
            for (std::size_t l = 0; l + 1 < layers.size(); ++l) n += layers[l + 1] * (layers[l] + 1);
            return n;
        }
        }
        return 0;
    }

    bool is_classifier() const {
        return kind == ModelKind::logistic_regression || kind == ModelKind::mlp;
    }
    std::size_t num_classes() const {
        if (kind == ModelKind::logistic_regression) return 2;
        if (kind == ModelKind::mlp) return layers.back();
        return 0;
    }

    friend bool operator==(const ModelSpec&, const ModelSpec&) = default;
};

namespace detail {

inline void check_inputs(const ModelSpec& model, const ParamVector& params, const Batch& batch) {
    if (params.dim() != model.param_count())
        throw ConfigError(std::string(to_string(model.kind)) + ": expected " +
                          std::to_string(model.param_count()) + " parameters, got " +
                          std::to_string(params.dim()));
    if (batch.data == nullptr || batch.size() == 0) throw ConfigError("empty batch");
    if (batch.data->features != model.input_dim())
        throw ConfigError(std::string(to_string(model.kind)) + ": batch has " +
                          std::to_string(batch.data->features) + " features, model expects " +
                          std::to_string(model.input_dim()));
    if (model.is_classifier()) {
        const auto k = static_cast<double>(model.num_classes());
        for (std::size_t j = 0; j < batch.size(); ++j) {
            const double y = batch.target(j);
            if (y < 0 || y >= k || y != std::floor(y))
                throw ConfigError("label " + std::to_string(y) + " outside [0, " +
                                  std::to_string(model.num_classes()) + ")");
        }
    }
}

// log(1 + e^z) without overflow.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double sigmoid(double z) {
    if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

inline double linear_score(const ParamVector& w, std::span<const double> x) {
    double z = w[x.size()];
    for (std::size_t f = 0; f < x.size(); ++f) z += w[f] * x[f];
    return z;
}

// Forward pass storing per-layer activations; returns the output logits.
struct MlpWorkspace {
    std::vector<std::vector<double>> act;
};

inline void mlp_forward(const ModelSpec& m, const ParamVector& w, std::span<const double> x,
                        MlpWorkspace& ws) {
    const auto& L = m.layers;
    ws.act.resize(L.size());
    ws.act[0].assign(x.begin(), x.end());
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < L.size(); ++l) {
        const std::size_t in = L[l], out = L[l + 1];
        auto& next = ws.act[l + 1];
        next.assign(out, 0.0);
        const auto& prev = ws.act[l];
        for (std::size_t o = 0; o < out; ++o) {
            double z = w[off + out * in + o];
            const std::size_t row = off + o * in;
            for (std::size_t i = 0; i < in; ++i) z += w[row + i] * prev[i];
            next[o] = (l + 2 < L.size()) ? std::tanh(z) : z;
        }
        off += out * (in + 1);
    }
}

// Softmax cross-entropy of logits against class `y`; fills `prob` with softmax.
inline double softmax_xent(const std::vector<double>& logits, int y, std::vector<double>& prob) {
    const double mx = *std::max_element(logits.begin(), logits.end());
    double s = 0.0;
    prob.resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
        prob[c] = std::exp(logits[c] - mx);
        s += prob[c];
    }
    for (auto& p : prob) p /= s;
    return std::log(s) + mx - logits[static_cast<std::size_t>(y)];
}

} // namespace detail

/// Mean per-sample loss over the batch.
inline double loss(const ModelSpec& model, const ParamVector& params, const Batch& batch) {
    detail::check_inputs(model, params, batch);
    const std::size_t n = batch.size();
    double total = 0.0;
    switch (model.kind) {
    case ModelKind::quadratic: {
        const std::size_t d = params.dim();
        std::vector<double> r(d);
        for (std::size_t j = 0; j < n; ++j) {
            const auto z = batch.features(j);
            for (std::size_t a = 0; a < d; ++a) r[a] = params[a] - z[a];
            double q = 0.0;
            for (std::size_t a = 0; a < d; ++a) {
                double row = 0.0;
                for (std::size_t b = 0; b < d; ++b) row += model.curvature[a * d + b] * r[b];
                q += r[a] * row;
            }
            total += 0.5 * q;
        }
        break;
    }
    case ModelKind::linear_regression:
        for (std::size_t j = 0; j < n; ++j) {
            const double e = detail::linear_score(params, batch.features(j)) - batch.target(j);
            total += 0.5 * e * e;
        }
        break;
    case ModelKind::logistic_regression:
        for (std::size_t j = 0; j < n; ++j) {
            const double z = detail::linear_score(params, batch.features(j));
            total += detail::softplus(z) - batch.target(j) * z;
        }
        break;
    case ModelKind::mlp: {
        detail::MlpWorkspace ws;
        std::vector<double> prob;
        for (std::size_t j = 0; j < n; ++j) {
            detail::mlp_forward(model, params, batch.features(j), ws);
            total += detail::softmax_xent(ws.act.back(), static_cast<int>(batch.target(j)), prob);
        }
        break;
    }
    }
    return total / static_cast<double>(n);
}

/// Analytic gradient of `loss` with respect to the parameters.
inline ParamVector grad(const ModelSpec& model, const ParamVector& params, const Batch& batch) {
    detail::check_inputs(model, params, batch);
    const std::size_t n = batch.size();
    const double inv_n = 1.0 / static_cast<double>(n);
    ParamVector g(params.dim());
    switch (model.kind) {
    case ModelKind::quadratic: {
        // A(w − z̄), with z̄ the batch mean of target points.
        const std::size_t d = params.dim();
        std::vector<double> r(d, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const auto z = batch.features(j);
            for (std::size_t a = 0; a < d; ++a) r[a] += z[a];
        }
        for (std::size_t a = 0; a < d; ++a) r[a] = params[a] - r[a] * inv_n;
        for (std::size_t a = 0; a < d; ++a) {
            double s = 0.0;
            for (std::size_t b = 0; b < d; ++b) s += model.curvature[a * d + b] * r[b];
            g[a] = s;
        }
        return g;
    }
    case ModelKind::linear_regression:
    case ModelKind::logistic_regression: {
        const std::size_t p = model.input_dim();
        for (std::size_t j = 0; j < n; ++j) {
            const auto x = batch.features(j);
            const double z = detail::linear_score(params, x);
            const double e = model.kind == ModelKind::linear_regression
                                 ? z - batch.target(j)
                                 : detail::sigmoid(z) - batch.target(j);
            for (std::size_t f = 0; f < p; ++f) g[f] += e * x[f];
            g[p] += e;
        }
        for (auto& v : g) v *= inv_n;
        return g;
    }
    case ModelKind::mlp: {
        const auto& L = model.layers;
        std::vector<std::size_t> offsets(L.size() - 1);
        for (std::size_t l = 0, off = 0; l + 1 < L.size(); ++l) {
            offsets[l] = off;
            off += L[l + 1] * (L[l] + 1);
        }
        detail::MlpWorkspace ws;
        std::vector<double> prob, delta, prev_delta;
        for (std::size_t j = 0; j < n; ++j) {
            detail::mlp_forward(model, params, batch.features(j), ws);
            detail::softmax_xent(ws.act.back(), static_cast<int>(batch.target(j)), prob);
            delta = prob;
            delta[static_cast<std::size_t>(batch.target(j))] -= 1.0;
            for (std::size_t l = L.size() - 1; l-- > 0;) {
                const std::size_t in = L[l], out = L[l + 1], off = offsets[l];
                const auto& a_in = ws.act[l];
                for (std::size_t o = 0; o < out; ++o) {
                    const double d = delta[o];
                    const std::size_t row = off + o * in;
                    for (std::size_t i = 0; i < in; ++i) g[row + i] += d * a_in[i];
                    g[off + out * in + o] += d;
                }
                if (l == 0) break;
                prev_delta.assign(in, 0.0);
                for (std::size_t o = 0; o < out; ++o) {
                    const std::size_t row = off + o * in;
                    for (std::size_t i = 0; i < in; ++i) prev_delta[i] += params[row + i] * delta[o];
                }
                for (std::size_t i = 0; i < in; ++i) prev_delta[i] *= 1.0 - a_in[i] * a_in[i];
                delta.swap(prev_delta);
            }
        }
        for (auto& v : g) v *= inv_n;
        return g;
    }
    }
    return g;
}

/// Central-difference gradient, coordinate by coordinate.
inline ParamVector finite_diff_grad(const ModelSpec& model, const ParamVector& params,
                                    const Batch& batch, double eps) {
    if (!(eps > 0.0)) throw ConfigError("finite_diff_grad: eps must be > 0");
    detail::check_inputs(model, params, batch);
    ParamVector g(params.dim());
    ParamVector probe = params;
    for (std::size_t i = 0; i < params.dim(); ++i) {
        probe[i] = params[i] + eps;
        const double up = loss(model, probe, batch);
        probe[i] = params[i] - eps;
        const double down = loss(model, probe, batch);
        probe[i] = params[i];
        g[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

/// Predicted class id for one feature row (classifiers only).
inline int predict(const ModelSpec& model, const ParamVector& params, std::span<const double> x) {
    if (model.kind == ModelKind::logistic_regression)
        return detail::linear_score(params, x) > 0.0 ? 1 : 0;
    if (model.kind == ModelKind::mlp) {
        detail::MlpWorkspace ws;
        detail::mlp_forward(model, params, x, ws);
        const auto& out = ws.act.back();
        return static_cast<int>(std::max_element(out.begin(), out.end()) - out.begin());
    }
    throw ConfigError(std::string("predict: ") + to_string(model.kind) + " is not a classifier");
}

/// Fraction of correctly classified rows; NaN for non-classifiers.
inline double accuracy(const ModelSpec& model, const ParamVector& params, const Dataset& data) {
    if (!model.is_classifier() || data.size() == 0) return std::numeric_limits<double>::quiet_NaN();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i)
        if (predict(model, params, data.row(i)) == data.label(i)) ++correct;
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Seeded initial parameters: zeros for quadratic/linear models, scaled
/// Gaussian weights (zero biases) for the mlp.
inline ParamVector initial_params(const ModelSpec& model, std::mt19937_64& rng, double scale = 1.0) {
    ParamVector w(model.param_count());
    if (model.kind != ModelKind::mlp) return w;
    std::size_t off = 0;
    for (std::size_t l = 0; l + 1 < model.layers.size(); ++l) {
        const std::size_t in = model.layers[l], out = model.layers[l + 1];
        std::normal_distribution<double> normal(0.0, scale / std::sqrt(static_cast<double>(in)));
        for (std::size_t k = 0; k < out * in; ++k) w[off + k] = normal(rng);
        off += out * (in + 1);
    }
    return w;
}

} // namespace fedinit
