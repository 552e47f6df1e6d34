#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "fedinit/dataset.hpp"
#include "fedinit/errors.hpp"
#include "fedinit/models.hpp"
#include "fedinit/param_vector.hpp"
#include "fedinit/quadratic.hpp"
#include "fedinit/strategy.hpp"

namespace fedinit {

/// Metrics of the global model w^t after round t−1 completed (t = 0 is the
/// initialization). Quantities that do not apply to the problem are NaN.
struct RoundRecord {
    std::size_t round = 0;
    double divergence = 0.0;    // Δ^t over all C clients
    double grad_norm_sq = 0.0;  // ‖∇f(w^t)‖²
    double train_loss = 0.0;    // f(w^t)
    double test_loss = std::numeric_limits<double>::quiet_NaN();
    double train_acc = std::numeric_limits<double>::quiet_NaN();
    double test_acc = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t bytes_up = 0;
    std::uint64_t bytes_down = 0;
    double lr = 0.0;            // η used in the round that produced w^t
    double beta = 0.0;
    double optimization_error = std::numeric_limits<double>::quiet_NaN();
    std::vector<std::size_t> active; // clients that trained in that round

    friend bool operator==(const RoundRecord&, const RoundRecord&) = default;
};

/// Δ = (1/C) Σ_i ‖w_{i,K} − w‖² over every client's latest local model.
inline double divergence(std::span<const ParamVector> client_lasts, const ParamVector& global) {
    require(!client_lasts.empty(), "divergence: no clients");
    double s = 0.0;
    for (const auto& w : client_lasts) s += distance_sq(w, global);
    return s / static_cast<double>(client_lasts.size());
}

/// f(w) − f(w⋆), clipped at zero to absorb rounding below the optimum.
inline double optimization_error(const QuadraticFamily& family, const ParamVector& w) {
    require(w.dim() == family.dimension(), "optimization_error: dimension mismatch");
    return std::max(0.0, family.value(w) - family.min_value());
}

inline double dataset_loss(const ModelSpec& model, const ParamVector& params, const Dataset& data) {
    const auto rows = all_rows(data.size());
    return loss(model, params, Batch{&data, rows, 0});
}

/// Mean held-out loss minus mean training loss.
inline double generalization_gap(const ModelSpec& model, const ParamVector& params, const Dataset& train,
                                 const Dataset& held_out) {
    require(train.size() > 0 && held_out.size() > 0, "generalization_gap: empty dataset");
    return dataset_loss(model, params, held_out) - dataset_loss(model, params, train);
}

/// Per-round communication and client-side storage, in floats
/// (one payload is d floats). `comm` is the heavier link direction.
struct CommStorage {
    std::uint64_t down = 0;
    std::uint64_t up = 0;
    std::uint64_t comm = 0;
    double comm_ratio = 1.0;
    std::uint64_t storage = 0;
    double storage_ratio = 1.0;
};

inline std::size_t storage_vectors(const StrategySpec& spec) {
    switch (spec.rule()) {
    case StrategyKind::fedavg: return 1;
    default: return 2;
    }
}

inline CommStorage comm_storage_accounting(const StrategySpec& spec, std::size_t active, std::size_t clients,
                                           std::size_t dim) {
    CommStorage out;
    const std::uint64_t nd = static_cast<std::uint64_t>(active) * dim;
    const std::uint64_t cd = static_cast<std::uint64_t>(clients) * dim;
    out.down = payloads_down(spec) * nd;
    out.up = payloads_up(spec) * nd;
    out.comm = std::max(out.down, out.up);
    out.comm_ratio = nd == 0 ? 1.0 : static_cast<double>(out.comm) / static_cast<double>(nd);
    out.storage = storage_vectors(spec) * cd;
    out.storage_ratio = static_cast<double>(storage_vectors(spec));
    return out;
}

inline constexpr std::size_t kSmoothingWidth = 5;
inline constexpr std::size_t kFinalWindow = 50;

/// Trailing moving average of width `width` (shorter at the start).
inline std::vector<double> moving_average(std::span<const double> values, std::size_t width = kSmoothingWidth) {
    std::vector<double> out(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const std::size_t lo = i + 1 >= width ? i + 1 - width : 0;
        double s = 0.0;
        for (std::size_t j = lo; j <= i; ++j) s += values[j];
        out[i] = s / static_cast<double>(i - lo + 1);
    }
    return out;
}

/// Maximum of the smoothed series over its last `window` entries.
inline double smoothed_max_last(std::span<const double> values, std::size_t window = kFinalWindow,
                                std::size_t width = kSmoothingWidth) {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    const auto smooth = moving_average(values, width);
    const std::size_t start = smooth.size() > window ? smooth.size() - window : 0;
    return *std::max_element(smooth.begin() + static_cast<std::ptrdiff_t>(start), smooth.end());
}

} // namespace fedinit
