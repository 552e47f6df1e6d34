#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fedinit/errors.hpp"

namespace fedinit {

/// Flat dense parameter vector. The dimension is fixed at construction.
class ParamVector {
public:
    ParamVector() = default;
    explicit ParamVector(std::size_t dim, double fill = 0.0) : data_(dim, fill) {}
    ParamVector(std::initializer_list<double> values) : data_(values) {}
    explicit ParamVector(std::vector<double> values) : data_(std::move(values)) {}

    std::size_t dim() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator[](std::size_t i) noexcept { return data_[i]; }
    double operator[](std::size_t i) const noexcept { return data_[i]; }

    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }
    const std::vector<double>& raw() const noexcept { return data_; }

    auto begin() noexcept { return data_.begin(); }
    auto end() noexcept { return data_.end(); }
    auto begin() const noexcept { return data_.begin(); }
    auto end() const noexcept { return data_.end(); }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    // Bitwise equality is what determinism tests need; -0.0 and 0.0 differ here.
    bool bitwise_equal(const ParamVector& other) const noexcept;

    friend bool operator==(const ParamVector&, const ParamVector&) = default;

private:
    std::vector<double> data_;
};

inline bool ParamVector::bitwise_equal(const ParamVector& other) const noexcept {
    if (dim() != other.dim()) return false;
    for (std::size_t i = 0; i < dim(); ++i) {
        if (std::signbit(data_[i]) != std::signbit(other.data_[i])) return false;
        if (!(data_[i] == other.data_[i]) && !(std::isnan(data_[i]) && std::isnan(other.data_[i])))
            return false;
    }
    return true;
}

inline void require_same_dim(const ParamVector& x, const ParamVector& y, const char* what) {
    if (x.dim() != y.dim())
        throw ConfigError(std::string(what) + ": dimension mismatch (" + std::to_string(x.dim()) +
                          " vs " + std::to_string(y.dim()) + ")");
}

inline void require_finite(const ParamVector& x, const std::string& what) {
    if (!x.all_finite()) throw NumericError(what + ": non-finite parameter value");
}

/// Returns a·x + b·y elementwise.
inline ParamVector combine(double a, const ParamVector& x, double b, const ParamVector& y) {
    require_same_dim(x, y, "combine");
    ParamVector out(x.dim());
    for (std::size_t i = 0; i < x.dim(); ++i) out[i] = a * x[i] + b * y[i];
    require_finite(out, "combine");
    return out;
}

/// x += a·y
inline void add_scaled(ParamVector& x, double a, const ParamVector& y) {
    require_same_dim(x, y, "add_scaled");
    for (std::size_t i = 0; i < x.dim(); ++i) x[i] += a * y[i];
}

inline double dot(const ParamVector& x, const ParamVector& y) {
    require_same_dim(x, y, "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < x.dim(); ++i) s += x[i] * y[i];
    return s;
}

inline double norm_sq(const ParamVector& x) noexcept {
    double s = 0.0;
    for (double v : x) s += v * v;
    return s;
}

inline double norm(const ParamVector& x) noexcept { return std::sqrt(norm_sq(x)); }

inline double distance_sq(const ParamVector& x, const ParamVector& y) {
    require_same_dim(x, y, "distance_sq");
    double s = 0.0;
    for (std::size_t i = 0; i < x.dim(); ++i) {
        const double d = x[i] - y[i];
        s += d * d;
    }
    return s;
}

} // namespace fedinit
