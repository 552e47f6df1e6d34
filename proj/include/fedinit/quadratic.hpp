#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fedinit/errors.hpp"
#include "fedinit/param_vector.hpp"
#include "fedinit/rng.hpp"

namespace fedinit {

inline Eigen::VectorXd to_eigen(const ParamVector& w) {
    return Eigen::Map<const Eigen::VectorXd>(w.values().data(), static_cast<Eigen::Index>(w.dim()));
}

inline ParamVector from_eigen(const Eigen::VectorXd& v) {
    return ParamVector(std::vector<double>(v.data(), v.data() + v.size()));
}

/// Per-client quadratics f_i(w) = ½(w−b_i)ᵀA_i(w−b_i) with A_i symmetric
/// positive definite; the global objective is their unweighted mean.
class QuadraticFamily {
public:
    QuadraticFamily() = default;

    QuadraticFamily(std::vector<Eigen::MatrixXd> curvatures, std::vector<Eigen::VectorXd> centers)
        : A_(std::move(curvatures)), b_(std::move(centers)) {
        require(!A_.empty(), "QuadraticFamily: need at least one client");
        require(A_.size() == b_.size(), "QuadraticFamily: curvature/center count mismatch");
        dim_ = static_cast<std::size_t>(b_.front().size());
        require(dim_ >= 1, "QuadraticFamily: dimension must be >= 1");
        for (std::size_t i = 0; i < A_.size(); ++i) {
            require(A_[i].rows() == static_cast<Eigen::Index>(dim_) && A_[i].cols() == A_[i].rows() &&
                        b_[i].size() == static_cast<Eigen::Index>(dim_),
                    "QuadraticFamily: client " + std::to_string(i) + " has inconsistent dimensions");
            require((A_[i] - A_[i].transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1.0 + A_[i].cwiseAbs().maxCoeff()),
                    "QuadraticFamily: A_" + std::to_string(i) + " is not symmetric");
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A_[i], Eigen::EigenvaluesOnly);
            require(es.eigenvalues().minCoeff() > 0.0,
                    "QuadraticFamily: A_" + std::to_string(i) + " is not positive definite");
        }
        Eigen::MatrixXd sumA = Eigen::MatrixXd::Zero(dim(), dim());
        Eigen::VectorXd sumAb = Eigen::VectorXd::Zero(dim());
        for (std::size_t i = 0; i < A_.size(); ++i) {
            sumA += A_[i];
            sumAb += A_[i] * b_[i];
        }
        minimizer_ = sumA.ldlt().solve(sumAb);
    }

    std::size_t clients() const noexcept { return A_.size(); }
    Eigen::Index dim() const noexcept { return static_cast<Eigen::Index>(dim_); }
    std::size_t dimension() const noexcept { return dim_; }
    const Eigen::MatrixXd& curvature(std::size_t i) const { return A_.at(i); }
    const Eigen::VectorXd& center(std::size_t i) const { return b_.at(i); }

    double local_value(std::size_t i, const ParamVector& w) const {
        const Eigen::VectorXd r = to_eigen(w) - b_.at(i);
        return 0.5 * r.dot(A_[i] * r);
    }
    ParamVector local_gradient(std::size_t i, const ParamVector& w) const {
        return from_eigen(A_.at(i) * (to_eigen(w) - b_[i]));
    }
    double value(const ParamVector& w) const {
        double s = 0.0;
        for (std::size_t i = 0; i < clients(); ++i) s += local_value(i, w);
        return s / static_cast<double>(clients());
    }
    ParamVector gradient(const ParamVector& w) const {
        Eigen::VectorXd g = Eigen::VectorXd::Zero(dim());
        const Eigen::VectorXd x = to_eigen(w);
        for (std::size_t i = 0; i < clients(); ++i) g += A_[i] * (x - b_[i]);
        return from_eigen(g / static_cast<double>(clients()));
    }

    /// w⋆ = (Σ A_i)⁻¹ Σ A_i b_i.
    ParamVector minimizer() const { return from_eigen(minimizer_); }
    double min_value() const { return value(minimizer()); }

    Eigen::MatrixXd mean_curvature() const {
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(dim(), dim());
        for (const auto& a : A_) m += a;
        return m / static_cast<double>(clients());
    }

    /// Local smoothness L = max_i λ_max(A_i).
    double smoothness() const {
        double L = 0.0;
        for (const auto& a : A_) {
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(a, Eigen::EigenvaluesOnly);
            L = std::max(L, es.eigenvalues().maxCoeff());
        }
        return L;
    }

    /// P\L constant μ = λ_min(mean A).
    double pl_constant() const {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(mean_curvature(), Eigen::EigenvaluesOnly);
        return es.eigenvalues().minCoeff();
    }

    /// Curvature rows in the layout ModelSpec::quadratic expects.
    std::vector<double> curvature_row_major(std::size_t i) const {
        std::vector<double> out(dim_ * dim_);
        for (std::size_t r = 0; r < dim_; ++r)
            for (std::size_t c = 0; c < dim_; ++c)
                out[r * dim_ + c] = A_.at(i)(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        return out;
    }

    friend bool operator==(const QuadraticFamily& x, const QuadraticFamily& y) {
        if (x.clients() != y.clients() || x.dim_ != y.dim_) return false;
        for (std::size_t i = 0; i < x.clients(); ++i)
            if (x.A_[i] != y.A_[i] || x.b_[i] != y.b_[i]) return false;
        return true;
    }

private:
    std::vector<Eigen::MatrixXd> A_;
    std::vector<Eigen::VectorXd> b_;
    Eigen::VectorXd minimizer_;
    std::size_t dim_ = 0;
};

/// Random SPD family: eigenvalues log-uniform in [1, cond] under a random
/// rotation, centers b_i = b₀ + spread·u_i with b₀, u_i standard normal.
/// With `shared_curvature` every client uses the first client's A.
inline QuadraticFamily gen_quadratic_clients(std::size_t clients, std::size_t dim, double spread,
                                             double cond, std::uint64_t seed,
                                             bool shared_curvature = false) {
    require(clients >= 2, "gen_quadratic_clients: need at least 2 clients, got " + std::to_string(clients));
    require(dim >= 1, "gen_quadratic_clients: dim must be >= 1");
    require(spread >= 0.0, "gen_quadratic_clients: spread must be >= 0");
    require(cond >= 1.0, "gen_quadratic_clients: cond must be >= 1");

    Rng rng = make_rng(seed, Stream::data);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const auto d = static_cast<Eigen::Index>(dim);

    auto random_spd = [&] {
        Eigen::MatrixXd g(d, d);
        for (Eigen::Index r = 0; r < d; ++r)
            for (Eigen::Index c = 0; c < d; ++c) g(r, c) = normal(rng);
        const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
        Eigen::VectorXd eig(d);
        for (Eigen::Index k = 0; k < d; ++k) eig(k) = std::exp(unit(rng) * std::log(cond));
        Eigen::MatrixXd a = q * eig.asDiagonal() * q.transpose();
        return Eigen::MatrixXd(0.5 * (a + a.transpose()));
    };

    Eigen::VectorXd b0(d);
    for (Eigen::Index k = 0; k < d; ++k) b0(k) = normal(rng);

    std::vector<Eigen::MatrixXd> A;
    std::vector<Eigen::VectorXd> b;
    for (std::size_t i = 0; i < clients; ++i) {
        A.push_back(shared_curvature && i > 0 ? A.front() : random_spd());
        Eigen::VectorXd u(d);
        for (Eigen::Index k = 0; k < d; ++k) u(k) = normal(rng);
        b.push_back(b0 + spread * u);
    }
    return QuadraticFamily(std::move(A), std::move(b));
}

} // namespace fedinit
