#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedinit/errors.hpp"
#include "fedinit/experiment.hpp"
#include "fedinit/federation.hpp"
#include "fedinit/metrics.hpp"
#include "fedinit/quadratic.hpp"
#include "fedinit/rng.hpp"

namespace fedinit {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Closed-form constants of the convergence, divergence and stability bounds,
/// plus the problem constants they are evaluated with.
struct BoundConstants {
    double beta = 0.0;
    std::size_t active = 0;
    double kappa_beta = kNaN;       // 1/(1 − 141β²)
    double kappa = kNaN;            // 8 + 78β²κ_β²
    double gamma_beta = kNaN;       // 1/(1 − 39β²)
    double c_beta = kNaN;           // κ_β/(1 − 48β²κ_β), NaN when 48β²κ_β ≥ 1
    double j_beta = kNaN;           // C_β(132 + 804κ/(λN))
    double r_beta = kNaN;           // 228μγ_ββ²a²b² (as stated with the theorem)
    double r_beta_gamma_sq = kNaN;  // 228μγ_β²β²a²b² (as the derivation ends)
    double lambda = kNaN;
    double zeta = kNaN;
    double mu = kNaN;
    double L = kNaN;
    double sigma_l = kNaN;
    double sigma_g = kNaN;
    double a = 1.0;
    double b = 1.0;
    double D = kNaN;
    double L_G = kNaN;
    double U = kNaN;
    double c = kNaN;
    double t0 = kNaN;
};

inline BoundConstants compute_constants(double beta, std::size_t active, double lambda, double mu, double a, double b) {
    const double b2 = beta * beta;
    if (!(141.0 * b2 < 1.0))
        throw ConfigError("compute_constants: requires 141*beta^2 < 1 (beta=" + std::to_string(beta) +
                          ", 141*beta^2=" + std::to_string(141.0 * b2) + ")");
    if (!(lambda > 0.0 && lambda < 0.5))
        throw ConfigError("compute_constants: lambda must lie in (0, 1/2), got " + std::to_string(lambda));
    require(active >= 1, "compute_constants: N must be >= 1");
    BoundConstants k;
    k.beta = beta;
    k.active = active;
    k.lambda = lambda;
    k.mu = mu;
    k.a = a;
    k.b = b;
    k.kappa_beta = 1.0 / (1.0 - 141.0 * b2);
    k.kappa = 8.0 + 78.0 * b2 * k.kappa_beta * k.kappa_beta;
    k.gamma_beta = 1.0 / (1.0 - 39.0 * b2);
    const double cb_den = 1.0 - 48.0 * b2 * k.kappa_beta;
    if (cb_den > 0.0) {
        k.c_beta = k.kappa_beta / cb_den;
        k.j_beta = k.c_beta * (132.0 + 804.0 * k.kappa / (lambda * static_cast<double>(active)));
    }
    k.r_beta = 228.0 * mu * k.gamma_beta * b2 * a * a * b * b;
    k.r_beta_gamma_sq = 228.0 * mu * k.gamma_beta * k.gamma_beta * b2 * a * a * b * b;
    return k;
}

/// Measured problem constants of a quadratic family.
struct ProblemConstants {
    double L = 0.0;
    double mu = 0.0;
    double sigma_g = 0.0;
    double D = 0.0;
    double b = 1.0; // global interpolation: sup ‖∇f_i‖ / ‖∇f‖ over probes
};

namespace detail {

inline std::vector<ParamVector> probe_points(const ParamVector& center, double radius, std::size_t count, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<ParamVector> out;
    const double scale = radius / std::sqrt(static_cast<double>(std::max<std::size_t>(1, center.dim())));
    for (std::size_t s = 0; s < count; ++s) {
        ParamVector w = center;
        for (auto& v : w) v += scale * normal(rng);
        out.push_back(std::move(w));
    }
    return out;
}

} // namespace detail

/// L = max_i λ_max(A_i), μ = λ_min(mean A), σ_g = max over probes of
/// max_i ‖∇f_i(w) − ∇f(w)‖, D = f(w⁰) − f(w⋆), b from the same probes.
inline ProblemConstants estimate_problem_constants(const QuadraticFamily& family, std::size_t sample_budget,
                                                   const ParamVector& w0, std::uint64_t seed = 0) {
    ProblemConstants pc;
    pc.L = family.smoothness();
    pc.mu = family.pl_constant();
    const ParamVector star = family.minimizer();
    pc.D = std::max(0.0, family.value(w0) - family.min_value());
    Rng rng = make_rng(seed, Stream::probe);
    const double radius = std::max(1.0, std::sqrt(distance_sq(w0, star)));
    double b2 = 1.0;
    for (const auto& w : detail::probe_points(star, radius, sample_budget, rng)) {
        const ParamVector g = family.gradient(w);
        const double gn = norm_sq(g);
        for (std::size_t i = 0; i < family.clients(); ++i) {
            const ParamVector gi = family.local_gradient(i, w);
            pc.sigma_g = std::max(pc.sigma_g, std::sqrt(distance_sq(gi, g)));
            if (gn > 0.0) b2 = std::max(b2, norm_sq(gi) / gn);
        }
    }
    pc.b = std::sqrt(b2);
    return pc;
}

/// σ_l: max over probe points and clients of ‖g − ∇f_i‖ across `draws`
/// mini-batches. Zero for full-batch training.
inline double estimate_sigma_l(const Problem& problem, std::size_t batch_size, std::size_t probes, std::size_t draws,
                               std::uint64_t seed = 0) {
    double best = 0.0;
    Rng rng = make_rng(seed, Stream::probe, 1);
    const auto points = detail::probe_points(problem.init, 1.0, probes, rng);
    for (std::size_t i = 0; i < problem.clients.size(); ++i) {
        const auto& cd = problem.clients[i];
        const std::size_t n = cd.shard.size();
        if (batch_size == 0 || batch_size >= n) continue;
        const auto rows = all_rows(n);
        for (const auto& w : points) {
            const ParamVector full = grad(cd.model, w, Batch{&cd.shard, rows, i});
            for (std::size_t k = 0; k < draws; ++k) {
                std::vector<std::size_t> pick;
                std::sample(rows.begin(), rows.end(), std::back_inserter(pick), batch_size, rng);
                const ParamVector g = grad(cd.model, w, Batch{&cd.shard, pick, i});
                best = std::max(best, std::sqrt(distance_sq(g, full)));
            }
        }
    }
    return best;
}

/// Local interpolation constant a: sup over probes, clients and single
/// samples of ‖∇f_i(w; z)‖ / ‖∇f_i(w)‖. Batches equal to the shard give a = 1.
inline double estimate_local_interpolation(const Problem& problem, std::size_t batch_size, std::size_t probes,
                                           std::uint64_t seed = 0) {
    double a2 = 1.0;
    Rng rng = make_rng(seed, Stream::probe, 2);
    const auto points = detail::probe_points(problem.init, 1.0, probes, rng);
    for (std::size_t i = 0; i < problem.clients.size(); ++i) {
        const auto& cd = problem.clients[i];
        if (batch_size == 0 || batch_size >= cd.shard.size()) continue;
        const auto rows = all_rows(cd.shard.size());
        for (const auto& w : points) {
            const double full = norm_sq(grad(cd.model, w, Batch{&cd.shard, rows, i}));
            if (full <= 0.0) continue;
            for (std::size_t j = 0; j < rows.size(); ++j) {
                const std::size_t one[1] = {j};
                a2 = std::max(a2, norm_sq(grad(cd.model, w, Batch{&cd.shard, one, i})) / full);
            }
        }
    }
    return std::sqrt(a2);
}

/// Inputs to bound evaluation that come from the run rather than the formulas.
struct TheoryInputs {
    double D = 0.0;
    double L = 0.0;
    double mu = 0.0;
    double sigma_l = 0.0;
    double sigma_g = 0.0;
    double a = 1.0;
    double b = 1.0;
};

inline const std::vector<double>& constant_grid() {
    static const std::vector<double> grid{0.05, 0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45};
    return grid;
}

struct GridPoint {
    double value = 0.0; // λ or ζ
    double rhs = 0.0;
    bool holds = false;
    double slack = 0.0; // rhs / lhs (inf when lhs == 0)
};

struct AssumptionCheck {
    std::string name;
    bool ok = true;
    std::string detail;
};

struct BoundReport {
    int theorem = 0;
    std::string lhs_name;
    std::string rhs_form;
    double lhs = 0.0;
    std::vector<GridPoint> grid;
    std::vector<GridPoint> grid_alt; // Theorems 4 and 8: γ_β² variant of R_β
    double best_value = kNaN;
    bool holds_at_best = false;
    bool holds_at_best_alt = false;
    std::vector<AssumptionCheck> assumptions;
    bool refused = false;
    std::string refusal;
    // Terms reported alongside the bound.
    double D = 0.0;
    double divergence_T = 0.0;
    std::vector<double> divergence_term; // Theorem 1: −13β²κ_βL²Δ^T/(ληNKT) per grid point
    BoundConstants constants;           // at the most favorable grid value
};

namespace detail {

inline double thm7_rhs(const BoundConstants& k, double lr, double K, double T, double D, double sigma) {
    if (!std::isfinite(k.c_beta)) return kNaN;
    return lr * 804.0 * k.c_beta * K * D / (k.lambda * T) + lr * lr * k.j_beta * K * sigma;
}

inline double thm8_rhs(double gamma_factor, double a, double b, double lr, double K, double T, double D, double zeta) {
    // η R_β K D / (2μβ²ζT) with R_β = 228μγβ²a²b²; μ and β² cancel.
    return 114.0 * gamma_factor * a * a * b * b * lr * K * D / (zeta * T);
}

} // namespace detail

/// Evaluates theorem `theorem` ∈ {1, 2, 3, 4, 7, 8} on a finished run.
/// `initial` is w⁰'s record, `records` rounds 1..T. Refuses (report.refused)
/// when the run violates the theorem's assumptions.
inline BoundReport verify_convergence_bound(int theorem, const RoundRecord& initial,
                                            const std::vector<RoundRecord>& records, const TheoryInputs& in,
                                            const HyperParams& hp, double beta) {
    BoundReport rep;
    rep.theorem = theorem;
    rep.D = in.D;
    auto check = [&](const std::string& name, bool ok, const std::string& detail) {
        rep.assumptions.push_back({name, ok, detail});
        if (!ok && !rep.refused) {
            rep.refused = true;
            rep.refusal = name + ": " + detail;
        }
    };
    const bool known = theorem == 1 || theorem == 2 || theorem == 3 || theorem == 4 || theorem == 7 || theorem == 8;
    if (!known) throw ConfigError("verify_convergence_bound: unknown theorem " + std::to_string(theorem));

    const double T = static_cast<double>(records.size());
    const double N = static_cast<double>(hp.active);
    const double K = hp.local_iters ? static_cast<double>(*hp.local_iters) : kNaN;
    const double lr = hp.lr;
    const bool interp = theorem == 3 || theorem == 4 || theorem == 8;

    check("rounds", !records.empty(), "T=" + std::to_string(records.size()) + " (need T >= 1)");
    check("constant learning rate", hp.schedule == LrSchedule::exponential && hp.lr_decay == 1.0,
          "bounds assume a constant eta (lr_decay must be 1)");
    check("local iterations", hp.local_iters.has_value() && *hp.local_iters > 1,
          "need local_iters K > 1");
    check("partial participation", hp.active > 1 && hp.active < hp.clients,
          "need 1 < N < C, got N=" + std::to_string(hp.active) + ", C=" + std::to_string(hp.clients));
    check("relaxation range", 141.0 * beta * beta < 1.0 && beta >= 0.0,
          "need 0 <= beta and 141*beta^2 < 1, got beta=" + std::to_string(beta));
    if (interp) {
        check("interpolation", hp.full_batch(),
              "interpolation bounds are only checked on full-batch runs");
        check("learning rate", lr <= 1.0 / (in.a * K * in.L),
              "need eta <= 1/(aKL) = " + std::to_string(1.0 / (in.a * K * in.L)) + ", got " + std::to_string(lr));
    } else {
        check("learning rate", lr <= 1.0 / (N * K * in.L),
              "need eta <= 1/(NKL) = " + std::to_string(1.0 / (N * K * in.L)) + ", got " + std::to_string(lr));
    }
    if (theorem == 2 || theorem == 4)
        check("P-L constant", in.mu > 0.0, "need mu > 0");
    if (theorem == 2 || theorem == 4)
        check("optimality gap", !records.empty() && std::isfinite(records.back().optimization_error),
              "the trace has no f(w^T) - f(w*) (needs a quadratic family)");
    if (rep.refused) return rep;

    const auto lead = leading_records(initial, records);
    double avg_grad = 0.0, avg_div = 0.0;
    for (const auto& r : lead) {
        avg_grad += r.grad_norm_sq;
        avg_div += r.divergence;
    }
    avg_grad /= static_cast<double>(lead.size());
    avg_div /= static_cast<double>(lead.size());
    const double div_T = records.back().divergence;
    rep.divergence_T = div_T;
    const double sigma = in.sigma_l * in.sigma_l + 6.0 * K * in.sigma_g * in.sigma_g;

    switch (theorem) {
    case 1: case 3:
        rep.lhs_name = "(1/T) sum_t ||grad f(w^t)||^2";
        rep.lhs = avg_grad;
        break;
    case 2: case 4:
        rep.lhs_name = "f(w^T) - f(w*)";
        rep.lhs = records.back().optimization_error;
        break;
    default:
        rep.lhs_name = "(1/T) sum_t Delta^t";
        rep.lhs = avg_div;
        break;
    }

    auto point = [&](double value, double rhs) {
        GridPoint p;
        p.value = value;
        p.rhs = rhs;
        p.holds = std::isfinite(rhs) && rep.lhs <= rhs;
        p.slack = rep.lhs > 0.0 ? rhs / rep.lhs : std::numeric_limits<double>::infinity();
        return p;
    };

    for (double g : constant_grid()) {
        const BoundConstants k = compute_constants(beta, hp.active, g, in.mu, in.a, in.b);
        switch (theorem) {
        case 1: {
            rep.rhs_form = "D/(lambda eta K T) + eta kappa L sigma/(lambda N) - 13 beta^2 kappa_beta L^2 Delta^T/(lambda eta N K T)";
            const double div_term = -13.0 * beta * beta * k.kappa_beta * in.L * in.L * div_T / (g * lr * N * K * T);
            rep.divergence_term.push_back(div_term);
            rep.grid.push_back(point(g, in.D / (g * lr * K * T) + lr * k.kappa * in.L * sigma / (g * N) + div_term));
            break;
        }
        case 2: {
            rep.rhs_form = "composite: exp(-lambda mu eta K T) D + eta kappa L sigma/(lambda mu N) + [divergence-bound RHS for the O(eta/T + eta^2) term]";
            const double rhs = std::exp(-g * in.mu * lr * K * T) * in.D + lr * k.kappa * in.L * sigma / (g * in.mu * N) +
                               detail::thm7_rhs(k, lr, K, T, in.D, sigma);
            rep.grid.push_back(point(g, rhs));
            break;
        }
        case 3:
            rep.rhs_form = "D/(zeta eta K T) - 2 gamma_beta beta^2 L Delta^T/(zeta eta K T)";
            rep.grid.push_back(point(g, in.D / (g * lr * K * T) -
                                            2.0 * k.gamma_beta * beta * beta * in.L * div_T / (g * lr * K * T)));
            break;
        case 4:
            rep.rhs_form = "exp(-zeta mu eta K T) D + R_beta eta^2 K^2 L D";
            rep.grid.push_back(point(g, std::exp(-g * in.mu * lr * K * T) * in.D + k.r_beta * lr * lr * K * K * in.L * in.D));
            rep.grid_alt.push_back(
                point(g, std::exp(-g * in.mu * lr * K * T) * in.D + k.r_beta_gamma_sq * lr * lr * K * K * in.L * in.D));
            break;
        case 7:
            rep.rhs_form = "eta 804 C_beta K D/(lambda T) + eta^2 J_beta K sigma";
            rep.grid.push_back(point(g, detail::thm7_rhs(k, lr, K, T, in.D, sigma)));
            break;
        case 8:
            rep.rhs_form = "eta R_beta K D/(2 mu beta^2 zeta T)";
            rep.grid.push_back(point(g, detail::thm8_rhs(k.gamma_beta, in.a, in.b, lr, K, T, in.D, g)));
            rep.grid_alt.push_back(point(g, detail::thm8_rhs(k.gamma_beta * k.gamma_beta, in.a, in.b, lr, K, T, in.D, g)));
            break;
        }
    }

    auto best_of = [](const std::vector<GridPoint>& grid) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < grid.size(); ++i)
            if (grid[i].rhs > grid[best].rhs || !std::isfinite(grid[best].rhs)) best = i;
        return best;
    };
    const std::size_t best = best_of(rep.grid);
    rep.best_value = rep.grid[best].value;
    rep.holds_at_best = rep.grid[best].holds;
    if (!rep.grid_alt.empty()) rep.holds_at_best_alt = rep.grid_alt[best_of(rep.grid_alt)].holds;
    rep.constants = compute_constants(beta, hp.active, rep.best_value, in.mu, in.a, in.b);
    rep.constants.D = in.D;
    rep.constants.L = in.L;
    rep.constants.sigma_l = in.sigma_l;
    rep.constants.sigma_g = in.sigma_g;
    if (interp) rep.constants.zeta = rep.best_value;
    return rep;
}

/// Step size for the P\L regime, η = min(1/(NKL), log(NKT)/(λμKT)).
inline double pl_learning_rate(std::size_t active, std::size_t K, std::size_t T, double L, double mu, double lambda) {
    const double n = static_cast<double>(active), k = static_cast<double>(K), t = static_cast<double>(T);
    return std::min(1.0 / (n * k * L), std::log(n * k * t) / (lambda * mu * k * t));
}

// ---------------------------------------------------------------------------
// Divergence scaling in η and T.

struct DecayCell {
    double lr = 0.0;
    std::size_t rounds = 0;
    std::vector<double> per_seed; // (1/T) Σ_{t<T} Δ^t
    double mean = 0.0;
};

struct DecayReport {
    std::vector<DecayCell> cells;
    double lr_exponent = kNaN;     // slope of log mean vs log η at the largest T
    double rounds_exponent = kNaN; // slope of log mean vs log T at the smallest η
    std::vector<double> halving_ratios;  // mean(η)/mean(η/2) for consecutive ladder steps, largest T
    std::vector<double> doubling_ratios; // mean(T)/mean(2T) for consecutive T steps, first η
};

namespace detail {

inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n < 2) return kNaN;
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double num = 0, den = 0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (std::log(x[i]) - mx) * (std::log(y[i]) - my);
        den += (std::log(x[i]) - mx) * (std::log(x[i]) - mx);
    }
    return num / den;
}

} // namespace detail

/// Runs every (η, T, seed) combination and reports how the averaged
/// divergence scales. `make_problem(seed)` builds the seeded problem.
inline DecayReport divergence_decay_check(const std::function<Problem(std::uint64_t)>& make_problem,
                                          const StrategySpec& strategy, const HyperParams& base,
                                          const std::vector<double>& lrs, const std::vector<std::size_t>& rounds,
                                          const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1) {
    require(!lrs.empty() && !rounds.empty() && !seeds.empty(), "divergence_decay_check: empty grid axis");
    DecayReport rep;
    std::vector<Problem> problems;
    for (auto s : seeds) problems.push_back(make_problem(s));
    for (double lr : lrs)
        for (std::size_t T : rounds) {
            DecayCell cell;
            cell.lr = lr;
            cell.rounds = T;
            cell.per_seed.resize(seeds.size());
            parallel_for(seeds.size(), jobs, [&](std::size_t si) {
                HyperParams hp = base;
                hp.lr = lr;
                hp.rounds = T;
                hp.seed = seeds[si];
                const auto run = run_experiment(problems[si], strategy, hp);
                cell.per_seed[si] = summarize(run.initial, run.records).average_divergence;
            });
            for (double v : cell.per_seed) cell.mean += v;
            cell.mean /= static_cast<double>(seeds.size());
            rep.cells.push_back(std::move(cell));
        }
    auto at = [&](std::size_t li, std::size_t ti) -> const DecayCell& { return rep.cells[li * rounds.size() + ti]; };
    const std::size_t t_last = rounds.size() - 1;
    std::vector<double> xs, ys;
    for (std::size_t li = 0; li < lrs.size(); ++li) {
        xs.push_back(lrs[li]);
        ys.push_back(at(li, t_last).mean);
        if (li > 0) rep.halving_ratios.push_back(at(li - 1, t_last).mean / at(li, t_last).mean);
    }
    rep.lr_exponent = detail::loglog_slope(xs, ys);
    xs.clear();
    ys.clear();
    for (std::size_t ti = 0; ti < rounds.size(); ++ti) {
        xs.push_back(static_cast<double>(rounds[ti]));
        ys.push_back(at(0, ti).mean);
        if (ti > 0) rep.doubling_ratios.push_back(at(0, ti - 1).mean / at(0, ti).mean);
    }
    rep.rounds_exponent = detail::loglog_slope(xs, ys);
    return rep;
}

// ---------------------------------------------------------------------------
// Paired-dataset stability runs.

struct Perturbation {
    std::size_t client = 0;
    std::size_t sample = 0;
    bool enabled = true; // false: both runs see identical data (control)
};

struct StabilitySetup {
    std::function<Problem(std::uint64_t)> make_problem;
    /// Fresh draw (features, label) that replaces the perturbed sample.
    std::function<std::pair<std::vector<double>, double>(std::uint64_t)> replacement;
    /// Held-out probe points for the loss gap.
    std::function<Dataset(std::uint64_t)> probe;
    StrategySpec strategy;
    HyperParams hp;
};

struct StabilityTrace {
    double beta = 0.0;
    std::uint64_t seed = 0;
    std::vector<double> delta;        // δ_K^t for t = 1..T
    double final_delta = 0.0;         // δ_K^T
    double final_param_distance = 0.0; // ‖w^T − w̃^T‖
    double loss_gap = 0.0;            // max over probes |f(w^T; z) − f(w̃^T; z)|
    double U = 0.0;                   // 1.1 × max probe loss
    std::optional<std::size_t> t0;    // first round the perturbed client trained
    std::size_t K = 0;
    double c = 0.0;
    bool trajectories_identical = false;
};

inline StabilityTrace run_stability_pair(const StabilitySetup& setup, const Perturbation& perturb, double beta,
                                         std::uint64_t seed) {
    const Problem base = setup.make_problem(seed);
    require(perturb.client < base.clients.size(),
            "perturbation client " + std::to_string(perturb.client) + " out of range [0, " +
                std::to_string(base.clients.size()) + ")");
    const std::size_t shard = base.clients[perturb.client].shard.size();
    require(perturb.sample < shard, "perturbation sample " + std::to_string(perturb.sample) + " out of range [0, " +
                                        std::to_string(shard) + ") for client " + std::to_string(perturb.client));
    Problem twin = base;
    if (perturb.enabled) {
        auto [x, y] = setup.replacement(seed);
        auto& data = twin.clients[perturb.client].shard;
        require(x.size() == data.features, "replacement sample has the wrong feature count");
        std::copy(x.begin(), x.end(), data.row(perturb.sample).begin());
        data.y[perturb.sample] = y;
    }

    HyperParams hp = setup.hp;
    hp.seed = seed;
    const StrategySpec strategy = compose_ri(setup.strategy, beta);
    hp.validate(strategy);

    ServerState s1 = make_server_state(base.init, strategy, seed), s2 = s1;
    std::vector<ClientState> c1, c2;
    for (std::size_t i = 0; i < hp.clients; ++i) c1.push_back(make_client_state(i, base.init, strategy, seed));
    c2 = c1;

    StabilityTrace tr;
    tr.beta = beta;
    tr.seed = seed;
    tr.K = hp.local_iters.value_or(0);
    tr.c = hp.lr_c;
    tr.trajectories_identical = true;
    for (std::size_t t = 0; t < hp.rounds; ++t) {
        const auto r1 = run_round(s1, c1, strategy, hp, base);
        const auto r2 = run_round(s2, c2, strategy, hp, twin);
        if (r1.active != r2.active) throw NumericError("paired runs sampled different clients");
        if (!tr.t0 && std::binary_search(r1.active.begin(), r1.active.end(), perturb.client)) tr.t0 = t + 1;
        double d = 0.0;
        for (std::size_t i = 0; i < hp.clients; ++i) d += std::sqrt(distance_sq(c1[i].last_local, c2[i].last_local));
        tr.delta.push_back(d / static_cast<double>(hp.clients));
        if (!s1.global.bitwise_equal(s2.global)) tr.trajectories_identical = false;
    }
    tr.final_delta = tr.delta.empty() ? 0.0 : tr.delta.back();
    tr.final_param_distance = std::sqrt(distance_sq(s1.global, s2.global));

    if (setup.probe) {
        const Dataset probe = setup.probe(seed);
        double max_loss = 0.0;
        for (std::size_t j = 0; j < probe.size(); ++j) {
            const std::size_t row[1] = {j};
            const Batch b{&probe, row, 0};
            const double l1 = loss(base.eval_model, s1.global, b);
            const double l2 = loss(base.eval_model, s2.global, b);
            tr.loss_gap = std::max(tr.loss_gap, std::abs(l1 - l2));
            max_loss = std::max({max_loss, l1, l2});
        }
        tr.U = 1.1 * max_loss;
    }
    return tr;
}

/// Paired runs on S and S̃ (one replaced sample) for every β and seed. The
/// schedule must be η_t = c/t.
inline std::vector<StabilityTrace> stability_experiment(const StabilitySetup& setup, const Perturbation& perturb,
                                                        const std::vector<double>& betas,
                                                        const std::vector<std::uint64_t>& seeds, std::size_t jobs = 1) {
    if (setup.hp.schedule != LrSchedule::inverse_time)
        throw AssumptionError("stability runs require the inverse-time schedule eta_t = c/t");
    require(!betas.empty() && !seeds.empty(), "stability_experiment: need at least one beta and one seed");
    std::vector<StabilityTrace> out(betas.size() * seeds.size());
    parallel_for(out.size(), jobs, [&](std::size_t k) {
        out[k] = run_stability_pair(setup, perturb, betas[k / seeds.size()], seeds[k % seeds.size()]);
    });
    return out;
}

} // namespace fedinit
