#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fedinit/config.hpp"
#include "fedinit/datagen.hpp"
#include "fedinit/experiment.hpp"
#include "fedinit/federation.hpp"
#include "fedinit/models.hpp"
#include "fedinit/quadratic.hpp"

namespace testing_support {

using namespace fedinit;

inline Problem quadratic_problem(const QuadraticFamily& family, std::size_t samples, double noise, std::uint64_t seed) {
    Problem p;
    for (std::size_t i = 0; i < family.clients(); ++i) {
        Rng rng = make_rng(seed, Stream::data, 100 + i);
        p.clients.push_back({ModelSpec::quadratic(family.dimension(), family.curvature_row_major(i)),
                             quadratic_client_data(family, i, samples, noise, rng)});
    }
    p.eval_model = p.clients.front().model;
    p.family = family;
    p.init = ParamVector(family.dimension());
    return p;
}

inline Problem quadratic_problem(std::size_t clients, std::size_t dim, double spread, double cond, std::uint64_t seed,
                                 std::size_t samples = 10, double noise = 0.0, bool shared = false) {
    return quadratic_problem(gen_quadratic_clients(clients, dim, spread, cond, seed, shared), samples, noise, seed);
}

/// Two-class blobs split over `clients` with a Dirichlet(Dr) partition.
inline Problem logistic_problem(std::size_t clients, std::uint64_t seed, double dr = 0.6, std::size_t per_class = 60,
                                std::size_t features = 5) {
    ExperimentConfig cfg;
    cfg.problem.type = ProblemType::classification;
    cfg.problem.model = "logistic-regression";
    cfg.problem.classes = 2;
    cfg.problem.samples_per_class = per_class;
    cfg.problem.features = features;
    cfg.problem.separation = 2.0;
    cfg.partition.dirichlet = dr;
    cfg.hp.clients = clients;
    return build_problem(cfg, seed);
}

inline HyperParams hyper(std::size_t T, std::size_t C, std::size_t N, std::size_t K, double lr, std::uint64_t seed,
                         std::size_t batch = 0) {
    HyperParams hp;
    hp.rounds = T;
    hp.clients = C;
    hp.active = N;
    hp.local_iters = K;
    hp.lr = lr;
    hp.lr_decay = 1.0;
    hp.seed = seed;
    hp.batch_size = batch;
    return hp;
}

inline double rel_l2(const ParamVector& a, const ParamVector& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.dim(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

} // namespace testing_support
