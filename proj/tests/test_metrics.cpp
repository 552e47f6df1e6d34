#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace fedinit;
using testing_support::hyper;
using testing_support::quadratic_problem;

TEST(Divergence, Examples) {
    const ParamVector g{1.0};
    const std::vector<ParamVector> same(3, g);
    EXPECT_EQ(divergence(same, g), 0.0);
    const std::vector<ParamVector> lasts{ParamVector{0.0}, ParamVector{2.0}};
    EXPECT_EQ(divergence(lasts, g), 1.0);
    EXPECT_THROW(divergence(std::vector<ParamVector>{ParamVector{1, 2}}, g), ConfigError);
}

TEST(Divergence, MatchesBruteForce) {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> n(0.0, 3.0);
    std::uniform_int_distribution<int> size(1, 10);
    for (int trial = 0; trial < 200; ++trial) {
        const int C = size(rng), d = size(rng);
        std::vector<ParamVector> lasts;
        ParamVector g(static_cast<std::size_t>(d));
        for (auto& v : g) v = n(rng);
        double brute = 0.0;
        for (int i = 0; i < C; ++i) {
            ParamVector w(static_cast<std::size_t>(d));
            for (int j = 0; j < d; ++j) {
                w[j] = n(rng);
                brute += (w[j] - g[j]) * (w[j] - g[j]) / C;
            }
            lasts.push_back(w);
        }
        EXPECT_NEAR(divergence(lasts, g), brute, 1e-12);
    }
}

TEST(Divergence, RoundRecordCountsStragglers) {
    const auto prob = quadratic_problem(6, 3, 1.0, 4.0, 2);
    const auto strat = make_strategy("FedInit", 0.1);
    const auto hp = hyper(5, 6, 2, 3, 0.05, 2);
    const auto run = run_experiment(prob, strat, hp);
    std::vector<ParamVector> lasts;
    for (const auto& c : run.clients) lasts.push_back(c.last_local);
    double brute = 0.0;
    for (const auto& w : lasts)
        for (std::size_t j = 0; j < w.dim(); ++j)
            brute += std::pow(w[j] - run.server.global[j], 2) / 6.0;
    EXPECT_NEAR(run.records.back().divergence, brute, 1e-12);
}

TEST(OptimizationError, OneDimensionalFixture) {
    Eigen::MatrixXd one(1, 1);
    one << 1.0;
    Eigen::VectorXd b0(1), b2(1);
    b0 << 0.0;
    b2 << 2.0;
    const QuadraticFamily fam({one, one}, {b0, b2});
    EXPECT_NEAR(optimization_error(fam, ParamVector{0.0}), 0.5, 1e-15);
    EXPECT_EQ(optimization_error(fam, ParamVector{1.0}), 0.0);
    EXPECT_THROW(optimization_error(fam, ParamVector{1.0, 2.0}), ConfigError);
}

TEST(OptimizationError, MonotoneAwayFromOptimum) {
    const auto fam = gen_quadratic_clients(5, 4, 1.0, 10.0, 3);
    EXPECT_LE(optimization_error(fam, fam.minimizer()), 1e-12);
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n;
    for (int dir = 0; dir < 20; ++dir) {
        Eigen::VectorXd u(4);
        for (int j = 0; j < 4; ++j) u[j] = n(rng);
        double prev = -1.0;
        for (double s = 0.0; s <= 3.0; s += 0.25) {
            const double e = optimization_error(fam, from_eigen(to_eigen(fam.minimizer()) + s * u));
            EXPECT_GE(e, prev);
            prev = e;
        }
    }
}

TEST(GeneralizationGap, SameSetIsZero) {
    const auto data = gen_classification(2, 20, 3, 1.0, 1);
    const auto model = ModelSpec::logistic_regression(3);
    Rng rng = make_rng(1, Stream::init);
    const auto w = initial_params(model, rng);
    EXPECT_EQ(generalization_gap(model, w, data, data), 0.0);
    EXPECT_THROW(generalization_gap(model, w, data, Dataset{}), ConfigError);
}

TEST(GeneralizationGap, UntrainedModelHasNoGap) {
    std::vector<double> gaps;
    const auto model = ModelSpec::logistic_regression(4);
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto split = split_train_test(gen_classification(2, 100, 4, 1.0, seed), 0.5, seed);
        Rng rng = make_rng(seed, Stream::init);
        gaps.push_back(generalization_gap(model, initial_params(model, rng), split.train, split.test));
    }
    const double mean = std::accumulate(gaps.begin(), gaps.end(), 0.0) / 50.0;
    double var = 0.0;
    for (double g : gaps) var += (g - mean) * (g - mean) / 49.0;
    EXPECT_LE(std::abs(mean), 2.0 * std::sqrt(var / 50.0));
}

TEST(GeneralizationGap, OverfitModelHasPositiveGap) {
    int positive = 0;
    const auto model = ModelSpec::mlp({10, 32, 2});
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto data = gen_classification(2, 110, 10, 1.0, seed);
        const auto split = split_train_test(data, 200.0 / 220.0, seed);
        Rng rng = make_rng(seed, Stream::init);
        ParamVector w = initial_params(model, rng);
        const auto rows = all_rows(split.train.size());
        const Batch batch{&split.train, rows, 0};
        for (int k = 0; k < 1500; ++k) add_scaled(w, -0.5, grad(model, w, batch));
        EXPECT_LT(loss(model, w, batch), 0.05);
        if (generalization_gap(model, w, split.train, split.test) > 0.0) ++positive;
    }
    EXPECT_GE(positive, 45);
}

TEST(Accounting, CommunicationAndStorageTable) {
    const std::size_t N = 10, C = 100, d = 7;
    struct Row {
        const char* name;
        std::uint64_t comm, storage;
    };
    for (const auto& r : {Row{"FedAvg", 1, 1}, Row{"FedInit", 1, 1}, Row{"SCAFFOLD", 2, 2}, Row{"FedCM", 2, 2},
                          Row{"FedDyn", 1, 2}, Row{"FedAdam", 1, 2}, Row{"FedSAM", 1, 2}}) {
        const auto acc = comm_storage_accounting(make_strategy(r.name), N, C, d);
        EXPECT_EQ(acc.comm, r.comm * N * d) << r.name;
        EXPECT_EQ(acc.comm_ratio, static_cast<double>(r.comm)) << r.name;
        if (std::string(r.name) == "FedAvg" || std::string(r.name) == "FedInit" ||
            std::string(r.name) == "SCAFFOLD") {
            EXPECT_EQ(acc.storage, r.storage * C * d) << r.name;
            EXPECT_EQ(acc.storage_ratio, static_cast<double>(r.storage)) << r.name;
        }
    }
}

TEST(Accounting, MatchesMeasuredByteCounters) {
    const auto prob = quadratic_problem(8, 4, 1.0, 3.0, 5);
    for (const char* name : {"FedAvg", "FedInit", "SCAFFOLD", "FedCM", "FedDyn", "FedAdam", "FedSAM"}) {
        const auto strat = make_strategy(name);
        const auto run = run_experiment(prob, strat, hyper(3, 8, 5, 2, 0.05, 5));
        const auto acc = comm_storage_accounting(strat, 5, 8, 4);
        for (const auto& rec : run.records) {
            EXPECT_EQ(rec.bytes_down, acc.down * sizeof(double)) << name;
            EXPECT_EQ(rec.bytes_up, acc.up * sizeof(double)) << name;
        }
    }
}

TEST(Smoothing, TrailingAverageAndWindowMax) {
    const std::vector<double> v{1, 2, 3, 4, 5, 6};
    const auto s = moving_average(v, 3);
    const std::vector<double> expect{1, 1.5, 2, 3, 4, 5};
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(s[i], expect[i]);
    EXPECT_DOUBLE_EQ(smoothed_max_last(v, 2, 3), 5.0);
    const std::vector<double> spike{0, 0, 10, 0, 0, 0, 0, 0};
    EXPECT_DOUBLE_EQ(smoothed_max_last(spike, 3, 5), 2.0);
    EXPECT_DOUBLE_EQ(smoothed_max_last(spike, 8, 5), 10.0 / 3.0);
    EXPECT_TRUE(std::isnan(smoothed_max_last(std::vector<double>{})));
}
