#include <algorithm>
#include <filesystem>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "fedinit/checkpoint.hpp"
#include "support.hpp"

using namespace fedinit;
using testing_support::hyper;
using testing_support::logistic_problem;
using testing_support::quadratic_problem;

namespace {

// Serialized state is a bitwise, NaN-safe comparison of everything a run carries.
bool same_trajectory(const RunResult& a, const RunResult& b) {
    return serialize_checkpoint(make_checkpoint(a, 0)) == serialize_checkpoint(make_checkpoint(b, 0));
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "fedinit_federation_test";
    std::filesystem::create_directories(dir);
    return dir / name;
}

} // namespace

TEST(RelaxedInit, FollowsTheRule) {
    const ParamVector w{1, 2, 3}, last{0, 4, 3};
    const auto r = relaxed_init(w, last, 0.5);
    EXPECT_EQ(r, (ParamVector{1.5, 1, 3}));
    EXPECT_TRUE(relaxed_init(w, last, 0.0).bitwise_equal(w));
    EXPECT_THROW(relaxed_init(w, ParamVector{1}, 0.1), ConfigError);
}

TEST(Sampling, DistinctAscendingAndUniform) {
    Rng rng = make_rng(1, Stream::sampler);
    std::vector<int> hits(20, 0);
    const int draws = 4000;
    for (int t = 0; t < draws; ++t) {
        const auto s = sample_clients(20, 5, rng);
        ASSERT_EQ(s.size(), 5u);
        EXPECT_TRUE(std::is_sorted(s.begin(), s.end()));
        EXPECT_EQ(std::set<std::size_t>(s.begin(), s.end()).size(), 5u);
        for (auto i : s) hits[i]++;
    }
    // Each client is expected draws·N/C = 1000 times; 5 sigma ≈ 137.
    for (int h : hits) EXPECT_NEAR(h, 1000, 140);
    EXPECT_EQ(sample_clients(4, 4, rng), (std::vector<std::size_t>{0, 1, 2, 3}));
    EXPECT_THROW(sample_clients(4, 5, rng), ConfigError);
}

TEST(Aggregate, IndependentOfInputOrder) {
    Rng rng = make_rng(2, Stream::probe);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<ClientUpdate> ups;
    for (std::size_t i = 0; i < 9; ++i) {
        ParamVector w(6);
        for (auto& v : w) v = normal(rng) * std::pow(10.0, static_cast<double>(i % 4) * 3);
        ups.push_back({i * 3, w, {}});
    }
    const auto ref = aggregate(ups);
    for (int t = 0; t < 20; ++t) {
        std::shuffle(ups.begin(), ups.end(), rng);
        EXPECT_TRUE(aggregate(ups).bitwise_equal(ref));
    }
    const std::vector<ClientUpdate> two{{0, ParamVector{1, 0}, {}}, {1, ParamVector{4, 3}, {}}};
    const std::vector<double> weights{1, 2};
    EXPECT_EQ(aggregate(two, weights), (ParamVector{3, 2}));
}

TEST(Batches, EpochVisitsEverySampleOnce) {
    ClientState c;
    c.rng = make_rng(1, Stream::client, 0);
    std::vector<int> seen(12, 0);
    for (int k = 0; k < 4; ++k)
        for (auto r : next_batch(c, 12, 3)) seen[r]++;
    for (int s : seen) EXPECT_EQ(s, 1);
    EXPECT_EQ(next_batch(c, 12, 0).size(), 12u);
    EXPECT_EQ(next_batch(c, 12, 50).size(), 12u);
}

TEST(HyperParams, StepsAndValidation) {
    HyperParams hp = hyper(1, 10, 5, 3, 0.1, 0);
    EXPECT_EQ(hp.steps_for(100), 3u);
    hp.local_iters.reset();
    hp.local_epochs = 2;
    hp.batch_size = 8;
    EXPECT_EQ(hp.steps_for(20), 6u);
    hp.batch_size = 0;
    EXPECT_EQ(hp.steps_for(20), 2u);

    const auto fedavg = make_strategy("FedAvg");
    HyperParams bad = hyper(1, 4, 6, 1, 0.1, 0);
    try {
        bad.validate(fedavg);
        FAIL();
    } catch (const ConfigError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("N=6"), std::string::npos) << msg;
        EXPECT_NE(msg.find("C=4"), std::string::npos) << msg;
    }
    HyperParams both = hyper(1, 4, 2, 1, 0.1, 0);
    both.local_epochs = 1;
    EXPECT_THROW(both.validate(fedavg), ConfigError);
    HyperParams ok = hyper(1, 4, 2, 1, 0.1, 0);
    EXPECT_THROW(ok.validate(make_strategy("FedInit", -0.1)), ConfigError);
    ok.allow_negative_beta = true;
    EXPECT_NO_THROW(ok.validate(make_strategy("FedInit", -0.1)));
    ok.theory_mode = true;
    EXPECT_THROW(ok.validate(make_strategy("FedInit", 0.09)), ConfigError);
}

TEST(Round, StragglersKeepTheirLastLocalModel) {
    const auto prob = quadratic_problem(6, 3, 1.0, 5.0, 3);
    const auto strat = make_strategy("FedInit", 0.1);
    const auto hp = hyper(3, 6, 2, 4, 0.05, 3);
    ServerState s = make_server_state(prob.init, strat, hp.seed);
    std::vector<ClientState> cs;
    for (std::size_t i = 0; i < 6; ++i) cs.push_back(make_client_state(i, prob.init, strat, hp.seed));
    for (int t = 0; t < 3; ++t) {
        const auto before = cs;
        const auto rec = run_round(s, cs, strat, hp, prob);
        for (std::size_t i = 0; i < 6; ++i) {
            const bool active = std::binary_search(rec.active.begin(), rec.active.end(), i);
            if (!active) EXPECT_TRUE(cs[i].last_local.bitwise_equal(before[i].last_local));
            else EXPECT_FALSE(cs[i].last_local.bitwise_equal(before[i].last_local));
        }
        EXPECT_EQ(rec.bytes_down, 2u * 3u * sizeof(double));
        EXPECT_EQ(rec.bytes_up, 2u * 3u * sizeof(double));
    }
}

TEST(Round, InitialDivergenceIsZero) {
    const auto prob = quadratic_problem(5, 3, 1.0, 5.0, 1);
    const auto run = run_experiment(prob, make_strategy("FedInit"), hyper(2, 5, 2, 2, 0.05, 1));
    EXPECT_EQ(run.initial.divergence, 0.0);
    EXPECT_EQ(run.initial.round, 0u);
    ASSERT_EQ(run.records.size(), 2u);
    EXPECT_EQ(run.records.back().round, 2u);
    EXPECT_GT(run.records.front().divergence, 0.0);
}

TEST(Round, DeterministicAndSchedulingIndependent) {
    const auto prob = logistic_problem(8, 5);
    const auto strat = make_strategy("FedInit", 0.1);
    const auto hp = hyper(6, 8, 4, 3, 0.1, 5, 4);
    const auto a = run_experiment(prob, strat, hp, RunOptions{});
    RunOptions par;
    par.jobs = 4;
    const auto b = run_experiment(prob, strat, hp, par);
    EXPECT_TRUE(same_trajectory(a, b));
    auto hp2 = hp;
    hp2.seed = 6;
    EXPECT_FALSE(same_trajectory(a, run_experiment(prob, strat, hp2)));
}

TEST(Round, VanishingStepSizeGivesNoDivergence) {
    const auto prob = quadratic_problem(6, 4, 2.0, 10.0, 2);
    const auto run = run_experiment(prob, make_strategy("FedInit", 0.1), hyper(20, 6, 3, 1, 1e-8, 2));
    EXPECT_LE(summarize(run.initial, run.records).average_divergence, 1e-10);
}

TEST(Round, DivergingRunRaisesNumericError) {
    const auto prob = quadratic_problem(4, 3, 1.0, 10.0, 2);
    EXPECT_THROW(run_experiment(prob, make_strategy("FedAvg"), hyper(400, 4, 2, 5, 5.0, 2)), NumericError);
}

TEST(Checkpoint, SerializationRoundTrips) {
    const auto prob = logistic_problem(6, 3);
    RunOptions opts;
    opts.stop_after = 3;
    const auto run = run_experiment(prob, make_strategy("SCAFFOLD"), hyper(5, 6, 3, 2, 0.1, 3, 4), opts);
    EXPECT_FALSE(run.completed);
    const Checkpoint ck = make_checkpoint(run, 42);
    const Checkpoint back = deserialize_checkpoint(serialize_checkpoint(ck));
    EXPECT_EQ(back.config_hash, 42u);
    EXPECT_TRUE(back.server == ck.server);
    EXPECT_TRUE(back.clients == ck.clients);
    EXPECT_EQ(back.records.size(), 3u);
    EXPECT_EQ(serialize_checkpoint(back), serialize_checkpoint(ck));
    auto bytes = serialize_checkpoint(ck);
    bytes.resize(bytes.size() / 2);
    EXPECT_THROW(deserialize_checkpoint(bytes), IoError);
    EXPECT_THROW(deserialize_checkpoint("not a checkpoint at all"), IoError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    for (const char* name : {"FedInit", "SCAFFOLD", "FedAdam", "FedDyn", "FedCM", "FedSAM"}) {
        const auto prob = logistic_problem(6, 9);
        const auto strat = make_strategy(name, 0.1);
        const auto hp = hyper(8, 6, 3, 3, 0.1, 9, 4);
        const auto full = run_experiment(prob, strat, hp);

        const auto path = temp_path(std::string(name) + ".ckpt");
        RunOptions first;
        first.checkpoint_every = 5;
        first.checkpoint_path = path;
        first.stop_after = 5;
        first.config_hash = 7;
        const auto partial = run_experiment(prob, strat, hp, first);
        ASSERT_FALSE(partial.completed);
        RunOptions second;
        second.resume_from = path;
        second.config_hash = 7;
        const auto resumed = run_experiment(prob, strat, hp, second);
        EXPECT_TRUE(resumed.completed);
        EXPECT_TRUE(same_trajectory(full, resumed)) << name;
        EXPECT_EQ(rounds_csv(full.records, 7), rounds_csv(resumed.records, 7));

        second.config_hash = 8;
        EXPECT_THROW(run_experiment(prob, strat, hp, second), ConfigError);
    }
}

TEST(Csv, RoundsFileHasVersionedHeader) {
    const auto prob = quadratic_problem(4, 2, 1.0, 2.0, 1);
    const auto run = run_experiment(prob, make_strategy("FedAvg"), hyper(3, 4, 2, 2, 0.1, 1));
    const auto text = rounds_csv(run.records, 0xabc);
    EXPECT_EQ(text.rfind("# fedinit rounds schema_version=1 config_hash=abc\n", 0), 0u);
    EXPECT_NE(text.find(std::string("\n") + kRoundsHeader + "\n"), std::string::npos);
    EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 5);
}

TEST(Summary, SmoothedMaxUsesTheLastRounds) {
    RoundRecord init;
    std::vector<RoundRecord> recs(60);
    for (std::size_t i = 0; i < recs.size(); ++i) {
        recs[i].round = i + 1;
        recs[i].test_acc = i == 5 ? 1.0 : 0.5;
    }
    recs[58].test_acc = 0.9;
    const auto s = summarize(init, recs);
    EXPECT_NEAR(s.smoothed_max_test_acc, (0.5 * 4 + 0.9) / 5.0, 1e-15);
}
