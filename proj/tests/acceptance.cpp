#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>

#include "fedinit/commands.hpp"
#include "support.hpp"

using namespace fedinit;
using testing_support::hyper;
using testing_support::logistic_problem;
using testing_support::quadratic_problem;
using testing_support::rel_l2;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int digits = 4) {
    std::ostringstream s;
    s.precision(digits);
    s << v;
    return s.str();
}

std::size_t default_threads() { return default_jobs(); }

ExperimentConfig load_config(const std::string& name, Mode mode) {
    return parse_config(read_json_file(std::filesystem::path(FEDINIT_CONFIG_DIR) / name), mode);
}

// Global models of two strategies compared after every round.
bool identical_global_trajectory(const Problem& prob, const StrategySpec& a, const StrategySpec& b,
                                 const HyperParams& hp) {
    ServerState sa = make_server_state(prob.init, a, hp.seed), sb = make_server_state(prob.init, b, hp.seed);
    std::vector<ClientState> ca, cb;
    for (std::size_t i = 0; i < hp.clients; ++i) {
        ca.push_back(make_client_state(i, prob.init, a, hp.seed));
        cb.push_back(make_client_state(i, prob.init, b, hp.seed));
    }
    for (std::size_t t = 0; t < hp.rounds; ++t) {
        run_round(sa, ca, a, hp, prob);
        run_round(sb, cb, b, hp, prob);
        if (!sa.global.bitwise_equal(sb.global)) return false;
    }
    return true;
}

Outcome fedavg_degradation() {
    int same = 0, total = 0;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto hp = hyper(20, 10, 5, 5, 0.02, seed, 2);
        const auto quad = quadratic_problem(10, 5, 1.0, 10.0, seed, 10, 0.5);
        const auto logi = logistic_problem(10, seed);
        for (const Problem* p : {&quad, &logi}) {
            ++total;
            if (identical_global_trajectory(*p, make_strategy("FedInit", 0.0), make_strategy("FedAvg"), hp)) ++same;
        }
    }
    return {same == total, std::to_string(same) + "/" + std::to_string(total) + " trajectories bitwise identical"};
}

Dataset random_batch(std::size_t n, std::size_t p, std::size_t classes, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
    Dataset d;
    d.features = p;
    d.classes = classes;
    std::vector<double> row(p);
    for (std::size_t j = 0; j < n; ++j) {
        for (auto& v : row) v = normal(rng);
        d.push_back(row, classes == 0 ? normal(rng) : static_cast<double>(label(rng)));
    }
    return d;
}

Outcome gradient_correctness() {
    double worst = 0.0;
    std::string per_kind;
    for (int kind = 0; kind < 4; ++kind) {
        double kind_worst = 0.0;
        for (std::uint64_t seed = 0; seed < 100; ++seed) {
            Rng rng = make_rng(seed, Stream::probe, 10 + kind);
            std::normal_distribution<double> normal(0.0, 1.0);
            ModelSpec m;
            Dataset data;
            switch (kind) {
            case 0: {
                Eigen::MatrixXd g(4, 4);
                for (int r = 0; r < 4; ++r)
                    for (int c = 0; c < 4; ++c) g(r, c) = normal(rng);
                const Eigen::MatrixXd a = g * g.transpose() + Eigen::MatrixXd::Identity(4, 4);
                std::vector<double> rows(16);
                for (int r = 0; r < 4; ++r)
                    for (int c = 0; c < 4; ++c) rows[static_cast<std::size_t>(r * 4 + c)] = a(r, c);
                m = ModelSpec::quadratic(4, rows);
                data = random_batch(6, 4, 0, rng);
                break;
            }
            case 1: m = ModelSpec::linear_regression(6); data = random_batch(8, 6, 0, rng); break;
            case 2: m = ModelSpec::logistic_regression(6); data = random_batch(8, 6, 2, rng); break;
            default: m = ModelSpec::mlp({6, 8, 4}); data = random_batch(8, 6, 4, rng); break;
            }
            ParamVector w(m.param_count());
            for (auto& v : w) v = normal(rng);
            const auto rows = all_rows(data.size());
            const Batch b{&data, rows, 0};
            kind_worst = std::max(kind_worst, rel_l2(grad(m, w, b), finite_diff_grad(m, w, b, 1e-6)));
        }
        worst = std::max(worst, kind_worst);
        per_kind += (kind ? ", " : "") + std::string(to_string(static_cast<ModelKind>(kind))) + " " + num(kind_worst, 2);
    }
    return {worst <= 1e-5, "worst relative error " + num(worst, 3) + " (" + per_kind + "), limit 1e-5"};
}

Outcome divergence_oracle() {
    std::mt19937_64 rng(2024);
    std::normal_distribution<double> n(0.0, 2.0);
    std::uniform_int_distribution<int> size(1, 10);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int C = size(rng), d = size(rng);
        ParamVector g(static_cast<std::size_t>(d));
        for (auto& v : g) v = n(rng);
        std::vector<ParamVector> lasts;
        double brute = 0.0;
        for (int i = 0; i < C; ++i) {
            ParamVector w(static_cast<std::size_t>(d));
            double sq = 0.0;
            for (int j = 0; j < d; ++j) {
                w[j] = n(rng);
                sq += (w[j] - g[j]) * (w[j] - g[j]);
            }
            brute += sq;
            lasts.push_back(w);
        }
        brute /= C;
        worst = std::max(worst, std::abs(divergence(lasts, g) - brute));
    }
    return {worst <= 1e-12, "max |error| " + num(worst, 3) + " over 100 instances, limit 1e-12"};
}

Outcome accounting_table() {
    struct Row {
        const char* name;
        std::uint64_t comm, storage;
    };
    const Row table[] = {{"FedAvg", 1, 1}, {"FedAdam", 1, 2}, {"FedSAM", 1, 2}, {"SCAFFOLD", 2, 2},
                         {"FedDyn", 1, 2}, {"FedCM", 2, 2},   {"FedInit", 1, 1}};
    const std::size_t C = 10, N = 5, d = 100;
    const auto prob = quadratic_problem(C, d, 1.0, 5.0, 4);
    bool ok = true;
    std::string bad;
    for (const auto& r : table) {
        const auto spec = make_strategy(r.name);
        const auto acc = comm_storage_accounting(spec, N, C, d);
        const bool table_ok = acc.comm == r.comm * N * d && acc.comm_ratio == static_cast<double>(r.comm) &&
                              acc.storage == r.storage * C * d &&
                              acc.storage_ratio == static_cast<double>(r.storage);
        const auto run = run_experiment(prob, spec, hyper(3, C, N, 2, 0.01, 4));
        bool measured_ok = true;
        for (const auto& rec : run.records)
            measured_ok = measured_ok && rec.bytes_down == acc.down * sizeof(double) &&
                          rec.bytes_up == acc.up * sizeof(double) &&
                          std::max(rec.bytes_down, rec.bytes_up) == acc.comm * sizeof(double);
        if (!table_ok || !measured_ok) {
            ok = false;
            bad += std::string(" ") + r.name;
        }
    }
    return {ok, ok ? "7 strategies: table entries and d=100 byte counters match" : "mismatch:" + bad};
}

Outcome convergence_bounds() {
    ExperimentConfig cfg = load_config("verify_bounds.json", Mode::verify_bounds);
    cfg.verify.theorems = {1, 3};
    bool ok = true;
    std::string detail;
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        cfg.hp.seed = seed;
        const auto out = verify_bounds(cfg, 1);
        for (const auto& r : out.report["theorems"]) {
            const int th = r["theorem"].get<int>();
            if (r["refused"].get<bool>()) {
                ok = false;
                detail += " thm" + std::to_string(th) + " refused: " + r["refusal"].get<std::string>();
                continue;
            }
            double best_rhs = -1.0;
            for (const auto& g : r["grid"]) best_rhs = std::max(best_rhs, g["rhs"].get<double>());
            ok = ok && r["best"]["holds"].get<bool>();
            if (seed == 0)
                detail += (detail.empty() ? "" : "; ") + std::string(th == 1 ? "general" : "interpolation") +
                          " form: lhs " + num(r["lhs"].get<double>()) + " <= rhs " + num(best_rhs);
        }
    }
    return {ok, detail + " (T=" + std::to_string(cfg.hp.rounds) + ", beta=0.05, 3 seeds)"};
}

Outcome pl_convergence() {
    double worst = 0.0;
    double lr_used = 0.0;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto fam = gen_quadratic_clients(10, 5, 1.0, 2.0, seed, true);
        const auto prob = quadratic_problem(fam, 10, 0.0, seed);
        const std::size_t T = 500, K = 5, C = 10;
        const double lr = pl_learning_rate(C, K, T, fam.smoothness(), fam.pl_constant(), 0.25);
        lr_used = lr;
        const auto run = run_experiment(prob, make_strategy("FedInit", 0.1), hyper(T, C, C, K, lr, seed));
        worst = std::max(worst, run.records.back().optimization_error);
    }
    return {worst <= 1e-6, "max f(w^T) - f(w*) = " + num(worst, 3) + " over 5 seeds (lr " + num(lr_used, 3) +
                               ", T=500, K=5, N=C=10), limit 1e-6"};
}

Outcome ri_reduces_divergence() {
    int wins = 0;
    const int seeds = 10;
    double mean0 = 0.0, mean1 = 0.0;
    for (int s = 0; s < seeds; ++s) {
        const auto seed = static_cast<std::uint64_t>(s);
        const auto prob = quadratic_problem(20, 10, 2.0, 10.0, seed, 20, 0.5);
        const auto hp = hyper(100, 20, 10, 10, 0.01, seed, 4);
        const auto a = run_experiment(prob, make_strategy("FedInit", 0.0), hp);
        const auto b = run_experiment(prob, make_strategy("FedInit", 0.1), hp);
        const double d0 = a.records.back().divergence, d1 = b.records.back().divergence;
        mean0 += d0 / seeds;
        mean1 += d1 / seeds;
        if (d1 < d0) ++wins;
    }
    return {wins >= 8, "beta=0.1 lower final divergence in " + std::to_string(wins) + "/10 seeds (mean " + num(mean1) +
                           " vs " + num(mean0) + "), need >= 8"};
}

Outcome divergence_scaling() {
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = 0; s < 10; ++s) seeds.push_back(s);
    const std::size_t jobs = default_threads();

    // Noise-dominated: stochastic batches, every client active.
    const auto noisy = divergence_decay_check(
        [](std::uint64_t s) { return quadratic_problem(10, 5, 0.0, 3.0, s, 20, 2.0, true); },
        make_strategy("FedInit", 0.05), hyper(1, 10, 10, 5, 0.01, 0, 2), {0.02, 0.01}, {400}, seeds, jobs);
    const double halving = noisy.halving_ratios.front();

    // Deterministic: full batch, identical clients, partial participation.
    const auto clean = divergence_decay_check(
        [](std::uint64_t s) { return quadratic_problem(10, 5, 0.0, 5.0, s, 10, 0.0, true); },
        make_strategy("FedInit", 0.05), hyper(1, 10, 5, 5, 0.02, 0), {0.02}, {200, 400}, seeds, jobs);
    const double doubling = clean.doubling_ratios.front();

    const bool ok = halving >= 4.0 / 1.5 && halving <= 4.0 * 1.5 && doubling >= 2.0 / 1.5 && doubling <= 2.0 * 1.5;
    return {ok, "halving lr shrinks averaged divergence by " + num(halving) + "x (target 4x, factor 1.5); doubling T by " +
                    num(doubling) + "x (target 2x, factor 1.5)"};
}

Outcome stability_trend() {
    ExperimentConfig cfg = load_config("stability_logistic.json", Mode::stability);
    cfg.stability.seeds.clear();
    for (std::uint64_t s = 0; s < 20; ++s) cfg.stability.seeds.push_back(s);
    const StabilitySetup setup = stability_setup(cfg);
    const Perturbation perturb{cfg.stability.client, cfg.stability.sample, true};
    const auto traces = stability_experiment(setup, perturb, cfg.stability.betas, cfg.stability.seeds, default_threads());

    std::vector<double> means(cfg.stability.betas.size(), 0.0);
    for (const auto& tr : traces)
        for (std::size_t b = 0; b < means.size(); ++b)
            if (tr.beta == cfg.stability.betas[b]) means[b] += tr.final_delta / static_cast<double>(cfg.stability.seeds.size());
    bool monotone = true;
    for (std::size_t b = 1; b < means.size(); ++b) monotone = monotone && means[b] <= means[b - 1];

    bool control = true;
    Perturbation none = perturb;
    none.enabled = false;
    for (const auto& tr : stability_experiment(setup, none, cfg.stability.betas, {0, 1, 2, 3, 4}, default_threads())) {
        control = control && tr.trajectories_identical && tr.loss_gap == 0.0;
        for (double d : tr.delta) control = control && d == 0.0;
    }
    std::string trend;
    for (std::size_t b = 0; b < means.size(); ++b)
        trend += (b ? ", " : "") + std::string("beta ") + num(cfg.stability.betas[b], 2) + ": " + num(means[b]);
    return {monotone && control, "mean final delta " + trend + (monotone ? " (non-increasing)" : " (not non-increasing)") +
                                     "; zero-perturbation control " + (control ? "exactly zero" : "NONZERO") +
                                     " (20 seeds)"};
}

Outcome accuracy_ordering() {
    ExperimentConfig base = load_config("blobs_mlp.json", Mode::run);
    base.hp.rounds = 100;
    struct Arm {
        std::string name;
        StrategySpec spec;
    };
    const std::vector<Arm> arms = {{"FedAvg", make_strategy("FedAvg")},
                                   {"FedInit(0.05)", make_strategy("FedInit", 0.05)},
                                   {"FedInit(0.1)", make_strategy("FedInit", 0.1)},
                                   {"SCAFFOLD", make_strategy("SCAFFOLD")},
                                   {"SCAFFOLD+RI", compose_ri(make_strategy("SCAFFOLD"), 0.1)}};
    const std::size_t seeds = 5;
    std::vector<std::vector<double>> acc(arms.size(), std::vector<double>(seeds));
    parallel_for(arms.size() * seeds, default_threads(), [&](std::size_t k) {
        const std::size_t a = k / seeds, s = k % seeds;
        ExperimentConfig cfg = base;
        cfg.hp.seed = s;
        cfg.strategy = arms[a].spec;
        const auto run = run_experiment(build_problem(cfg, s), cfg.strategy, cfg.hp);
        acc[a][s] = summarize(run.initial, run.records).smoothed_max_test_acc;
    });
    auto mean = [&](std::size_t a) {
        double m = 0.0;
        for (double v : acc[a]) m += v / static_cast<double>(seeds);
        return m;
    };
    const double fedavg = mean(0), fedinit = std::max(mean(1), mean(2));
    int ri_wins = 0;
    for (std::size_t s = 0; s < seeds; ++s)
        if (acc[4][s] >= acc[3][s]) ++ri_wins;
    const bool ok = fedinit >= fedavg && ri_wins >= 3;
    return {ok, "mean smoothed accuracy FedInit " + num(fedinit) + " (best beta) vs FedAvg " + num(fedavg) +
                    "; SCAFFOLD+RI >= SCAFFOLD in " + std::to_string(ri_wins) + "/5 seeds"};
}

Outcome determinism_resume() {
    ExperimentConfig cfg = load_config("quadratic_fedinit.json", Mode::run);
    const auto root = std::filesystem::temp_directory_path() / "fedinit_acceptance";
    std::filesystem::remove_all(root);
    std::ostringstream sink;
    CommandOptions opts;
    opts.log = &sink;
    auto run_into = [&](const std::string& name, CommandOptions o) {
        ExperimentConfig c = cfg;
        c.out_dir = root / name;
        return cmd_run(c, o);
    };
    opts.jobs = 1;
    const int a = run_into("a", opts);
    opts.jobs = default_threads() + 2;
    const int b = run_into("b", opts);
    CommandOptions stop = opts;
    stop.stop_after = 40;
    const int c1 = run_into("resumed", stop);
    CommandOptions resume = opts;
    resume.resume = true;
    const int c2 = run_into("resumed", resume);
    const std::string ra = read_file(root / "a" / "rounds.csv");
    const bool rerun = ra == read_file(root / "b" / "rounds.csv");
    const bool resumed = ra == read_file(root / "resumed" / "rounds.csv");
    const bool ok = a == 0 && b == 0 && c1 == kExitInterrupted && c2 == 0 && rerun && resumed;
    return {ok, std::string("rerun rounds.csv ") + (rerun ? "byte-identical" : "DIFFERS") + "; resume after round 40 " +
                    (resumed ? "byte-identical" : "DIFFERS")};
}

} // namespace

int main() {
    struct Criterion {
        int id;
        const char* title;
        std::function<Outcome()> check;
    };
    const std::vector<Criterion> criteria = {
        {1, "beta=0 reproduces FedAvg exactly", fedavg_degradation},
        {2, "analytic gradients match finite differences", gradient_correctness},
        {3, "divergence matches brute force", divergence_oracle},
        {4, "communication and storage accounting", accounting_table},
        {5, "convergence bounds hold on a homogeneous quadratic", convergence_bounds},
        {6, "P-L regime reaches the optimum", pl_convergence},
        {7, "relaxed initialization lowers divergence", ri_reduces_divergence},
        {8, "averaged divergence scales with lr and T", divergence_scaling},
        {9, "stability difference non-increasing in beta", stability_trend},
        {10, "scaled accuracy ordering", accuracy_ordering},
        {11, "determinism and checkpoint resume", determinism_resume},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s [%d] %s: %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.title, o.detail.c_str(), secs);
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
