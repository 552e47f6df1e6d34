#pragma once

#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>
#include <nlohmann/json.hpp>

#include "fedinit/checkpoint.hpp"
#include "fedinit/config.hpp"
#include "fedinit/experiment.hpp"
#include "fedinit/parallel.hpp"
#include "fedinit/theory.hpp"

namespace fedinit {

/// Exit statuses of the CLI.
enum ExitCode : int {
    kExitOk = 0,
    kExitCheckFailed = 1, // a bound was violated
    kExitConfig = 2,
    kExitInterrupted = 3,
    kExitRuntime = 4,
};

struct CommandOptions {
    std::size_t jobs = 1;
    bool resume = false;
    std::optional<std::size_t> stop_after;
    std::ostream* log = &std::cerr;
};

inline std::filesystem::path checkpoint_file(const ExperimentConfig& cfg) { return cfg.out_dir / "checkpoint.bin"; }

namespace detail {

inline json artifact_header(const ExperimentConfig& cfg) {
    return {{"schema_version", kSchemaVersion}, {"config_hash", hash_hex(config_hash(cfg))}};
}

inline void write_json(const std::filesystem::path& path, const json& j) { write_file_atomic(path, j.dump(2) + "\n"); }

inline json summary_json(const RunSummary& s) {
    return {{"rounds", s.rounds},
            {"final_divergence", s.final_divergence},
            {"average_divergence", s.average_divergence},
            {"average_grad_norm_sq", s.average_grad_norm_sq},
            {"final_train_loss", s.final_train_loss},
            {"final_test_loss", s.final_test_loss},
            {"final_test_acc", s.final_test_acc},
            {"smoothed_max_test_acc_last50", s.smoothed_max_test_acc},
            {"final_optimization_error", s.final_optimization_error},
            {"total_bytes_up", s.total_bytes_up},
            {"total_bytes_down", s.total_bytes_down}};
}

inline json accounting_json(const CommStorage& a) {
    return {{"down_floats", a.down},         {"up_floats", a.up},       {"comm_floats", a.comm},
            {"comm_ratio", a.comm_ratio},    {"storage_floats", a.storage}, {"storage_ratio", a.storage_ratio}};
}

inline std::string fmt(double v) { return format_double(v); }

} // namespace detail

// ---------------------------------------------------------------------------

inline int cmd_run(const ExperimentConfig& cfg, const CommandOptions& opts) {
    validate_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    const std::uint64_t hash = config_hash(cfg);
    const Problem problem = build_problem(cfg, cfg.hp.seed);

    RunOptions ro;
    ro.jobs = opts.jobs;
    ro.config_hash = hash;
    ro.checkpoint_every = cfg.checkpoint_every;
    ro.checkpoint_path = checkpoint_file(cfg);
    ro.stop_after = opts.stop_after;
    if (opts.resume) {
        if (!std::filesystem::exists(ro.checkpoint_path))
            throw IoError("--resume: no checkpoint at '" + ro.checkpoint_path.string() + "'");
        ro.resume_from = ro.checkpoint_path;
    }
    RunResult run = run_experiment(problem, cfg.strategy, cfg.hp, ro);
    if (!run.completed) {
        save_checkpoint(make_checkpoint(run, hash), ro.checkpoint_path);
        *opts.log << "stopped after round " << run.server.round << "; checkpoint at " << ro.checkpoint_path.string()
                  << "\n";
        return kExitInterrupted;
    }

    write_file_atomic(cfg.out_dir / "rounds.csv", rounds_csv(run.records, hash));
    json summary = detail::artifact_header(cfg);
    summary["strategy"] = {{"label", cfg.strategy.label()}, {"variant", cfg.strategy.variant()}};
    summary["config"] = config_to_json(cfg);
    summary["summary"] = detail::summary_json(summarize(run.initial, run.records));
    summary["smoothing"] = {{"kernel", "trailing moving average"}, {"width", kSmoothingWidth}, {"window", kFinalWindow}};
    summary["accounting"] =
        detail::accounting_json(comm_storage_accounting(cfg.strategy, cfg.hp.active, cfg.hp.clients, problem.dim()));
    summary["dimension"] = problem.dim();
    detail::write_json(cfg.out_dir / "summary.json", summary);
    *opts.log << cfg.strategy.label() << ": " << cfg.hp.rounds << " rounds written to " << cfg.out_dir.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

struct SweepRow {
    double value = 0.0;
    std::uint64_t seed = 0;
    RunSummary summary;
};

/// Applies one sweep axis value to a copy of the configuration.
inline ExperimentConfig apply_axis(ExperimentConfig cfg, const std::string& axis, double v) {
    if (axis == "beta") {
        cfg.strategy = compose_ri(cfg.strategy, v);
    } else if (axis == "local_iters") {
        cfg.hp.local_iters = static_cast<std::size_t>(v);
        cfg.hp.local_epochs.reset();
    } else if (axis == "lr") {
        cfg.hp.lr = v;
    } else if (axis == "dirichlet") {
        cfg.partition.dirichlet = v;
    } else if (axis == "active") {
        cfg.hp.active = static_cast<std::size_t>(v);
    } else {
        throw ConfigError("sweep.axis: unknown axis '" + axis + "'");
    }
    return cfg;
}

inline std::vector<SweepRow> run_sweep(const ExperimentConfig& cfg, std::size_t jobs,
                                       const std::filesystem::path& runs_dir = {}) {
    validate_config(cfg);
    const auto& values = cfg.sweep.values;
    const auto& seeds = cfg.sweep.seeds;
    std::vector<SweepRow> rows(values.size() * seeds.size());
    parallel_for(rows.size(), jobs, [&](std::size_t k) {
        const double v = values[k / seeds.size()];
        const std::uint64_t seed = seeds[k % seeds.size()];
        ExperimentConfig c = apply_axis(cfg, cfg.sweep.axis, v);
        c.hp.seed = seed;
        c.hp.validate(c.strategy);
        const Problem problem = build_problem(c, seed);
        const RunResult run = run_experiment(problem, c.strategy, c.hp);
        rows[k] = {v, seed, summarize(run.initial, run.records)};
        if (!runs_dir.empty()) {
            const std::string name = cfg.sweep.axis + "=" + detail::fmt(v) + "_seed=" + std::to_string(seed) + ".csv";
            write_file_atomic(runs_dir / name, rounds_csv(run.records, config_hash(c)));
        }
    });
    return rows;
}

inline constexpr const char* kSweepHeader =
    "axis,value,seed,final_divergence,average_divergence,final_train_loss,final_test_loss,final_test_acc,"
    "smoothed_max_test_acc,final_optimization_error";

/// sweep.csv: one row per (value, seed), then mean and std rows per value.
inline std::string sweep_csv(const ExperimentConfig& cfg, const std::vector<SweepRow>& rows) {
    std::ostringstream out;
    out << "# fedinit sweep schema_version=" << kSchemaVersion << " config_hash=" << hash_hex(config_hash(cfg)) << "\n"
        << kSweepHeader << "\n";
    auto fields = [](const RunSummary& s) {
        return std::vector<double>{s.final_divergence, s.average_divergence, s.final_train_loss, s.final_test_loss,
                                   s.final_test_acc,   s.smoothed_max_test_acc, s.final_optimization_error};
    };
    for (const auto& r : rows) {
        out << cfg.sweep.axis << ',' << detail::fmt(r.value) << ',' << r.seed;
        for (double f : fields(r.summary)) out << ',' << detail::fmt(f);
        out << '\n';
    }
    const std::size_t s = cfg.sweep.seeds.size();
    for (std::size_t vi = 0; vi < cfg.sweep.values.size(); ++vi) {
        std::vector<std::vector<double>> cols;
        for (std::size_t si = 0; si < s; ++si) cols.push_back(fields(rows[vi * s + si].summary));
        const std::size_t nf = cols.front().size();
        std::vector<double> mean(nf, 0.0), sd(nf, 0.0);
        for (std::size_t f = 0; f < nf; ++f) {
            for (const auto& c : cols) mean[f] += c[f];
            mean[f] /= static_cast<double>(s);
            if (s > 1) {
                for (const auto& c : cols) sd[f] += (c[f] - mean[f]) * (c[f] - mean[f]);
                sd[f] = std::sqrt(sd[f] / static_cast<double>(s - 1));
            }
        }
        for (auto [tag, vals] : {std::pair{"mean", &mean}, std::pair{"std", &sd}}) {
            out << cfg.sweep.axis << ',' << detail::fmt(cfg.sweep.values[vi]) << ',' << tag;
            for (double f : *vals) out << ',' << detail::fmt(f);
            out << '\n';
        }
    }
    return out.str();
}

inline int cmd_sweep(const ExperimentConfig& cfg, const CommandOptions& opts) {
    validate_config(cfg);
    const auto runs_dir = cfg.out_dir / "runs";
    std::filesystem::create_directories(runs_dir);
    const auto rows = run_sweep(cfg, opts.jobs, runs_dir);
    write_file_atomic(cfg.out_dir / "sweep.csv", sweep_csv(cfg, rows));
    *opts.log << rows.size() << " sweep runs written to " << cfg.out_dir.string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

inline json bound_report_json(const BoundReport& r) {
    json j = {{"theorem", r.theorem},
              {"lhs_name", r.lhs_name},
              {"rhs_form", r.rhs_form},
              {"refused", r.refused}};
    json checks = json::array();
    for (const auto& a : r.assumptions) checks.push_back({{"name", a.name}, {"ok", a.ok}, {"detail", a.detail}});
    j["assumptions"] = checks;
    if (r.refused) {
        j["refusal"] = r.refusal;
        return j;
    }
    const bool interp = r.theorem == 3 || r.theorem == 4 || r.theorem == 8;
    const char* key = interp ? "zeta" : "lambda";
    auto grid = [&](const std::vector<GridPoint>& g) {
        json arr = json::array();
        for (const auto& p : g)
            arr.push_back({{key, p.value}, {"rhs", p.rhs}, {"holds", p.holds}, {"slack", p.slack}});
        return arr;
    };
    j["lhs"] = r.lhs;
    j["D"] = r.D;
    j["divergence_T"] = r.divergence_T;
    j["grid"] = grid(r.grid);
    if (!r.grid_alt.empty()) {
        j["grid_gamma_squared"] = grid(r.grid_alt);
        j["holds_at_best_gamma_squared"] = r.holds_at_best_alt;
    }
    if (!r.divergence_term.empty()) j["divergence_term"] = r.divergence_term;
    j["best"] = {{key, r.best_value}, {"holds", r.holds_at_best}};
    const auto& k = r.constants;
    j["constants"] = {{"kappa_beta", k.kappa_beta}, {"kappa", k.kappa},   {"gamma_beta", k.gamma_beta},
                      {"c_beta", k.c_beta},         {"j_beta", k.j_beta}, {"r_beta", k.r_beta},
                      {"r_beta_gamma_squared", k.r_beta_gamma_sq}};
    return j;
}

struct VerifyOutcome {
    json report;
    bool all_hold = true;
};

inline VerifyOutcome verify_bounds(const ExperimentConfig& cfg, std::size_t jobs) {
    ExperimentConfig c = cfg;
    c.hp.theory_mode = true;
    validate_config(c);
    const Problem problem = build_problem(c, c.hp.seed);
    RunOptions ro;
    ro.jobs = jobs;
    const RunResult run = run_experiment(problem, c.strategy, c.hp, ro);

    const ProblemConstants pc = estimate_problem_constants(*problem.family, c.verify.sample_budget, problem.init, c.hp.seed);
    TheoryInputs in;
    in.D = pc.D;
    in.L = pc.L;
    in.mu = pc.mu;
    in.sigma_g = pc.sigma_g;
    in.b = pc.b;
    in.sigma_l = estimate_sigma_l(problem, c.hp.batch_size, c.verify.sigma_probes, c.verify.sigma_draws, c.hp.seed);
    in.a = estimate_local_interpolation(problem, c.hp.batch_size, c.verify.sigma_probes, c.hp.seed);

    VerifyOutcome out;
    out.report = detail::artifact_header(c);
    out.report["config"] = config_to_json(c);
    out.report["inputs"] = {{"L", in.L},
                            {"mu", in.mu},
                            {"sigma_l", in.sigma_l},
                            {"sigma_g", in.sigma_g},
                            {"a", in.a},
                            {"b", in.b},
                            {"D", in.D},
                            {"eta", c.hp.lr},
                            {"K", c.hp.local_iters ? json(*c.hp.local_iters) : json(nullptr)},
                            {"N", c.hp.active},
                            {"C", c.hp.clients},
                            {"T", c.hp.rounds},
                            {"beta", c.strategy.beta()}};
    json reports = json::array();
    for (int t : c.verify.theorems) {
        const BoundReport r = verify_convergence_bound(t, run.initial, run.records, in, c.hp, c.strategy.beta());
        if (!r.refused && !r.holds_at_best) out.all_hold = false;
        reports.push_back(bound_report_json(r));
    }
    out.report["theorems"] = reports;
    out.report["all_hold"] = out.all_hold;
    return out;
}

inline int cmd_verify_bounds(const ExperimentConfig& cfg, const CommandOptions& opts) {
    std::filesystem::create_directories(cfg.out_dir);
    const VerifyOutcome v = verify_bounds(cfg, opts.jobs);
    detail::write_json(cfg.out_dir / "bounds_report.json", v.report);
    for (const auto& r : v.report["theorems"]) {
        *opts.log << "theorem " << r["theorem"].get<int>() << ": ";
        if (r["refused"].get<bool>()) *opts.log << "refused (" << r["refusal"].get<std::string>() << ")\n";
        else *opts.log << (r["best"]["holds"].get<bool>() ? "holds" : "VIOLATED") << "\n";
    }
    return v.all_hold ? kExitOk : kExitCheckFailed;
}

// ---------------------------------------------------------------------------

/// Smoothness of the per-sample objective for linear models: λ_max(E[x̃x̃ᵀ])
/// with x̃ = (x, 1), times 1/4 for the logistic loss. NaN for MLPs.
inline double linear_model_smoothness(const Problem& problem) {
    const auto kind = problem.eval_model.kind;
    if (problem.family) return problem.family->smoothness();
    if (kind != ModelKind::logistic_regression && kind != ModelKind::linear_regression) return kNaN;
    double best = 0.0;
    for (const auto& cd : problem.clients) {
        const auto p = static_cast<Eigen::Index>(cd.shard.features + 1);
        Eigen::MatrixXd m = Eigen::MatrixXd::Zero(p, p);
        for (std::size_t j = 0; j < cd.shard.size(); ++j) {
            Eigen::VectorXd x(p);
            for (Eigen::Index f = 0; f + 1 < p; ++f) x(f) = cd.shard.row(j)[static_cast<std::size_t>(f)];
            x(p - 1) = 1.0;
            m += x * x.transpose();
        }
        m /= static_cast<double>(cd.shard.size());
        best = std::max(best, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff());
    }
    return kind == ModelKind::logistic_regression ? 0.25 * best : best;
}

inline StabilitySetup stability_setup(const ExperimentConfig& cfg) {
    StabilitySetup s;
    s.strategy = cfg.strategy;
    s.hp = cfg.hp;
    s.make_problem = [cfg](std::uint64_t seed) { return build_problem(cfg, seed); };
    const std::size_t target_client = cfg.stability.client;
    const auto& p = cfg.problem;
    if (p.type == ProblemType::quadratic) {
        s.replacement = [cfg, target_client](std::uint64_t seed) {
            const Problem prob = build_problem(cfg, seed);
            const auto& b = prob.family->center(std::min(target_client, prob.clients.size() - 1));
            Rng rng = make_rng(seed, Stream::perturb);
            std::normal_distribution<double> normal(0.0, 1.0);
            std::vector<double> x(static_cast<std::size_t>(b.size()));
            for (std::size_t f = 0; f < x.size(); ++f) x[f] = b(static_cast<Eigen::Index>(f)) + cfg.problem.noise * normal(rng);
            return std::pair{x, 0.0};
        };
        s.probe = [cfg](std::uint64_t seed) {
            const Problem prob = build_problem(cfg, seed);
            Dataset pooled;
            pooled.features = prob.dim();
            for (const auto& cd : prob.clients)
                for (std::size_t j = 0; j < cd.shard.size(); ++j) pooled.push_back(cd.shard.row(j), 0.0);
            return pooled;
        };
        return s;
    }
    s.replacement = [cfg, target_client](std::uint64_t seed) {
        const Problem prob = build_problem(cfg, seed);
        const std::size_t client = std::min(target_client, prob.clients.size() - 1);
        const auto& shard = prob.clients[client].shard;
        Rng rng = make_rng(seed, Stream::perturb);
        std::vector<double> x;
        double y = 0.0;
        if (cfg.problem.type == ProblemType::classification) {
            // Fresh draw of the replaced sample's class, with the same shifts the training data saw.
            const std::size_t row = std::min(cfg.stability.sample, shard.size() - 1);
            y = shard.y[row];
            const BlobGenerator gen(cfg.problem.classes, cfg.problem.features, cfg.problem.separation, seed);
            Dataset one;
            one.features = cfg.problem.features;
            one.classes = cfg.problem.classes;
            one.push_back(gen.sample(rng, static_cast<std::size_t>(y)), y);
            one = apply_category_bias(one, cfg.partition.category_shift_sigma, seed);
            x.assign(one.row(0).begin(), one.row(0).end());
        } else {
            const Dataset& pool = *prob.test;
            std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
            const std::size_t j = pick(rng);
            x.assign(pool.row(j).begin(), pool.row(j).end());
            y = pool.y[j];
        }
        const auto scale =
            client_scale_vector(x.size(), cfg.partition.client_scale_sigma, seed, client);
        for (std::size_t f = 0; f < x.size(); ++f) x[f] *= scale[f];
        return std::pair{x, y};
    };
    s.probe = [cfg](std::uint64_t seed) {
        Problem prob = build_problem(cfg, seed);
        if (!prob.test) throw ConfigError("problem.test_fraction: stability needs a held-out probe set (> 0)");
        return *prob.test;
    };
    return s;
}

inline json stability_report(const ExperimentConfig& cfg, const std::vector<StabilityTrace>& traces,
                             double smoothness) {
    json j = detail::artifact_header(cfg);
    j["config"] = config_to_json(cfg);
    j["primary_statistic"] = "final_delta";
    json runs = json::array();
    for (const auto& t : traces)
        runs.push_back({{"beta", t.beta},
                        {"seed", t.seed},
                        {"K", t.K},
                        {"c", t.c},
                        {"t0", t.t0 ? json(*t.t0) : json(nullptr)},
                        {"delta", t.delta},
                        {"final_delta", t.final_delta},
                        {"final_param_distance", t.final_param_distance},
                        {"loss_gap", t.loss_gap},
                        {"U", t.U},
                        {"global_trajectories_identical", t.trajectories_identical}});
    j["runs"] = runs;
    json per_beta = json::array();
    std::vector<double> means;
    const std::size_t s = cfg.stability.seeds.size();
    for (std::size_t bi = 0; bi < cfg.stability.betas.size(); ++bi) {
        double d = 0, g = 0, pd = 0;
        for (std::size_t si = 0; si < s; ++si) {
            const auto& t = traces[bi * s + si];
            d += t.final_delta;
            g += t.loss_gap;
            pd += t.final_param_distance;
        }
        d /= static_cast<double>(s);
        g /= static_cast<double>(s);
        pd /= static_cast<double>(s);
        means.push_back(d);
        const double beta = cfg.stability.betas[bi];
        const double K = static_cast<double>(cfg.hp.local_iters.value_or(0));
        const double factor = std::isfinite(smoothness)
                                  ? std::pow(1.0 / (1.0 + 2.0 * beta), 1.0 / (1.0 + cfg.hp.lr_c * K * smoothness))
                                  : kNaN;
        per_beta.push_back({{"beta", beta},
                            {"mean_final_delta", d},
                            {"mean_loss_gap", g},
                            {"mean_final_param_distance", pd},
                            {"theory_factor", factor}});
    }
    j["per_beta"] = per_beta;
    j["L"] = smoothness;
    bool monotone = true;
    for (std::size_t i = 1; i < means.size(); ++i)
        if (means[i] > means[i - 1]) monotone = false;
    j["mean_final_delta_non_increasing"] = monotone;
    return j;
}

inline int cmd_stability(const ExperimentConfig& cfg, const CommandOptions& opts) {
    validate_config(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    const StabilitySetup setup = stability_setup(cfg);
    const Perturbation perturb{cfg.stability.client, cfg.stability.sample, cfg.stability.perturb};
    const auto traces = stability_experiment(setup, perturb, cfg.stability.betas, cfg.stability.seeds, opts.jobs);
    const double L = linear_model_smoothness(build_problem(cfg, cfg.stability.seeds.front()));
    const json report = stability_report(cfg, traces, L);
    detail::write_json(cfg.out_dir / "stability_report.json", report);
    for (const auto& b : report["per_beta"])
        *opts.log << "beta=" << b["beta"].get<double>() << " mean final delta=" << b["mean_final_delta"].get<double>()
                  << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------

inline json partition_report(const ExperimentConfig& cfg) {
    validate_config(cfg);
    const LabeledSetup s = build_labeled(cfg, cfg.hp.seed);
    const auto labels = labels_of(s.train);
    std::size_t classes = s.train.classes;
    for (int y : labels) classes = std::max(classes, static_cast<std::size_t>(y) + 1);
    const auto hist = label_histograms(s.plan, labels, classes);
    json clients = json::array();
    std::vector<double> shares, tvs;
    std::size_t near_uniform = 0;
    for (std::size_t c = 0; c < hist.size(); ++c) {
        const double share = max_label_share(hist[c]);
        const double tv = tv_to_uniform(hist[c]);
        shares.push_back(share);
        tvs.push_back(tv);
        if (tv <= 0.05) ++near_uniform;
        clients.push_back({{"client", c},
                           {"size", s.plan.assignment[c].size()},
                           {"histogram", hist[c]},
                           {"max_label_share", share},
                           {"tv_to_uniform", tv}});
    }
    json j = detail::artifact_header(cfg);
    j["config"] = config_to_json(cfg);
    j["clients"] = clients;
    double mean_tv = 0.0;
    for (double t : tvs) mean_tv += t;
    mean_tv /= static_cast<double>(tvs.size());
    j["statistics"] = {{"classes", classes},
                       {"train_samples", s.train.size()},
                       {"median_max_label_share", median(shares)},
                       {"mean_tv_to_uniform", mean_tv},
                       {"median_tv_to_uniform", median(tvs)},
                       {"fraction_tv_at_most_0.05",
                        static_cast<double>(near_uniform) / static_cast<double>(hist.size())}};
    return j;
}

inline int cmd_partition_report(const ExperimentConfig& cfg, const CommandOptions& opts) {
    const json j = partition_report(cfg);
    std::filesystem::create_directories(cfg.out_dir);
    detail::write_json(cfg.out_dir / "partition_report.json", j);
    *opts.log << "median max-label share " << j["statistics"]["median_max_label_share"].get<double>() << "\n";
    return kExitOk;
}

inline int dispatch(const ExperimentConfig& cfg, const CommandOptions& opts) {
    switch (cfg.mode) {
    case Mode::run: return cmd_run(cfg, opts);
    case Mode::sweep: return cmd_sweep(cfg, opts);
    case Mode::verify_bounds: return cmd_verify_bounds(cfg, opts);
    case Mode::stability: return cmd_stability(cfg, opts);
    case Mode::partition_report: return cmd_partition_report(cfg, opts);
    }
    return kExitConfig;
}

} // namespace fedinit
