#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedinit/datagen.hpp"
#include "fedinit/errors.hpp"
#include "fedinit/federation.hpp"
#include "fedinit/models.hpp"
#include "fedinit/quadratic.hpp"
#include "fedinit/strategy.hpp"

namespace fedinit {

using json = nlohmann::ordered_json;

enum class Mode { run, sweep, verify_bounds, stability, partition_report };

inline const char* to_string(Mode m) {
    switch (m) {
    case Mode::run: return "run";
    case Mode::sweep: return "sweep";
    case Mode::verify_bounds: return "verify-bounds";
    case Mode::stability: return "stability";
    case Mode::partition_report: return "partition-report";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    for (Mode m : {Mode::run, Mode::sweep, Mode::verify_bounds, Mode::stability, Mode::partition_report})
        if (s == to_string(m)) return m;
    throw ConfigError("mode: unknown value '" + s + "' (valid: run, sweep, verify-bounds, stability, partition-report)");
}

enum class ProblemType { quadratic, classification, csv };

struct ProblemConfig {
    ProblemType type = ProblemType::quadratic;
    // quadratic
    std::size_t dim = 10;
    double spread = 1.0;
    double condition = 10.0;
    bool shared_curvature = false;
    std::size_t samples_per_client = 20;
    double noise = 0.0;
    // classification / csv
    std::string model = "mlp";
    std::size_t classes = 10;
    std::size_t samples_per_class = 100;
    std::size_t features = 20;
    double separation = 4.0;
    std::vector<std::size_t> hidden{32};
    std::string path;
    double test_fraction = 0.2;
    double init_scale = 1.0;
};

struct PartitionConfig {
    double dirichlet = 0.6;
    bool with_replacement = false;
    double client_scale_sigma = 0.0;
    double category_shift_sigma = 0.0;
};

struct SweepConfig {
    std::string axis = "beta";
    std::vector<double> values;
    std::vector<std::uint64_t> seeds{0};
};

struct VerifyConfig {
    std::vector<int> theorems{1, 2, 3, 4, 7, 8};
    std::size_t sample_budget = 64;
    std::size_t sigma_probes = 4;
    std::size_t sigma_draws = 1000;
};

struct StabilityConfig {
    std::size_t client = 0;
    std::size_t sample = 0;
    bool perturb = true;
    std::vector<double> betas{0.0, 0.05, 0.1};
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
};

struct ExperimentConfig {
    Mode mode = Mode::run;
    ProblemConfig problem;
    PartitionConfig partition;
    std::string strategy_name = "FedInit";
    StrategySpec strategy = make_strategy("FedInit");
    HyperParams hp;
    std::filesystem::path out_dir = "out";
    std::size_t checkpoint_every = 0;
    SweepConfig sweep;
    VerifyConfig verify;
    StabilityConfig stability;
};

namespace detail {

/// Typed, key-checked view of one JSON object.
class Section {
public:
    Section(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
        if (!obj_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <class T>
    void get(const std::string& key, T& out) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return;
        try {
            if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
                if (!it->is_number_integer() || it->template get<long long>() < 0)
                    throw ConfigError(name(key) + ": expected a non-negative integer");
            } else if constexpr (std::is_same_v<T, double>) {
                if (!it->is_number()) throw ConfigError(name(key) + ": expected a number");
            } else if constexpr (std::is_same_v<T, bool>) {
                if (!it->is_boolean()) throw ConfigError(name(key) + ": expected true or false");
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string()) throw ConfigError(name(key) + ": expected a string");
            }
            out = it->template get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(name(key) + ": type mismatch");
        }
    }

    template <class T>
    void get_optional(const std::string& key, std::optional<T>& out) {
        seen_.insert(key);
        if (obj_.contains(key) && !obj_.at(key).is_null()) {
            T v{};
            get(key, v);
            out = v;
        }
    }

    bool has(const std::string& key) const { return obj_.contains(key); }

    std::optional<Section> child(const std::string& key) {
        seen_.insert(key);
        auto it = obj_.find(key);
        if (it == obj_.end()) return std::nullopt;
        return Section(*it, name(key));
    }

    void finish() const {
        for (auto it = obj_.begin(); it != obj_.end(); ++it)
            if (!seen_.count(it.key())) throw ConfigError(name(it.key()) + ": unknown key");
    }

    std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

private:
    const json& obj_;
    std::string path_;
    std::set<std::string> seen_;
};

inline void check(bool ok, const std::string& key, const std::string& constraint) {
    if (!ok) throw ConfigError(key + ": " + constraint);
}

} // namespace detail

/// Parses and validates a configuration, filling defaults. `mode` comes from
/// the subcommand; a "mode" key in the file must agree with it.
inline ExperimentConfig parse_config(const json& root, Mode mode) {
    ExperimentConfig cfg;
    cfg.mode = mode;
    detail::Section top(root, "");
    if (top.has("mode")) {
        std::string m;
        top.get("mode", m);
        if (parse_mode(m) != mode)
            throw ConfigError(std::string("mode: config says '") + m + "' but the subcommand is '" + to_string(mode) + "'");
    } else {
        std::string ignore;
        top.get("mode", ignore);
    }
    top.get("seed", cfg.hp.seed);

    auto& p = cfg.problem;
    if (auto s = top.child("problem")) {
        std::string type = "quadratic";
        s->get("type", type);
        if (type == "quadratic") p.type = ProblemType::quadratic;
        else if (type == "classification") p.type = ProblemType::classification;
        else if (type == "csv") p.type = ProblemType::csv;
        else throw ConfigError("problem.type: unknown value '" + type + "' (valid: quadratic, classification, csv)");
        s->get("dim", p.dim);
        s->get("spread", p.spread);
        s->get("condition", p.condition);
        s->get("shared_curvature", p.shared_curvature);
        s->get("samples_per_client", p.samples_per_client);
        s->get("noise", p.noise);
        s->get("model", p.model);
        s->get("classes", p.classes);
        s->get("samples_per_class", p.samples_per_class);
        s->get("features", p.features);
        s->get("separation", p.separation);
        s->get("hidden", p.hidden);
        s->get("path", p.path);
        s->get("test_fraction", p.test_fraction);
        s->get("init_scale", p.init_scale);
        s->finish();
    } else {
        throw ConfigError("problem: required section missing");
    }

    auto& q = cfg.partition;
    if (auto s = top.child("partition")) {
        s->get("dirichlet", q.dirichlet);
        s->get("with_replacement", q.with_replacement);
        s->get("client_scale_sigma", q.client_scale_sigma);
        s->get("category_shift_sigma", q.category_shift_sigma);
        s->finish();
    }

    double beta = 0.1;
    bool relaxed_init = false;
    std::optional<double> server_lr;
    StrategySpec extra;
    if (auto s = top.child("strategy")) {
        s->get("name", cfg.strategy_name);
        s->get("beta", beta);
        s->get("relaxed_init", relaxed_init);
        s->get_optional("server_lr", server_lr);
        s->get("adam_beta1", extra.adam_beta1);
        s->get("adam_beta2", extra.adam_beta2);
        s->get("adam_tau", extra.adam_tau);
        s->get("sam_rho", extra.sam_rho);
        s->get("dyn_alpha", extra.dyn_alpha);
        s->get("cm_alpha", extra.cm_alpha);
        s->finish();
    }
    cfg.strategy = make_strategy(cfg.strategy_name, beta);
    if (relaxed_init) cfg.strategy = compose_ri(cfg.strategy, beta);
    cfg.strategy.adam_beta1 = extra.adam_beta1;
    cfg.strategy.adam_beta2 = extra.adam_beta2;
    cfg.strategy.adam_tau = extra.adam_tau;
    cfg.strategy.sam_rho = extra.sam_rho;
    cfg.strategy.dyn_alpha = extra.dyn_alpha;
    cfg.strategy.cm_alpha = extra.cm_alpha;
    cfg.strategy.server_lr = server_lr.value_or(0.1);

    auto& hp = cfg.hp;
    std::optional<double> lr_decay;
    if (auto s = top.child("train")) {
        s->get("rounds", hp.rounds);
        s->get("clients", hp.clients);
        s->get("active", hp.active);
        s->get_optional("local_iters", hp.local_iters);
        s->get_optional("local_epochs", hp.local_epochs);
        s->get("lr", hp.lr);
        s->get_optional("lr_decay", lr_decay);
        std::string schedule = "exponential";
        s->get("schedule", schedule);
        if (schedule == "exponential") hp.schedule = LrSchedule::exponential;
        else if (schedule == "inverse_time") hp.schedule = LrSchedule::inverse_time;
        else throw ConfigError("train.schedule: unknown value '" + schedule + "' (valid: exponential, inverse_time)");
        s->get("lr_c", hp.lr_c);
        s->get("batch_size", hp.batch_size);
        s->get("weighted_aggregation", hp.weighted_aggregation);
        s->get("allow_negative_beta", hp.allow_negative_beta);
        s->finish();
    } else {
        throw ConfigError("train: required section missing");
    }
    hp.lr_decay = lr_decay.value_or(cfg.strategy.kind == StrategyKind::feddyn ? 0.9995 : 0.998);
    if (!hp.local_iters && !hp.local_epochs) hp.local_iters = 5;

    if (auto s = top.child("output")) {
        std::string dir = cfg.out_dir.string();
        s->get("dir", dir);
        cfg.out_dir = dir;
        s->get("checkpoint_every", cfg.checkpoint_every);
        s->finish();
    }
    if (auto s = top.child("sweep")) {
        s->get("axis", cfg.sweep.axis);
        s->get("values", cfg.sweep.values);
        s->get("seeds", cfg.sweep.seeds);
        s->finish();
    }
    if (auto s = top.child("verify")) {
        s->get("theorems", cfg.verify.theorems);
        s->get("sample_budget", cfg.verify.sample_budget);
        s->get("sigma_probes", cfg.verify.sigma_probes);
        s->get("sigma_draws", cfg.verify.sigma_draws);
        s->finish();
    }
    if (auto s = top.child("stability")) {
        s->get("client", cfg.stability.client);
        s->get("sample", cfg.stability.sample);
        s->get("perturb", cfg.stability.perturb);
        s->get("betas", cfg.stability.betas);
        s->get("seeds", cfg.stability.seeds);
        s->finish();
    }
    top.finish();
    return cfg;
}

/// Validation that does not depend on overrides being applied first.
inline void validate_config(const ExperimentConfig& cfg) {
    using detail::check;
    const auto& p = cfg.problem;
    const auto& hp = cfg.hp;
    check(hp.rounds >= 1, "train.rounds", "must be >= 1");
    check(hp.clients >= 1, "train.clients", "must be >= 1");
    check(hp.active >= 1 && hp.active <= hp.clients, "train.active",
          "N=" + std::to_string(hp.active) + " must satisfy 1 <= N <= C=" + std::to_string(hp.clients));
    check(!(hp.local_iters && hp.local_epochs), "train.local_iters/local_epochs", "set exactly one, not both");
    check(cfg.partition.dirichlet > 0.0, "partition.dirichlet", "must be > 0");
    check(cfg.partition.client_scale_sigma >= 0.0, "partition.client_scale_sigma", "must be >= 0");
    check(cfg.partition.category_shift_sigma >= 0.0, "partition.category_shift_sigma", "must be >= 0");
    check(p.test_fraction >= 0.0 && p.test_fraction < 1.0, "problem.test_fraction", "must be in [0, 1)");
    if (p.type == ProblemType::quadratic) {
        check(p.dim >= 1, "problem.dim", "must be >= 1");
        check(p.condition >= 1.0, "problem.condition", "must be >= 1");
        check(p.spread >= 0.0, "problem.spread", "must be >= 0");
        check(p.samples_per_client >= 1, "problem.samples_per_client", "must be >= 1");
        check(p.noise >= 0.0, "problem.noise", "must be >= 0");
    } else {
        ModelKind kind;
        try {
            kind = parse_model_kind(p.model);
        } catch (const ConfigError& e) {
            throw ConfigError(std::string("problem.model: ") + e.what());
        }
        check(kind != ModelKind::quadratic, "problem.model", "quadratic models need problem.type=quadratic");
        if (p.type == ProblemType::classification) {
            check(p.classes >= 2, "problem.classes", "must be >= 2");
            check(p.features >= 1, "problem.features", "must be >= 1");
            check(p.samples_per_class >= 1, "problem.samples_per_class", "must be >= 1");
            check(kind != ModelKind::logistic_regression || p.classes == 2, "problem.model",
                  "logistic-regression needs classes=2");
            check(kind != ModelKind::linear_regression, "problem.model", "classification problems need a classifier");
        } else {
            check(!p.path.empty(), "problem.path", "required for csv problems");
        }
    }
    hp.validate(cfg.strategy);
    if (cfg.mode == Mode::sweep) {
        check(!cfg.sweep.values.empty(), "sweep.values", "must not be empty");
        check(!cfg.sweep.seeds.empty(), "sweep.seeds", "must not be empty");
        const auto& a = cfg.sweep.axis;
        check(a == "beta" || a == "local_iters" || a == "lr" || a == "dirichlet" || a == "active", "sweep.axis",
              "unknown axis '" + a + "' (valid: beta, local_iters, lr, dirichlet, active)");
        for (double v : cfg.sweep.values) {
            if (a == "beta" && !hp.allow_negative_beta)
                check(v >= 0.0, "sweep.values", "negative beta needs --allow-negative-beta");
            if (a == "local_iters" || a == "active")
                check(v >= 1.0 && v == static_cast<double>(static_cast<std::size_t>(v)), "sweep.values",
                      a + " values must be positive integers");
            if (a == "lr" || a == "dirichlet") check(v > 0.0, "sweep.values", a + " values must be > 0");
        }
    }
    if (cfg.mode == Mode::verify_bounds)
        check(p.type == ProblemType::quadratic, "problem.type", "verify-bounds needs a quadratic family");
    if (cfg.mode == Mode::stability) {
        check(hp.schedule == LrSchedule::inverse_time, "train.schedule",
              "stability runs require inverse_time (eta_t = c/t)");
        check(!cfg.stability.betas.empty(), "stability.betas", "must not be empty");
        check(!cfg.stability.seeds.empty(), "stability.seeds", "must not be empty");
    }
    if (cfg.mode == Mode::partition_report)
        check(p.type != ProblemType::quadratic, "problem.type", "partition-report needs labeled data");
}

/// The effective configuration, every default included.
inline json config_to_json(const ExperimentConfig& cfg) {
    const auto& p = cfg.problem;
    const auto& hp = cfg.hp;
    const char* type = p.type == ProblemType::quadratic ? "quadratic"
                       : p.type == ProblemType::classification ? "classification" : "csv";
    json problem = {{"type", type}};
    if (p.type == ProblemType::quadratic) {
        problem["dim"] = p.dim;
        problem["spread"] = p.spread;
        problem["condition"] = p.condition;
        problem["shared_curvature"] = p.shared_curvature;
        problem["samples_per_client"] = p.samples_per_client;
        problem["noise"] = p.noise;
    } else {
        problem["model"] = p.model;
        if (parse_model_kind(p.model) == ModelKind::mlp) problem["hidden"] = p.hidden;
        if (p.type == ProblemType::classification) {
            problem["classes"] = p.classes;
            problem["samples_per_class"] = p.samples_per_class;
            problem["features"] = p.features;
            problem["separation"] = p.separation;
        } else {
            problem["path"] = p.path;
        }
        problem["test_fraction"] = p.test_fraction;
        problem["init_scale"] = p.init_scale;
    }
    const auto& s = cfg.strategy;
    json strategy = {{"name", cfg.strategy_name},
                     {"beta", s.beta()},
                     {"relaxed_init", s.ri_enabled},
                     {"server_lr", s.server_lr},
                     {"adam_beta1", s.adam_beta1},
                     {"adam_beta2", s.adam_beta2},
                     {"adam_tau", s.adam_tau},
                     {"sam_rho", s.sam_rho},
                     {"dyn_alpha", s.dyn_alpha},
                     {"cm_alpha", s.cm_alpha}};
    json train = {{"rounds", hp.rounds}, {"clients", hp.clients}, {"active", hp.active}};
    if (hp.local_iters) train["local_iters"] = *hp.local_iters;
    if (hp.local_epochs) train["local_epochs"] = *hp.local_epochs;
    train["lr"] = hp.lr;
    train["lr_decay"] = hp.lr_decay;
    train["schedule"] = hp.schedule == LrSchedule::exponential ? "exponential" : "inverse_time";
    train["lr_c"] = hp.lr_c;
    train["batch_size"] = hp.batch_size;
    train["weighted_aggregation"] = hp.weighted_aggregation;
    train["allow_negative_beta"] = hp.allow_negative_beta;
    json out = {{"mode", to_string(cfg.mode)},
                {"seed", hp.seed},
                {"problem", problem},
                {"partition",
                 {{"dirichlet", cfg.partition.dirichlet},
                  {"with_replacement", cfg.partition.with_replacement},
                  {"client_scale_sigma", cfg.partition.client_scale_sigma},
                  {"category_shift_sigma", cfg.partition.category_shift_sigma}}},
                {"strategy", strategy},
                {"train", train},
                {"output", {{"dir", cfg.out_dir.string()}, {"checkpoint_every", cfg.checkpoint_every}}}};
    if (cfg.mode == Mode::sweep)
        out["sweep"] = {{"axis", cfg.sweep.axis}, {"values", cfg.sweep.values}, {"seeds", cfg.sweep.seeds}};
    if (cfg.mode == Mode::verify_bounds)
        out["verify"] = {{"theorems", cfg.verify.theorems},
                         {"sample_budget", cfg.verify.sample_budget},
                         {"sigma_probes", cfg.verify.sigma_probes},
                         {"sigma_draws", cfg.verify.sigma_draws}};
    if (cfg.mode == Mode::stability)
        out["stability"] = {{"client", cfg.stability.client},
                            {"sample", cfg.stability.sample},
                            {"perturb", cfg.stability.perturb},
                            {"betas", cfg.stability.betas},
                            {"seeds", cfg.stability.seeds}};
    return out;
}

inline std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// Hash of everything that determines outputs. The output location is excluded.
inline std::uint64_t config_hash(const ExperimentConfig& cfg) {
    json j = config_to_json(cfg);
    j.erase("output");
    j["checkpoint_every"] = cfg.checkpoint_every;
    return fnv1a(j.dump());
}

inline std::string hash_hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

inline json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    try {
        return json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Problem construction.

/// Labeled data after the category shift and the train/test split, together
/// with the client partition of the training rows.
struct LabeledSetup {
    Dataset train;
    Dataset test;
    PartitionPlan plan;
    std::vector<Dataset> shards;
    ModelSpec model;
};

inline ModelSpec classifier_model(const ProblemConfig& p, std::size_t features, std::size_t classes) {
    const ModelKind kind = parse_model_kind(p.model);
    switch (kind) {
    case ModelKind::logistic_regression: return ModelSpec::logistic_regression(features);
    case ModelKind::linear_regression: return ModelSpec::linear_regression(features);
    case ModelKind::mlp: {
        std::vector<std::size_t> sizes{features};
        sizes.insert(sizes.end(), p.hidden.begin(), p.hidden.end());
        sizes.push_back(classes);
        return ModelSpec::mlp(sizes);
    }
    default: throw ConfigError("problem.model: '" + p.model + "' is not available for labeled data");
    }
}

inline Dataset labeled_source(const ProblemConfig& p, std::uint64_t seed) {
    if (p.type == ProblemType::csv) return load_csv(p.path);
    return gen_classification(p.classes, p.samples_per_class, p.features, p.separation, seed);
}

inline LabeledSetup build_labeled(const ExperimentConfig& cfg, std::uint64_t seed, std::optional<double> dirichlet = {}) {
    const auto& p = cfg.problem;
    const auto& q = cfg.partition;
    Dataset all = apply_category_bias(labeled_source(p, seed), q.category_shift_sigma, seed);
    auto split = split_train_test(all, p.test_fraction, seed);
    LabeledSetup s;
    s.train = std::move(split.train);
    s.test = std::move(split.test);
    s.plan = dirichlet_partition(labels_of(s.train), cfg.hp.clients, dirichlet.value_or(q.dirichlet), seed,
                                 q.with_replacement);
    s.shards = apply_client_bias(s.train, s.plan, q.client_scale_sigma, seed);
    const std::size_t classes = std::max<std::size_t>(all.classes, 2);
    s.model = classifier_model(p, all.features, classes);
    if (s.model.kind == ModelKind::logistic_regression)
        for (double y : all.y)
            if (y != 0.0 && y != 1.0) throw ConfigError("problem.model: logistic-regression needs labels in {0, 1}");
    return s;
}

inline Problem build_problem(const ExperimentConfig& cfg, std::uint64_t seed, std::optional<double> dirichlet = {}) {
    const auto& p = cfg.problem;
    Problem prob;
    if (p.type == ProblemType::quadratic) {
        QuadraticFamily family =
            gen_quadratic_clients(cfg.hp.clients, p.dim, p.spread, p.condition, seed, p.shared_curvature);
        for (std::size_t i = 0; i < cfg.hp.clients; ++i) {
            Rng rng = make_rng(seed, Stream::data, i);
            prob.clients.push_back({ModelSpec::quadratic(p.dim, family.curvature_row_major(i)),
                                    quadratic_client_data(family, i, p.samples_per_client, p.noise, rng)});
        }
        prob.eval_model = prob.clients.front().model;
        prob.family = std::move(family);
        prob.init = ParamVector(p.dim);
        return prob;
    }
    LabeledSetup s = build_labeled(cfg, seed, dirichlet);
    for (auto& shard : s.shards) prob.clients.push_back({s.model, std::move(shard)});
    prob.eval_model = s.model;
    if (s.test.size() > 0) prob.test = std::move(s.test);
    Rng rng = make_rng(seed, Stream::init);
    prob.init = initial_params(s.model, rng, p.init_scale);
    return prob;
}

} // namespace fedinit
