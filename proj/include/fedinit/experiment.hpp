#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedinit/checkpoint.hpp"
#include "fedinit/dataset.hpp"
#include "fedinit/federation.hpp"
#include "fedinit/metrics.hpp"

namespace fedinit {

struct RunOptions {
    std::size_t jobs = 1;
    std::size_t checkpoint_every = 0; // 0 = never
    std::filesystem::path checkpoint_path;
    std::optional<std::filesystem::path> resume_from;
    std::optional<std::size_t> stop_after; // simulate an interruption after this round
    std::uint64_t config_hash = 0;
};

struct RunResult {
    RoundRecord initial;
    std::vector<RoundRecord> records;
    ServerState server;
    std::vector<ClientState> clients;
    bool completed = false;
};

inline Checkpoint make_checkpoint(const RunResult& r, std::uint64_t hash) {
    return Checkpoint{hash, r.server, r.clients, r.initial, r.records};
}

/// Runs hp.rounds rounds (or resumes from a checkpoint and finishes them).
inline RunResult run_experiment(const Problem& problem, const StrategySpec& strategy, const HyperParams& hp,
                                const RunOptions& opts = {}) {
    hp.validate(strategy);
    require(problem.clients.size() == hp.clients, "problem has " + std::to_string(problem.clients.size()) +
                                                      " clients but C=" + std::to_string(hp.clients));
    for (std::size_t i = 0; i < problem.clients.size(); ++i)
        require(problem.clients[i].shard.size() > 0, "client " + std::to_string(i) + " has an empty shard");

    RunResult run;
    if (opts.resume_from) {
        Checkpoint ck = load_checkpoint(*opts.resume_from);
        if (ck.config_hash != opts.config_hash)
            throw ConfigError("checkpoint was written by a different configuration (hash mismatch); refusing to resume");
        require(ck.clients.size() == hp.clients, "checkpoint client count does not match the configuration");
        run.server = std::move(ck.server);
        run.clients = std::move(ck.clients);
        run.initial = std::move(ck.initial);
        run.records = std::move(ck.records);
    } else {
        run.server = make_server_state(problem.init, strategy, hp.seed);
        for (std::size_t i = 0; i < hp.clients; ++i)
            run.clients.push_back(make_client_state(i, problem.init, strategy, hp.seed));
        run.initial = evaluate(problem, run.clients, run.server.global);
        run.initial.round = 0;
        run.initial.beta = strategy.beta();
    }

    while (run.server.round < hp.rounds) {
        run.records.push_back(run_round(run.server, run.clients, strategy, hp, problem, opts.jobs));
        const std::size_t t = run.server.round;
        if (opts.checkpoint_every > 0 && t % opts.checkpoint_every == 0 && !opts.checkpoint_path.empty())
            save_checkpoint(make_checkpoint(run, opts.config_hash), opts.checkpoint_path);
        if (opts.stop_after && t >= *opts.stop_after && t < hp.rounds) return run;
    }
    run.completed = true;
    return run;
}

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kRoundsHeader =
    "round,divergence,grad_norm_sq,train_loss,test_loss,train_acc,test_acc,bytes_up,bytes_down,lr";

/// rounds.csv: one provenance comment line, the header, one row per round.
inline std::string rounds_csv(const std::vector<RoundRecord>& records, std::uint64_t config_hash) {
    std::ostringstream out;
    out << "# fedinit rounds schema_version=" << kSchemaVersion << " config_hash=" << std::hex << config_hash
        << std::dec << '\n';
    out << kRoundsHeader << '\n';
    for (const auto& r : records) {
        out << r.round << ',' << detail::format_double(r.divergence) << ',' << detail::format_double(r.grad_norm_sq)
            << ',' << detail::format_double(r.train_loss) << ',' << detail::format_double(r.test_loss) << ','
            << detail::format_double(r.train_acc) << ',' << detail::format_double(r.test_acc) << ',' << r.bytes_up
            << ',' << r.bytes_down << ',' << detail::format_double(r.lr) << '\n';
    }
    return out.str();
}

/// Run-level statistics reported in summary.json.
struct RunSummary {
    std::size_t rounds = 0;
    double final_divergence = 0.0;
    double average_divergence = 0.0;   // (1/T) Σ_{t<T} Δ^t
    double average_grad_norm_sq = 0.0; // (1/T) Σ_{t<T} ‖∇f(w^t)‖²
    double final_train_loss = 0.0;
    double final_test_loss = std::numeric_limits<double>::quiet_NaN();
    double final_test_acc = std::numeric_limits<double>::quiet_NaN();
    double smoothed_max_test_acc = std::numeric_limits<double>::quiet_NaN();
    double final_optimization_error = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t total_bytes_up = 0;
    std::uint64_t total_bytes_down = 0;
};

/// Records for rounds 0..T−1 (initial state first), as used by averaged bounds.
inline std::vector<RoundRecord> leading_records(const RoundRecord& initial, const std::vector<RoundRecord>& records) {
    std::vector<RoundRecord> out{initial};
    if (!records.empty()) out.insert(out.end(), records.begin(), records.end() - 1);
    return out;
}

inline RunSummary summarize(const RoundRecord& initial, const std::vector<RoundRecord>& records) {
    RunSummary s;
    s.rounds = records.size();
    const RoundRecord& last = records.empty() ? initial : records.back();
    s.final_divergence = last.divergence;
    s.final_train_loss = last.train_loss;
    s.final_test_loss = last.test_loss;
    s.final_test_acc = last.test_acc;
    s.final_optimization_error = last.optimization_error;
    if (!records.empty()) {
        const auto lead = leading_records(initial, records);
        for (const auto& r : lead) {
            s.average_divergence += r.divergence;
            s.average_grad_norm_sq += r.grad_norm_sq;
        }
        s.average_divergence /= static_cast<double>(lead.size());
        s.average_grad_norm_sq /= static_cast<double>(lead.size());
        std::vector<double> acc;
        for (const auto& r : records) acc.push_back(r.test_acc);
        s.smoothed_max_test_acc = smoothed_max_last(acc);
        for (const auto& r : records) {
            s.total_bytes_up += r.bytes_up;
            s.total_bytes_down += r.bytes_down;
        }
    } else {
        s.average_divergence = initial.divergence;
        s.average_grad_norm_sq = initial.grad_norm_sq;
        s.smoothed_max_test_acc = initial.test_acc;
    }
    return s;
}

} // namespace fedinit
