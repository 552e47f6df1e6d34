#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedinit/dataset.hpp"
#include "fedinit/errors.hpp"
#include "fedinit/metrics.hpp"
#include "fedinit/models.hpp"
#include "fedinit/parallel.hpp"
#include "fedinit/param_vector.hpp"
#include "fedinit/quadratic.hpp"
#include "fedinit/rng.hpp"
#include "fedinit/strategy.hpp"

namespace fedinit {

enum class LrSchedule { exponential, inverse_time };

/// Round-loop hyperparameters. Exactly one of local_iters / local_epochs is set.
struct HyperParams {
    std::size_t rounds = 0;
    std::size_t clients = 1;
    std::size_t active = 1;
    std::optional<std::size_t> local_iters;
    std::optional<std::size_t> local_epochs;
    double lr = 0.1;
    double lr_decay = 0.998;
    LrSchedule schedule = LrSchedule::exponential;
    double lr_c = 1.0;            // inverse_time: η_t = lr_c / (t + 1)
    std::size_t batch_size = 0;   // 0 = full batch
    std::uint64_t seed = 0;
    bool weighted_aggregation = false;
    bool allow_negative_beta = false;
    bool theory_mode = false;     // enforces 141·β² < 1

    double lr_at(std::size_t round) const {
        if (schedule == LrSchedule::inverse_time) return lr_c / static_cast<double>(round + 1);
        return lr * std::pow(lr_decay, static_cast<double>(round));
    }

    bool full_batch() const noexcept { return batch_size == 0; }

    /// Local steps for a shard of `shard_size` samples. One epoch is
    /// ⌈S / batch⌉ iterations (a single iteration when full batch).
    std::size_t steps_for(std::size_t shard_size) const {
        if (local_iters) return *local_iters;
        const std::size_t per_epoch =
            full_batch() ? 1 : (shard_size + batch_size - 1) / batch_size;
        return *local_epochs * std::max<std::size_t>(1, per_epoch);
    }

    void validate(const StrategySpec& strategy) const {
        require(clients >= 1, "clients must be >= 1");
        require(active >= 1 && active <= clients, "active clients N=" + std::to_string(active) +
                                                      " must satisfy 1 <= N <= C=" + std::to_string(clients));
        require(local_iters.has_value() != local_epochs.has_value(),
                "exactly one of local_iters and local_epochs must be set");
        if (local_iters) require(*local_iters >= 1, "local_iters must be >= 1");
        if (local_epochs) require(*local_epochs >= 1, "local_epochs must be >= 1");
        if (schedule == LrSchedule::exponential) {
            require(lr > 0.0 && std::isfinite(lr), "lr must be > 0");
            require(lr_decay > 0.0 && lr_decay <= 1.0, "lr_decay must be in (0, 1]");
        } else {
            require(lr_c > 0.0 && std::isfinite(lr_c), "lr_c must be > 0");
        }
        const double beta = strategy.beta();
        require(std::isfinite(beta), "beta must be finite");
        if (!allow_negative_beta) require(beta >= 0.0, "beta must be >= 0 (pass --allow-negative-beta for ablations)");
        if (theory_mode)
            require(141.0 * beta * beta < 1.0,
                    "theory mode requires 141*beta^2 < 1, got beta=" + std::to_string(beta));
    }
};

struct ClientData {
    ModelSpec model;
    Dataset shard;
};

/// Everything a run needs besides hyperparameters: per-client objectives, the
/// shared initialization, and optional evaluation data.
struct Problem {
    std::vector<ClientData> clients;
    ModelSpec eval_model;
    std::optional<Dataset> test;
    std::optional<QuadraticFamily> family;
    ParamVector init;

    std::size_t dim() const noexcept { return init.dim(); }
};

struct ClientState {
    std::size_t id = 0;
    ParamVector last_local; // w_{i,K}^{t-1}
    ClientAux aux;
    Rng rng;
    std::vector<std::size_t> order; // current epoch permutation
    std::size_t cursor = 0;

    friend bool operator==(const ClientState&, const ClientState&) = default;
};

struct ServerState {
    ParamVector global;
    std::size_t round = 0;
    ServerAux aux;
    Rng sampler;

    friend bool operator==(const ServerState&, const ServerState&) = default;
};

/// w_{i,0}^t = w^t + β(w^t − w_{i,K}^{t−1}). β = 0 returns the global model itself.
inline ParamVector relaxed_init(const ParamVector& global, const ParamVector& last_local, double beta) {
    require_same_dim(global, last_local, "relaxed_init");
    if (beta == 0.0) return global;
    ParamVector out(global.dim());
    for (std::size_t i = 0; i < global.dim(); ++i) out[i] = global[i] + beta * (global[i] - last_local[i]);
    require_finite(out, "relaxed_init");
    return out;
}

/// Uniform sample of N distinct ids from [0, C), ascending.
inline std::vector<std::size_t> sample_clients(std::size_t clients, std::size_t active, Rng& rng) {
    require(active >= 1 && active <= clients,
            "sample_clients: N=" + std::to_string(active) + " must satisfy 1 <= N <= C=" + std::to_string(clients));
    const auto ids = all_rows(clients);
    if (active == clients) return ids;
    std::vector<std::size_t> out;
    out.reserve(active);
    std::sample(ids.begin(), ids.end(), std::back_inserter(out), active, rng);
    return out;
}

inline ClientState make_client_state(std::size_t id, const ParamVector& init, const StrategySpec& strategy,
                                     std::uint64_t seed) {
    ClientState c;
    c.id = id;
    c.last_local = init;
    c.aux = make_client_aux(strategy, init.dim());
    c.rng = make_rng(seed, Stream::client, id);
    return c;
}

inline ServerState make_server_state(const ParamVector& init, const StrategySpec& strategy, std::uint64_t seed) {
    return ServerState{init, 0, make_server_aux(strategy, init.dim()), make_rng(seed, Stream::sampler)};
}

/// Rows of the next mini-batch: batches are drawn without replacement from an
/// epoch permutation, reshuffled from the client stream when exhausted.
inline std::vector<std::size_t> next_batch(ClientState& client, std::size_t shard_size, std::size_t batch_size) {
    if (batch_size == 0 || batch_size >= shard_size) return all_rows(shard_size);
    if (client.order.size() != shard_size || client.cursor + batch_size > shard_size) {
        client.order = all_rows(shard_size);
        std::shuffle(client.order.begin(), client.order.end(), client.rng);
        client.cursor = 0;
    }
    std::vector<std::size_t> rows(client.order.begin() + static_cast<std::ptrdiff_t>(client.cursor),
                                  client.order.begin() + static_cast<std::ptrdiff_t>(client.cursor + batch_size));
    client.cursor += batch_size;
    return rows;
}

/// K local steps of the strategy's rule starting from `init`.
inline ParamVector local_train(const ParamVector& init, ClientState& client, const StrategySpec& strategy,
                               std::size_t steps, double lr, const ClientData& data, std::size_t batch_size,
                               const ParamVector& round_global, const ServerAux& server) {
    require(data.shard.size() > 0, "client " + std::to_string(client.id) + " has an empty shard");
    require(init.dim() == data.model.param_count(), "local_train: init dimension does not match the model");
    ParamVector w = init;
    const LocalContext ctx{round_global, client.aux, server, lr};
    for (std::size_t k = 0; k < steps; ++k) {
        const auto rows = next_batch(client, data.shard.size(), batch_size);
        const Batch batch{&data.shard, rows, client.id};
        client_step(strategy, w, [&](const ParamVector& p) { return grad(data.model, p, batch); }, ctx);
    }
    return w;
}

/// Mean of the local models, summed in ascending client-id order whatever the
/// input order. Optional weights (e.g. shard sizes) give a weighted mean.
inline ParamVector aggregate(std::span<const ClientUpdate> updates, std::span<const double> weights = {}) {
    require(!updates.empty(), "aggregate: no local models");
    require(weights.empty() || weights.size() == updates.size(), "aggregate: weight count mismatch");
    std::vector<std::size_t> order(updates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return updates[a].id < updates[b].id; });
    const std::size_t d = updates[order.front()].local.dim();
    ParamVector sum(d);
    double wsum = 0.0;
    for (std::size_t idx : order) {
        require(updates[idx].local.dim() == d, "aggregate: dimension mismatch");
        const double w = weights.empty() ? 1.0 : weights[idx];
        if (weights.empty()) {
            for (std::size_t i = 0; i < d; ++i) sum[i] += updates[idx].local[i];
        } else {
            for (std::size_t i = 0; i < d; ++i) sum[i] += w * updates[idx].local[i];
        }
        wsum += w;
    }
    require(wsum > 0.0, "aggregate: weights must sum to a positive value");
    for (auto& v : sum) v /= wsum;
    return sum;
}

inline ParamVector aggregate(std::span<const ParamVector> locals) {
    std::vector<ClientUpdate> updates;
    updates.reserve(locals.size());
    for (std::size_t i = 0; i < locals.size(); ++i) updates.push_back({i, locals[i], {}});
    return aggregate(updates);
}

/// Global-model metrics (everything in RoundRecord except round bookkeeping).
inline RoundRecord evaluate(const Problem& problem, std::span<const ClientState> clients, const ParamVector& global) {
    RoundRecord r;
    std::vector<ParamVector> lasts;
    lasts.reserve(clients.size());
    for (const auto& c : clients) lasts.push_back(c.last_local);
    r.divergence = divergence(lasts, global);

    ParamVector g(global.dim());
    double loss_sum = 0.0;
    std::size_t correct = 0, total = 0;
    const bool classifier = problem.eval_model.is_classifier();
    for (std::size_t i = 0; i < problem.clients.size(); ++i) {
        const auto& cd = problem.clients[i];
        const auto rows = all_rows(cd.shard.size());
        const Batch batch{&cd.shard, rows, i};
        loss_sum += loss(cd.model, global, batch);
        add_scaled(g, 1.0, grad(cd.model, global, batch));
        if (classifier) {
            for (std::size_t j = 0; j < cd.shard.size(); ++j)
                if (predict(cd.model, global, cd.shard.row(j)) == cd.shard.label(j)) ++correct;
            total += cd.shard.size();
        }
    }
    const double inv_c = 1.0 / static_cast<double>(problem.clients.size());
    for (auto& v : g) v *= inv_c;
    r.grad_norm_sq = norm_sq(g);
    r.train_loss = loss_sum * inv_c;
    if (classifier && total > 0) r.train_acc = static_cast<double>(correct) / static_cast<double>(total);
    if (problem.test && problem.test->size() > 0) {
        r.test_loss = dataset_loss(problem.eval_model, global, *problem.test);
        r.test_acc = accuracy(problem.eval_model, global, *problem.test);
    }
    if (problem.family) r.optimization_error = optimization_error(*problem.family, global);
    return r;
}

/// One communication round: sample N clients, relaxed init, K local steps
/// each, stragglers keep their last local model, aggregate, server rule.
inline RoundRecord run_round(ServerState& server, std::vector<ClientState>& clients, const StrategySpec& strategy,
                             const HyperParams& hp, const Problem& problem, std::size_t jobs = 1) {
    require(clients.size() == hp.clients && problem.clients.size() == hp.clients,
            "run_round: client count does not match hyperparameters");
    const double lr = hp.lr_at(server.round);
    const double beta = strategy.beta();
    const auto active = sample_clients(hp.clients, hp.active, server.sampler);

    std::vector<ClientUpdate> updates(active.size());
    std::vector<std::size_t> steps(active.size());
    std::vector<std::uint64_t> sent_down(active.size()), sent_up(active.size());
    const ParamVector& w_t = server.global;
    parallel_for(active.size(), jobs, [&](std::size_t a) {
        const std::size_t id = active[a];
        ClientState& client = clients[id];
        const ClientData& data = problem.clients[id];
        // Download: w^t plus whichever server vector the rule needs.
        sent_down[a] = w_t.dim() + server.aux.control.dim() + server.aux.momentum.dim();
        const ParamVector start = relaxed_init(w_t, client.last_local, beta);
        steps[a] = hp.steps_for(data.shard.size());
        ParamVector end = local_train(start, client, strategy, steps[a], lr, data, hp.batch_size, w_t, server.aux);
        if (!end.all_finite())
            throw NumericError("client " + std::to_string(id) + " diverged in round " + std::to_string(server.round));
        ParamVector delta = finish_local(strategy, client.aux, server.aux, w_t, start, end, steps[a], lr);
        sent_up[a] = end.dim() + delta.dim();
        updates[a] = ClientUpdate{id, std::move(end), std::move(delta)};
    });

    std::vector<double> weights;
    if (hp.weighted_aggregation)
        for (std::size_t id : active) weights.push_back(static_cast<double>(problem.clients[id].shard.size()));
    const ParamVector aggregated = aggregate(updates, weights);

    ServerContext ctx;
    ctx.total_clients = hp.clients;
    ctx.lr = lr;
    ctx.mean_steps = static_cast<double>(std::accumulate(steps.begin(), steps.end(), std::size_t{0})) /
                     static_cast<double>(steps.size());
    ParamVector next = server_step(strategy, w_t, aggregated, updates, server.aux, ctx);
    if (!next.all_finite()) throw NumericError("global model diverged in round " + std::to_string(server.round));

    for (auto& u : updates) clients[u.id].last_local = std::move(u.local);
    server.global = std::move(next);
    server.round += 1;

    RoundRecord rec = evaluate(problem, clients, server.global);
    rec.round = server.round;
    rec.lr = lr;
    rec.beta = beta;
    rec.active = active;
    for (std::size_t a = 0; a < active.size(); ++a) {
        rec.bytes_down += sent_down[a] * sizeof(double);
        rec.bytes_up += sent_up[a] * sizeof(double);
    }
    return rec;
}

} // namespace fedinit
