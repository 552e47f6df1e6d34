#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "fedinit/errors.hpp"
#include "fedinit/param_vector.hpp"

namespace fedinit {

enum class StrategyKind { fedavg, fedadam, fedsam, scaffold, feddyn, fedcm, fedinit };

inline const char* to_string(StrategyKind kind) {
    switch (kind) {
    case StrategyKind::fedavg: return "FedAvg";
    case StrategyKind::fedadam: return "FedAdam";
    case StrategyKind::fedsam: return "FedSAM";
    case StrategyKind::scaffold: return "SCAFFOLD";
    case StrategyKind::feddyn: return "FedDyn";
    case StrategyKind::fedcm: return "FedCM";
    case StrategyKind::fedinit: return "FedInit";
    }
    return "?";
}

inline constexpr const char* kValidStrategies = "FedAvg, FedAdam, FedSAM, SCAFFOLD, FedDyn, FedCM, FedInit";

/// Which update rules run, and their hyperparameters.
struct StrategySpec {
    StrategyKind kind = StrategyKind::fedavg;
    bool ri_enabled = false;
    double ri_beta = 0.0;

    // FedAdam server optimizer.
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.99;
    double adam_tau = 1e-3;
    double server_lr = 0.1;
    // FedSAM perturbation radius.
    double sam_rho = 0.05;
    // FedDyn regularization strength.
    double dyn_alpha = 0.1;
    // FedCM weight on the global momentum.
    double cm_alpha = 0.1;

    /// FedInit runs the FedAvg rules; only the initialization differs.
    StrategyKind rule() const noexcept {
        return kind == StrategyKind::fedinit ? StrategyKind::fedavg : kind;
    }
    double beta() const noexcept { return ri_enabled ? ri_beta : 0.0; }

    std::string label() const {
        std::string s = to_string(kind);
        if (ri_enabled && kind != StrategyKind::fedinit) s += "+RI";
        return s;
    }

    /// Variant metadata echoed into run summaries.
    std::string variant() const {
        switch (rule()) {
        case StrategyKind::scaffold: return "control variate option II (model difference)";
        case StrategyKind::fedcm: return "global momentum m=(w_t - w_{t+1})/(lr*K)";
        case StrategyKind::fedadam: return "bias-corrected Adam on pseudo-gradient w_t - mean(w_i)";
        case StrategyKind::feddyn: return "linear dual + server correction h";
        default: return "";
        }
    }

    friend bool operator==(const StrategySpec&, const StrategySpec&) = default;
};

inline StrategySpec make_strategy(const std::string& name, double beta = 0.1) {
    StrategySpec s;
    if (name == "FedAvg") s.kind = StrategyKind::fedavg;
    else if (name == "FedAdam") s.kind = StrategyKind::fedadam;
    else if (name == "FedSAM") s.kind = StrategyKind::fedsam;
    else if (name == "SCAFFOLD") s.kind = StrategyKind::scaffold;
    else if (name == "FedDyn") s.kind = StrategyKind::feddyn;
    else if (name == "FedCM") s.kind = StrategyKind::fedcm;
    else if (name == "FedInit") {
        s.kind = StrategyKind::fedinit;
        s.ri_enabled = true;
        s.ri_beta = beta;
    } else
        throw ConfigError("unknown strategy '" + name + "' (valid: " + kValidStrategies + ")");
    return s;
}

/// Same strategy with relaxed initialization switched on.
inline StrategySpec compose_ri(StrategySpec spec, double beta) {
    spec.ri_enabled = true;
    spec.ri_beta = beta;
    return spec;
}

/// Per-client persistent slots (only the ones the rule needs are allocated).
struct ClientAux {
    ParamVector control; // SCAFFOLD c_i
    ParamVector dual;    // FedDyn linear term

    friend bool operator==(const ClientAux&, const ClientAux&) = default;
};

/// Server-side persistent slots.
struct ServerAux {
    ParamVector control;  // SCAFFOLD c
    ParamVector momentum; // FedCM global momentum
    ParamVector dyn_h;    // FedDyn server correction
    ParamVector adam_m;
    ParamVector adam_v;
    long long adam_step = 0;

    friend bool operator==(const ServerAux&, const ServerAux&) = default;
};

inline ClientAux make_client_aux(const StrategySpec& spec, std::size_t dim) {
    ClientAux aux;
    if (spec.rule() == StrategyKind::scaffold) aux.control = ParamVector(dim);
    if (spec.rule() == StrategyKind::feddyn) aux.dual = ParamVector(dim);
    return aux;
}

inline ServerAux make_server_aux(const StrategySpec& spec, std::size_t dim) {
    ServerAux aux;
    switch (spec.rule()) {
    case StrategyKind::scaffold: aux.control = ParamVector(dim); break;
    case StrategyKind::fedcm: aux.momentum = ParamVector(dim); break;
    case StrategyKind::feddyn: aux.dyn_h = ParamVector(dim); break;
    case StrategyKind::fedadam:
        aux.adam_m = ParamVector(dim);
        aux.adam_v = ParamVector(dim);
        break;
    default: break;
    }
    return aux;
}

/// Read-only state one local step may consult.
struct LocalContext {
    const ParamVector& round_global;
    const ClientAux& client;
    const ServerAux& server;
    double lr;
};

/// One local update w ← w − η·d(w). `grad_at(p)` returns the mini-batch
/// gradient at p; FedSAM calls it twice (at w, then at the ascent point).
template <class GradFn>
void client_step(const StrategySpec& spec, ParamVector& w, GradFn&& grad_at, const LocalContext& ctx) {
    ParamVector g;
    if (spec.rule() == StrategyKind::fedsam && spec.sam_rho != 0.0) {
        const ParamVector g0 = grad_at(w);
        const double n0 = norm(g0);
        if (n0 > 0.0) {
            ParamVector ascent = w;
            add_scaled(ascent, spec.sam_rho / n0, g0);
            g = grad_at(ascent);
        } else {
            g = g0;
        }
    } else {
        g = grad_at(w);
    }

    switch (spec.rule()) {
    case StrategyKind::scaffold:
        require(ctx.client.control.dim() == w.dim() && ctx.server.control.dim() == w.dim(),
                "SCAFFOLD step needs client and server control variates");
        for (std::size_t i = 0; i < g.dim(); ++i) g[i] = g[i] - ctx.client.control[i] + ctx.server.control[i];
        break;
    case StrategyKind::fedcm:
        require(ctx.server.momentum.dim() == w.dim(), "FedCM step needs the global momentum");
        if (spec.cm_alpha != 0.0)
            for (std::size_t i = 0; i < g.dim(); ++i)
                g[i] = spec.cm_alpha * ctx.server.momentum[i] + (1.0 - spec.cm_alpha) * g[i];
        break;
    case StrategyKind::feddyn:
        require(ctx.client.dual.dim() == w.dim(), "FedDyn step needs the client dual");
        if (spec.dyn_alpha != 0.0)
            for (std::size_t i = 0; i < g.dim(); ++i)
                g[i] = g[i] - ctx.client.dual[i] + spec.dyn_alpha * (w[i] - ctx.round_global[i]);
        break;
    default: break;
    }
    add_scaled(w, -ctx.lr, g);
}

/// What one active client sends back after local training.
struct ClientUpdate {
    std::size_t id = 0;
    ParamVector local;         // w_{i,K}^t
    ParamVector control_delta; // SCAFFOLD c_i⁺ − c_i
};

/// Client-side bookkeeping after K local steps from `start` to `end`.
/// Returns the SCAFFOLD control delta (empty for other rules).
inline ParamVector finish_local(const StrategySpec& spec, ClientAux& aux, const ServerAux& server,
                                const ParamVector& round_global, const ParamVector& start,
                                const ParamVector& end, std::size_t steps, double lr) {
    switch (spec.rule()) {
    case StrategyKind::scaffold: {
        if (steps == 0) return ParamVector(end.dim());
        // c_i⁺ = c_i − c + (w_{i,0} − w_{i,K}) / (Kη)
        const double inv = 1.0 / (static_cast<double>(steps) * lr);
        ParamVector delta(end.dim());
        for (std::size_t i = 0; i < end.dim(); ++i) {
            const double updated = aux.control[i] - server.control[i] + (start[i] - end[i]) * inv;
            delta[i] = updated - aux.control[i];
            aux.control[i] = updated;
        }
        return delta;
    }
    case StrategyKind::feddyn:
        if (spec.dyn_alpha != 0.0)
            for (std::size_t i = 0; i < end.dim(); ++i)
                aux.dual[i] -= spec.dyn_alpha * (end[i] - round_global[i]);
        return {};
    default: return {};
    }
}

/// Round-level facts the server rules need.
struct ServerContext {
    std::size_t total_clients = 1;
    double lr = 0.0;          // local learning rate used this round
    double mean_steps = 1.0;  // mean K over active clients
};

/// Turns the aggregated local models into the next global model.
/// `updates` must be in ascending client-id order.
inline ParamVector server_step(const StrategySpec& spec, const ParamVector& global,
                               const ParamVector& aggregated, std::span<const ClientUpdate> updates,
                               ServerAux& aux, const ServerContext& ctx) {
    require_same_dim(global, aggregated, "server_step");
    const double inv_c = 1.0 / static_cast<double>(ctx.total_clients);
    switch (spec.rule()) {
    case StrategyKind::fedadam: {
        aux.adam_step += 1;
        const double b1 = spec.adam_beta1, b2 = spec.adam_beta2;
        const double c1 = 1.0 - std::pow(b1, static_cast<double>(aux.adam_step));
        const double c2 = 1.0 - std::pow(b2, static_cast<double>(aux.adam_step));
        ParamVector next = global;
        for (std::size_t i = 0; i < global.dim(); ++i) {
            const double pseudo = global[i] - aggregated[i];
            aux.adam_m[i] = b1 * aux.adam_m[i] + (1.0 - b1) * pseudo;
            aux.adam_v[i] = b2 * aux.adam_v[i] + (1.0 - b2) * pseudo * pseudo;
            const double m_hat = aux.adam_m[i] / c1;
            const double v_hat = aux.adam_v[i] / c2;
            next[i] = global[i] - spec.server_lr * m_hat / (std::sqrt(v_hat) + spec.adam_tau);
        }
        return next;
    }
    case StrategyKind::scaffold:
        for (const auto& u : updates) add_scaled(aux.control, inv_c, u.control_delta);
        return aggregated;
    case StrategyKind::feddyn: {
        if (spec.dyn_alpha == 0.0) return aggregated;
        for (const auto& u : updates)
            for (std::size_t i = 0; i < global.dim(); ++i)
                aux.dyn_h[i] -= spec.dyn_alpha * inv_c * (u.local[i] - global[i]);
        return combine(1.0, aggregated, -1.0 / spec.dyn_alpha, aux.dyn_h);
    }
    case StrategyKind::fedcm: {
        const double inv = 1.0 / (ctx.lr * ctx.mean_steps);
        for (std::size_t i = 0; i < global.dim(); ++i) aux.momentum[i] = (global[i] - aggregated[i]) * inv;
        return aggregated;
    }
    default: return aggregated;
    }
}

/// Parameter-vector payloads per active client and direction.
inline std::size_t payloads_down(const StrategySpec& spec) {
    const auto r = spec.rule();
    return (r == StrategyKind::scaffold || r == StrategyKind::fedcm) ? 2 : 1;
}
inline std::size_t payloads_up(const StrategySpec& spec) {
    return spec.rule() == StrategyKind::scaffold ? 2 : 1;
}

} // namespace fedinit
