#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedinit/dataset.hpp"
#include "fedinit/errors.hpp"
#include "fedinit/quadratic.hpp"
#include "fedinit/rng.hpp"

namespace fedinit {

/// Gaussian blobs with unit isotropic noise around per-class means.
///
/// When dim >= classes the means sit on a scaled simplex, so every pair is
/// exactly `separation` apart. With two classes the means are antipodal along
/// a random direction. Otherwise they are seeded random directions at radius
/// separation/2.
class BlobGenerator {
public:
    BlobGenerator(std::size_t classes, std::size_t dim, double separation, std::uint64_t seed)
        : classes_(classes), dim_(dim) {
        require(classes >= 2, "gen_classification: need at least 2 classes");
        require(dim >= 1, "gen_classification: dim must be >= 1");
        require(separation >= 0.0, "gen_classification: separation must be >= 0");
        Rng rng = make_rng(seed, Stream::data, 1);
        std::normal_distribution<double> normal(0.0, 1.0);
        means_.assign(classes * dim, 0.0);
        auto random_unit = [&] {
            std::vector<double> u(dim);
            double n2 = 0.0;
            while (n2 == 0.0) {
                n2 = 0.0;
                for (auto& v : u) {
                    v = normal(rng);
                    n2 += v * v;
                }
            }
            for (auto& v : u) v /= std::sqrt(n2);
            return u;
        };
        if (dim >= classes) {
            const double s = separation / std::sqrt(2.0);
            for (std::size_t c = 0; c < classes; ++c) means_[c * dim + c] = s;
        } else if (classes == 2) {
            const auto u = random_unit();
            for (std::size_t f = 0; f < dim; ++f) {
                means_[f] = -0.5 * separation * u[f];
                means_[dim + f] = 0.5 * separation * u[f];
            }
        } else {
            for (std::size_t c = 0; c < classes; ++c) {
                const auto u = random_unit();
                for (std::size_t f = 0; f < dim; ++f) means_[c * dim + f] = 0.5 * separation * u[f];
            }
        }
    }

    std::size_t classes() const noexcept { return classes_; }
    std::size_t dim() const noexcept { return dim_; }
    std::span<const double> mean(std::size_t c) const { return {means_.data() + c * dim_, dim_}; }

    std::vector<double> sample(Rng& rng, std::size_t label) const {
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> x(dim_);
        for (std::size_t f = 0; f < dim_; ++f) x[f] = means_[label * dim_ + f] + normal(rng);
        return x;
    }

    Dataset generate(std::size_t per_class, Rng& rng) const {
        Dataset data;
        data.features = dim_;
        data.classes = classes_;
        for (std::size_t c = 0; c < classes_; ++c)
            for (std::size_t k = 0; k < per_class; ++k) data.push_back(sample(rng, c), static_cast<double>(c));
        return data;
    }

private:
    std::size_t classes_;
    std::size_t dim_;
    std::vector<double> means_;
};

/// classes × per_class labeled samples, class-major order, deterministic in `seed`.
inline Dataset gen_classification(std::size_t classes, std::size_t per_class, std::size_t dim,
                                  double separation, std::uint64_t seed) {
    require(per_class >= 1, "gen_classification: per_class must be >= 1");
    const BlobGenerator gen(classes, dim, separation, seed);
    Rng rng = make_rng(seed, Stream::data, 2);
    return gen.generate(per_class, rng);
}

/// Client i's quadratic samples: target points b_i + noise·(n_j − n̄), so the
/// shard's full-batch objective has minimizer b_i and curvature A_i.
inline Dataset quadratic_client_data(const QuadraticFamily& family, std::size_t client,
                                     std::size_t samples, double noise, Rng& rng) {
    require(samples >= 1, "quadratic_client_data: samples must be >= 1");
    const std::size_t d = family.dimension();
    Dataset data;
    data.features = d;
    std::vector<double> raw(samples * d, 0.0);
    if (noise > 0.0) {
        std::normal_distribution<double> normal(0.0, 1.0);
        for (auto& v : raw) v = normal(rng);
        for (std::size_t f = 0; f < d; ++f) {
            double m = 0.0;
            for (std::size_t j = 0; j < samples; ++j) m += raw[j * d + f];
            m /= static_cast<double>(samples);
            for (std::size_t j = 0; j < samples; ++j) raw[j * d + f] -= m;
        }
    }
    const auto& b = family.center(client);
    std::vector<double> row(d);
    for (std::size_t j = 0; j < samples; ++j) {
        for (std::size_t f = 0; f < d; ++f)
            row[f] = b(static_cast<Eigen::Index>(f)) + noise * raw[j * d + f];
        data.push_back(row, 0.0);
    }
    return data;
}

struct TrainTestSplit {
    Dataset train;
    Dataset test;
};

/// Seeded i.i.d. hold-out split; the test part has round(fraction·n) rows.
inline TrainTestSplit split_train_test(const Dataset& data, double test_fraction, std::uint64_t seed) {
    require(test_fraction >= 0.0 && test_fraction < 1.0, "test_fraction must be in [0, 1)");
    auto rows = all_rows(data.size());
    Rng rng = make_rng(seed, Stream::split);
    std::shuffle(rows.begin(), rows.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(data.size())));
    require(data.size() - n_test >= 1, "split_train_test: no training rows left");
    std::vector<std::size_t> test_rows(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train_rows(rows.begin() + static_cast<std::ptrdiff_t>(n_test), rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    std::sort(train_rows.begin(), train_rows.end());
    return {data.subset(train_rows), data.subset(test_rows)};
}

struct PartitionPlan {
    std::vector<std::vector<std::size_t>> assignment;
    /// Per-client label proportions drawn from Dirichlet(Dr·1).
    std::vector<std::vector<double>> proportions;
    double concentration = 1.0;
    bool with_replacement = false;

    std::size_t clients() const noexcept { return assignment.size(); }
};

namespace detail {

// Integer counts summing to `total`, proportional to `weights` (largest remainder, ties to lower index).
inline std::vector<std::size_t> apportion(std::size_t total, const std::vector<double>& weights) {
    const double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
    std::vector<std::size_t> out(weights.size(), 0);
    if (total == 0 || wsum <= 0.0) return out;
    std::vector<std::pair<double, std::size_t>> rema;
    std::size_t used = 0;
    for (std::size_t c = 0; c < weights.size(); ++c) {
        const double exact = static_cast<double>(total) * weights[c] / wsum;
        out[c] = static_cast<std::size_t>(std::floor(exact));
        used += out[c];
        if (weights[c] > 0.0) rema.emplace_back(exact - std::floor(exact), c);
    }
    std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t k = 0; used < total; ++k, ++used) out[rema[k % rema.size()].second] += 1;
    return out;
}

inline constexpr int kDirichletAttempts = 8;

inline std::vector<double> draw_dirichlet(std::size_t k, double concentration, Rng& rng) {
    std::gamma_distribution<double> gamma(concentration, 1.0);
    for (int attempt = 0; attempt < kDirichletAttempts; ++attempt) {
        std::vector<double> p(k);
        double s = 0.0;
        for (auto& v : p) {
            v = gamma(rng);
            s += v;
        }
        if (s > 0.0 && std::isfinite(s)) {
            for (auto& v : p) v /= s;
            return p;
        }
    }
    throw NumericError("dirichlet_partition: Dirichlet draw degenerate after " +
                       std::to_string(kDirichletAttempts) + " attempts (Dr too small)");
}

} // namespace detail

/// Non-IID split: each client draws label proportions from Dirichlet(Dr·1) and
/// receives a quota of ⌊n/C⌋ (+1 for the first n mod C clients) samples
/// allocated to match those proportions. Without replacement the plan is an
/// exact cover; a client whose preferred classes are exhausted is filled from
/// the remaining classes in proportion to its draw. With replacement every
/// client samples its quota independently from the class pools.
inline PartitionPlan dirichlet_partition(const std::vector<int>& labels, std::size_t clients,
                                         double concentration, std::uint64_t seed,
                                         bool with_replacement = false) {
    require(concentration > 0.0, "dirichlet_partition: Dr must be > 0");
    require(clients >= 1, "dirichlet_partition: need at least one client");
    require(labels.size() >= clients, "dirichlet_partition: " + std::to_string(labels.size()) +
                                          " samples cannot give " + std::to_string(clients) +
                                          " clients at least one sample each");
    int max_label = -1;
    for (int y : labels) {
        require(y >= 0, "dirichlet_partition: labels must be non-negative");
        max_label = std::max(max_label, y);
    }
    const auto k = static_cast<std::size_t>(max_label + 1);
    const std::size_t n = labels.size();

    Rng rng = make_rng(seed, Stream::partition);
    std::vector<std::vector<std::size_t>> pools(k);
    for (std::size_t i = 0; i < n; ++i) pools[static_cast<std::size_t>(labels[i])].push_back(i);
    for (auto& pool : pools) std::shuffle(pool.begin(), pool.end(), rng);

    PartitionPlan plan;
    plan.concentration = concentration;
    plan.with_replacement = with_replacement;
    plan.assignment.resize(clients);
    for (std::size_t c = 0; c < clients; ++c) plan.proportions.push_back(detail::draw_dirichlet(k, concentration, rng));

    std::vector<std::size_t> quota(clients, n / clients);
    for (std::size_t c = 0; c < n % clients; ++c) quota[c] += 1;

    if (with_replacement) {
        for (std::size_t c = 0; c < clients; ++c) {
            auto weights = plan.proportions[c];
            for (std::size_t y = 0; y < k; ++y)
                if (pools[y].empty()) weights[y] = 0.0;
            const auto counts = detail::apportion(quota[c], weights);
            for (std::size_t y = 0; y < k; ++y) {
                if (counts[y] == 0) continue;
                std::uniform_int_distribution<std::size_t> pick(0, pools[y].size() - 1);
                for (std::size_t m = 0; m < counts[y]; ++m) plan.assignment[c].push_back(pools[y][pick(rng)]);
            }
        }
        return plan;
    }

    std::vector<std::size_t> order = all_rows(clients);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t c : order) {
        auto& out = plan.assignment[c];
        std::size_t need = quota[c];
        while (need > 0) {
            std::vector<double> weights(k, 0.0);
            double wsum = 0.0;
            for (std::size_t y = 0; y < k; ++y)
                if (!pools[y].empty()) {
                    weights[y] = plan.proportions[c][y];
                    wsum += weights[y];
                }
            if (wsum <= 0.0)
                for (std::size_t y = 0; y < k; ++y) weights[y] = static_cast<double>(pools[y].size());
            const auto target = detail::apportion(need, weights);
            for (std::size_t y = 0; y < k; ++y) {
                const std::size_t take = std::min(target[y], pools[y].size());
                for (std::size_t m = 0; m < take; ++m) {
                    out.push_back(pools[y].back());
                    pools[y].pop_back();
                }
                need -= take;
            }
        }
        std::sort(out.begin(), out.end());
    }
    return plan;
}

inline std::vector<int> labels_of(const Dataset& data) {
    std::vector<int> out(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) out[i] = data.label(i);
    return out;
}

/// Client c's feature scale vector s_c ~ N(1, σ²) (elementwise).
inline std::vector<double> client_scale_vector(std::size_t features, double scale_sigma, std::uint64_t seed,
                                               std::size_t client) {
    std::vector<double> scale(features, 1.0);
    if (scale_sigma <= 0.0) return scale;
    Rng rng = make_rng(seed, Stream::client_bias, client);
    std::normal_distribution<double> normal(1.0, scale_sigma);
    for (auto& s : scale) s = normal(rng);
    return scale;
}

/// Materializes per-client shards, scaling each client's features by a
/// per-client vector s_i ~ N(1, σ²) (elementwise).
inline std::vector<Dataset> apply_client_bias(const Dataset& data, const PartitionPlan& plan,
                                              double scale_sigma, std::uint64_t seed) {
    require(scale_sigma >= 0.0, "apply_client_bias: scale_sigma must be >= 0");
    std::vector<Dataset> shards;
    shards.reserve(plan.clients());
    for (std::size_t c = 0; c < plan.clients(); ++c) {
        Dataset shard = data.subset(plan.assignment[c]);
        if (scale_sigma > 0.0) {
            const auto scale = client_scale_vector(data.features, scale_sigma, seed, c);
            for (std::size_t r = 0; r < shard.size(); ++r) {
                auto row = shard.row(r);
                for (std::size_t f = 0; f < row.size(); ++f) row[f] *= scale[f];
            }
        }
        shards.push_back(std::move(shard));
    }
    return shards;
}

/// Adds a per-class scalar shift δ_c ~ N(0, σ²) to every feature of class-c samples.
inline Dataset apply_category_bias(Dataset data, double shift_sigma, std::uint64_t seed) {
    require(shift_sigma >= 0.0, "apply_category_bias: shift_sigma must be >= 0");
    if (shift_sigma == 0.0) return data;
    std::size_t k = data.classes;
    for (std::size_t i = 0; i < data.size(); ++i) k = std::max(k, static_cast<std::size_t>(data.label(i)) + 1);
    Rng rng = make_rng(seed, Stream::category_bias);
    std::normal_distribution<double> normal(0.0, shift_sigma);
    std::vector<double> shift(k);
    for (auto& s : shift) s = normal(rng);
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double s = shift[static_cast<std::size_t>(data.label(i))];
        for (auto& v : data.row(i)) v += s;
    }
    return data;
}

/// Per-client label counts.
inline std::vector<std::vector<std::size_t>> label_histograms(const PartitionPlan& plan,
                                                              const std::vector<int>& labels,
                                                              std::size_t classes) {
    std::vector<std::vector<std::size_t>> h(plan.clients(), std::vector<std::size_t>(classes, 0));
    for (std::size_t c = 0; c < plan.clients(); ++c)
        for (std::size_t i : plan.assignment[c]) h[c][static_cast<std::size_t>(labels[i])] += 1;
    return h;
}

inline double max_label_share(const std::vector<std::size_t>& histogram) {
    const auto total = std::accumulate(histogram.begin(), histogram.end(), std::size_t{0});
    if (total == 0) return 0.0;
    return static_cast<double>(*std::max_element(histogram.begin(), histogram.end())) /
           static_cast<double>(total);
}

/// Total-variation distance between a label histogram and the uniform distribution.
inline double tv_to_uniform(const std::vector<std::size_t>& histogram) {
    const auto total = std::accumulate(histogram.begin(), histogram.end(), std::size_t{0});
    if (total == 0) return 1.0;
    const double u = 1.0 / static_cast<double>(histogram.size());
    double tv = 0.0;
    for (auto h : histogram) tv += std::abs(static_cast<double>(h) / static_cast<double>(total) - u);
    return 0.5 * tv;
}

inline double median(std::vector<double> v) {
    require(!v.empty(), "median of empty list");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

} // namespace fedinit
