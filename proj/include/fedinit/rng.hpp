#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace fedinit {

using Rng = std::mt19937_64;

/// Stream tags keep independent consumers of one experiment seed apart.
enum class Stream : std::uint32_t {
    init = 1,
    sampler = 2,
    client = 3,
    data = 4,
    partition = 5,
    client_bias = 6,
    category_bias = 7,
    split = 8,
    probe = 9,
    perturb = 10,
};

/// Independent generator for (seed, stream, index). Equal arguments give equal streams.
inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t index = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                      static_cast<std::uint32_t>(index >> 32)};
    return Rng(seq);
}

inline std::string rng_state(const Rng& rng) {
    std::ostringstream out;
    out << rng;
    return out.str();
}

inline Rng rng_from_state(const std::string& state) {
    Rng rng;
    std::istringstream in(state);
    in >> rng;
    return rng;
}

} // namespace fedinit
