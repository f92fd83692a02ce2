#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace fedul {

using Rng = std::mt19937_64;

// Independent generator derived from a run seed and a stream path such as
// {purpose, client}. Same inputs always give the same stream.
inline Rng make_stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::vector<std::uint32_t> words;
    words.push_back(static_cast<std::uint32_t>(seed));
    words.push_back(static_cast<std::uint32_t>(seed >> 32));
    for (auto p : path) {
        words.push_back(static_cast<std::uint32_t>(p));
        words.push_back(static_cast<std::uint32_t>(p >> 32));
    }
    std::seed_seq seq(words.begin(), words.end());
    return Rng(seq);
}

// Stream purposes for make_stream.
enum class Stream : std::uint64_t {
    task = 1,
    priors = 2,
    usets = 3,
    test_set = 4,
    model_init = 5,
    batches = 6,
    objective = 7,
    allocation = 8,
    noise = 9,
    subsample = 10,
    client_test = 11,
    participation = 12,
};

inline Rng make_stream(std::uint64_t seed, Stream purpose, std::uint64_t index = 0) {
    return make_stream(seed, {static_cast<std::uint64_t>(purpose), index});
}

inline double uniform(Rng& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Beta(a, b) from two gamma draws.
inline double sample_beta(Rng& rng, double a, double b) {
    const double x = std::gamma_distribution<double>(a, 1.0)(rng);
    const double y = std::gamma_distribution<double>(b, 1.0)(rng);
    if (x + y == 0.0) return 0.5;
    return x / (x + y);
}

}  // namespace fedul
