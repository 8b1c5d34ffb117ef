#pragma once

// Seed derivation and sampling helpers. Every stochastic stream is keyed on
// (master seed, stream id, index) so results never depend on scheduling.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

namespace jointpo {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

/// Counter-based child seed; distinct (stream, index, attempt) tuples give
/// independent-looking seeds for the same master.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index,
                                 std::uint64_t attempt = 0) noexcept {
    std::uint64_t h = splitmix64(master);
    h = splitmix64(h ^ (stream * 0xD6E8FEB86659FD93ULL));
    h = splitmix64(h ^ index);
    return splitmix64(h ^ (attempt * 0xA0761D6478BD642FULL));
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed) { return Engine(seed); }

/// Multinomial draw by sequential conditional binomials. Weights need not be
/// normalized; zero-weight cells always receive 0.
inline std::vector<std::int64_t> sample_multinomial(Engine& rng, std::int64_t trials, std::span<const double> weights) {
    std::vector<std::int64_t> out(weights.size(), 0);
    double remaining_mass = 0.0;
    for (double w : weights) remaining_mass += w;
    std::int64_t remaining = trials;
    for (std::size_t i = 0; i < weights.size() && remaining > 0; ++i) {
        if (weights[i] <= 0.0) continue;
        if (i + 1 == weights.size() || weights[i] >= remaining_mass) {
            out[i] = remaining;
            remaining = 0;
            break;
        }
        const double p = weights[i] / remaining_mass;
        std::binomial_distribution<std::int64_t> draw(remaining, p);
        out[i] = draw(rng);
        remaining -= out[i];
        remaining_mass -= weights[i];
    }
    if (remaining > 0) {
        // Trailing zero weights: give the rest to the last positive cell.
        for (std::size_t i = weights.size(); i-- > 0;)
            if (weights[i] > 0.0) {
                out[i] += remaining;
                break;
            }
    }
    return out;
}

}  // namespace jointpo
