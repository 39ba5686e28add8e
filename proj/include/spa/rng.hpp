#pragma once

#include <array>
#include <cstdint>
#include <string_view>

namespace spa {

/// splitmix64 step; advances `state` and returns the mixed output.
std::uint64_t splitmix64(std::uint64_t& state);

/// Derives an independent child seed from a parent seed and a stream label.
/// The label is folded in with FNV-1a so that ports only need the byte string.
std::uint64_t derive_seed(std::uint64_t parent, std::string_view label, std::uint64_t index = 0);

/// xoshiro256** seeded through splitmix64. The stream is fully specified:
///   next()            raw 64-bit output
///   uniform()         (next() >> 11) * 2^-53, in [0, 1)
///   uniform_index(n)  rejection sampling on next() for an unbiased value in [0, n)
///   normal()          Box-Muller: u1 = 1 - uniform(), u2 = uniform(),
///                     r = sqrt(-2 ln u1); returns r*cos(2 pi u2) and caches
///                     r*sin(2 pi u2) for the following call.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    std::uint64_t next();
    double uniform();
    std::uint64_t uniform_index(std::uint64_t n);
    double normal();
    /// Poisson draw (Knuth multiplication for mean < 30, normal approximation
    /// rounded and clamped at zero above).
    long poisson(double mean);

    bool operator==(const Rng&) const = default;

private:
    std::array<std::uint64_t, 4> s_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace spa
