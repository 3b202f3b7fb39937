#pragma once

// Deterministic random helpers. std::mt19937_64 output is pinned by the
// standard, but the std distributions are not, so the draws here are built
// straight from the raw 64-bit stream. Fixture generators and tests both rely
// on these producing the same values on every platform and build.

#include <cmath>
#include <cstdint>
#include <random>

namespace dintq::rng {

using Engine = std::mt19937_64;

// splitmix64 finalizer; used to derive independent substreams from one seed.
inline uint64_t mix(uint64_t a, uint64_t b) {
    uint64_t x = a + 0x9E3779B97F4A7C15ULL * (b + 0x632BE59BD9B4E019ULL);
    x ^= x >> 30;
    x *= 0xBF58476D1CE4E5B9ULL;
    x ^= x >> 27;
    x *= 0x94D049BB133111EBULL;
    x ^= x >> 31;
    return x;
}

inline Engine engine(uint64_t seed, uint64_t stream = 0) {
    return Engine(mix(seed, stream));
}

// Uniform in [0, 1).
inline double uniform01(Engine& eng) {
    return static_cast<double>(eng() >> 11) * 0x1.0p-53;
}

inline double uniform(Engine& eng, double lo, double hi) {
    return lo + (hi - lo) * uniform01(eng);
}

// Integer in [0, n).
inline uint64_t below(Engine& eng, uint64_t n) {
    return eng() % n;
}

// Standard normal via Box-Muller; the sine twin is discarded so every call
// consumes exactly two engine words.
inline double normal(Engine& eng) {
    const double u1 = (static_cast<double>(eng() >> 11) + 1.0) * 0x1.0p-53;  // (0, 1]
    const double u2 = static_cast<double>(eng() >> 11) * 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

}  // namespace dintq::rng
