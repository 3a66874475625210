#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace eraselab {

// PCG32 (O'Neill). Output sequence is fully specified by (state, inc), so
// streams replay identically across platforms and std-library versions.
struct Pcg32 {
    std::uint64_t state = 0x853c49e6748fea9bULL;
    std::uint64_t inc = 0xda3e39cb94b95bdbULL;

    Pcg32() = default;
    Pcg32(std::uint64_t seed, std::uint64_t seq) {
        state = 0;
        inc = (seq << 1u) | 1u;
        next_u32();
        state += seed;
        next_u32();
    }

    std::uint32_t next_u32() {
        std::uint64_t old = state;
        state = old * 6364136223846793005ULL + inc;
        std::uint32_t xorshifted = static_cast<std::uint32_t>(((old >> 18u) ^ old) >> 27u);
        std::uint32_t rot = static_cast<std::uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    std::uint64_t next_u64() {
        std::uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // uniform in [0, 1)
    double uniform() { return next_u32() * 0x1p-32; }

    // uniform in (0, 1), safe as a log() argument
    double uniform_open() { return (next_u32() + 0.5) * 0x1p-32; }

    // integer in [0, n)
    std::uint32_t below(std::uint32_t n) {
        // multiply-shift; bias < 2^-32, irrelevant at our draw counts
        return static_cast<std::uint32_t>((std::uint64_t(next_u32()) * n) >> 32);
    }

    // Box-Muller without the cached spare: two u32 per draw, which keeps
    // draw-count accounting trivial when replaying streams.
    double gaussian() {
        double u1 = uniform_open();
        double u2 = uniform_open();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
    }

    // standard Gumbel: -log(-log(u))
    double gumbel() { return -std::log(-std::log(uniform_open())); }
};

inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent seed for a named substream. A single root seed fans
// out to (name, index) streams so pipeline stages can be re-run in isolation.
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t h = splitmix64(root ^ fnv1a64(name));
    return splitmix64(h ^ (index * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
}

inline Pcg32 substream(std::uint64_t root, std::string_view name, std::uint64_t index = 0) {
    std::uint64_t s = derive_seed(root, name, index);
    return Pcg32(s, splitmix64(s) | 1u);
}

} // namespace eraselab
