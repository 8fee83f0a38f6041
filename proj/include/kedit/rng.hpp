#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string_view>

namespace kedit {

// mt19937_64 gives a bit-exact stream on every platform; the float
// conversions are hand-rolled because the std distributions are
// implementation-defined.
class rng {
public:
    explicit rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // [0, 1)
    double uniform() {
        return double(gen_() >> 11) * 0x1.0p-53;
    }

    // (0, 1]
    double uniform_pos() {
        return double((gen_() >> 11) + 1) * 0x1.0p-53;
    }

    // Box-Muller, no caching so the stream stays a pure function of call order
    double gaussian() {
        const double u1 = uniform_pos();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    // uniform in [0, n), n > 0; multiply-shift keeps it branch-free and exact
    size_t index(size_t n) {
        return size_t((unsigned __int128)(gen_()) * n >> 64);
    }

private:
    std::mt19937_64 gen_;
};

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Child seed for a named component: stable across runs and platforms.
inline uint64_t seed_for(uint64_t master, std::string_view label) {
    return splitmix64(master ^ fnv1a64(label));
}

inline uint64_t seed_mix(uint64_t a, uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x9e3779b97f4a7c15ULL));
}

} // namespace kedit
