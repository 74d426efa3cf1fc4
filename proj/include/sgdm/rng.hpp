#pragma once

#include <cmath>
#include <cstdint>

namespace sgdm {

// 64-bit mix used both as a hash and as the stream-derivation function.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return mix64(a ^ mix64(b + 0x9e3779b97f4a7c15ULL));
}

// Deterministic, splittable generator (splitmix64 core). Every consumer takes
// an explicit Rng so results are a pure function of the seeds; independent
// streams are derived with fork() and never share state.
class Rng {
public:
    explicit Rng(uint64_t seed) : state_(mix64(seed)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ULL;
        uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). n >= 1.
    int uniform_int(int n) {
        // Rejection-free for our purposes; bias is < 2^-32 for desk-scale n.
        return static_cast<int>(next_u64() % static_cast<uint64_t>(n));
    }

    // Standard normal via Box-Muller; caches the second variate.
    double normal() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform();
        double u2 = uniform();
        double r  = std::sqrt(-2.0 * std::log1p(-u1));
        double a  = 6.283185307179586476925286766559 * u2;
        cache_     = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    // Derives an independent stream identified by tag.
    Rng fork(uint64_t tag) const { return Rng(hash_combine(state_, tag)); }

private:
    uint64_t state_;
    double cache_   = 0.0;
    bool has_cache_ = false;
};

}  // namespace sgdm
