#pragma once

#include <cmath>
#include <cstdint>

namespace clustrial {

// splitmix64 step; used for seed expansion and stream derivation.
inline std::uint64_t splitmix64_next(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Stream seed derived from a master seed and up to two indices
/// (counter-based splitting; replication r uses derive_seed(master, r)).
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0) {
    std::uint64_t s = master ^ ((a + 1) * 0x9e3779b97f4a7c15ULL);
    const std::uint64_t v = splitmix64_next(s);
    s = v ^ ((b + 1) * 0xbf58476d1ce4e5b9ULL);
    return splitmix64_next(s);
}

/// Self-contained xoshiro256++ generator with explicit samplers, so that
/// generated datasets are bitwise reproducible across platforms and
/// independent of the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& word : state_) word = splitmix64_next(sm);
    }

    /// Derive an independent stream from (master, stream index).
    /// Replication r of a simulation uses split(master_seed, r).
    static Rng split(std::uint64_t master, std::uint64_t stream) {
        std::uint64_t sm = master;
        std::uint64_t base = splitmix64_next(sm);
        std::uint64_t mixed = base ^ (stream + 0x9e3779b97f4a7c15ULL) * 0xda942042e4dd58b5ULL;
        return Rng(mixed);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Standard normal via Box-Muller; the second variate of each pair is cached.
    double normal() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        cached_ = r * std::sin(theta);
        have_cached_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double sd) { return mean + sd * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    /// Binomial by summing Bernoulli trials; intended for small n.
    int binomial(int n, double p) {
        int count = 0;
        for (int i = 0; i < n; ++i) count += bernoulli(p) ? 1 : 0;
        return count;
    }

    /// Three-category draw: returns 0 with probability p0, 1 with p1, else 2.
    int categorical3(double p0, double p1) {
        const double u = uniform();
        if (u < p0) return 0;
        if (u < p0 + p1) return 1;
        return 2;
    }

private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t state_[4];
    bool have_cached_ = false;
    double cached_ = 0.0;
};

} // namespace clustrial
