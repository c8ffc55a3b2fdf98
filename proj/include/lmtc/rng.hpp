#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

namespace lmtc {

/// xoshiro256** 1.0 (Blackman & Vigna), seeded through splitmix64.
/// All generation in this project goes through this generator so that
/// corpora and training runs are reproducible across platforms; std::
/// distributions are avoided because their output is not standardized.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    static uint64_t splitmix64(uint64_t& x) {
        x += 0x9e3779b97f4a7c15ULL;
        uint64_t z = x;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    /// Derive an independent stream from a seed and a list of stream ids.
    /// Used to give each document / step its own deterministic generator
    /// regardless of worker scheduling.
    static Rng derive(uint64_t seed, std::initializer_list<uint64_t> ids) {
        uint64_t x = seed;
        for (uint64_t id : ids) x = splitmix64(x) ^ (id * 0x9e3779b97f4a7c15ULL);
        return Rng(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform in [0, 1) with 53-bit resolution.
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n) via rejection (unbiased).
    uint64_t next_below(uint64_t n) {
        const uint64_t threshold = (0 - n) % n;
        for (;;) {
            uint64_t r = next_u64();
            if (r >= threshold) return r % n;
        }
    }

    int next_int(int lo, int hi_inclusive) {
        return lo + static_cast<int>(next_below(static_cast<uint64_t>(hi_inclusive - lo + 1)));
    }

    bool next_bernoulli(double p) { return next_double() < p; }

    /// Standard normal via Box-Muller (no cached spare, keeps state simple).
    double next_normal() {
        double u1 = next_double(), u2 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    /// Normal truncated to +/- 2 sigma (resampling), sigma-scaled.
    double next_truncated_normal(double sigma) {
        for (;;) {
            double z = next_normal();
            if (z >= -2.0 && z <= 2.0) return z * sigma;
        }
    }

    /// Knuth's product method; fine for the small means used here.
    int next_poisson(double mean) {
        const double limit = std::exp(-mean);
        int k = 0;
        double p = 1.0;
        do {
            ++k;
            p *= next_double();
        } while (p > limit);
        return k - 1;
    }

    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (size_t i = items.size(); i > 1; --i) {
            size_t j = next_below(i);
            std::swap(items[i - 1], items[j]);
        }
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> state_;
};

}  // namespace lmtc
