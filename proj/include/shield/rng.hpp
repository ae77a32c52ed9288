#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace shield {

// Deterministic PRNG: xoshiro256++ seeded via SplitMix64.
// All randomness in the project flows through this generator so that a
// (seed, call-sequence) pair fully determines every artifact.
class Rng {
  public:
    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) {
            // SplitMix64 step
            x += 0x9e3779b97f4a7c15ULL;
            uint64_t z = x;
            z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
            z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
            s = z ^ (z >> 31);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // Uniform in [-scale, scale).
    double uniform_sym(double scale) {
        return (2.0 * uniform() - 1.0) * scale;
    }

    // Standard normal via Box-Muller (pairs cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    // Uniform integer in [0, n). n must be > 0.
    uint64_t below(uint64_t n) {
        // Rejection sampling keeps the draw exactly uniform.
        const uint64_t limit = n * (UINT64_MAX / n);
        uint64_t v = next_u64();
        while (v >= limit) v = next_u64();
        return v % n;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Derives an independent stream, e.g. one per sample id.
    Rng fork(uint64_t stream) {
        return Rng(next_u64() ^ (stream * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL));
    }

  private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4]{};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace shield
