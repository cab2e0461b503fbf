#pragma once

// Deterministic random streams. xoshiro256++ seeded through splitmix64, with
// an explicit Box-Muller normal so draws do not depend on the standard
// library's distribution implementation. Streams derived from (seed, tag)
// pairs make resume-from-checkpoint and per-trajectory generation
// reproducible without carrying generator state around.

#include <cmath>
#include <cstdint>
#include <numbers>

namespace fdm {

inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        std::uint64_t sm = seed;
        for (auto& w : s_) w = splitmix64(sm);
    }

    // Independent stream for (seed, a, b), e.g. (run seed, step index, role).
    static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
        std::uint64_t sm = seed;
        std::uint64_t h = splitmix64(sm);
        sm = h ^ (a * 0x9e3779b97f4a7c15ULL + 0x243f6a8885a308d3ULL);
        h = splitmix64(sm);
        sm = h ^ (b * 0xd1342543de82ef95ULL + 0x452821e638d01377ULL);
        return Rng(splitmix64(sm));
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Standard normal via Box-Muller; caches the second value of each pair.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    void fill_normal(double* out, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) out[i] = normal();
    }

    std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }
    std::uint64_t s_[4] = {};
    double spare_ = 0.0;
    bool have_spare_ = false;
};

} // namespace fdm
