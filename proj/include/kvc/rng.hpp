#pragma once

#include <cstdint>
#include <random>

namespace kvc {

// Seeded generator used for every stochastic choice in the library (span
// placement, Bernoulli masks, window sampling, nucleus draws, init).
//
// The engine is std::mt19937_64, whose output sequence is fixed by the C++
// standard. The std:: distributions are not portable across standard
// libraries, so all conversions below are written out explicitly.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(mix(seed)) {}

    // Independent stream for (seed, a, b): used to give each training step /
    // batch row / grid cell its own generator regardless of scheduling.
    static Rng stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

    std::uint64_t seed() const noexcept { return seed_; }

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 bits of resolution.
    double uniform();

    // Uniform integer in [0, n); n must be > 0. Rejection sampling, unbiased.
    std::uint64_t below(std::uint64_t n);

    // Uniform integer in [lo, hi] inclusive.
    std::int64_t range(std::int64_t lo, std::int64_t hi);

    bool bernoulli(double p) { return uniform() < p; }

    // Box-Muller; no cached spare so the draw count per call is fixed at two.
    double normal(double mean = 0.0, double stddev = 1.0);

    static std::uint64_t mix(std::uint64_t x);

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
};

}  // namespace kvc
