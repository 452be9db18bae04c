#pragma once
// Deterministic random numbers.
//
// All randomness in the project flows through this wrapper.  Distributions
// are implemented by hand on top of the raw mt19937_64 stream so that results
// depend only on the seed, not on standard-library internals.  Child streams
// are derived with a splitmix64 hash of (seed, stream label), which lets
// callers build per-step / per-utterance generators without consuming state
// from the parent (important when two training runs must see identical data
// while differing in an unrelated hyperparameter).

#include <cmath>
#include <cstdint>
#include <random>

#include "mstr/common.h"

namespace mstr {

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// Hash a seed together with up to three stream labels into a new seed.
inline uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t h = splitmix64(seed ^ 0x6a09e667f3bcc909ull);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ b);
    h = splitmix64(h ^ c);
    return h;
}

class Rng {
  public:
    explicit Rng(uint64_t seed) : seed_(seed), gen_(seed) {}

    uint64_t seed() const { return seed_; }

    uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Inclusive integer range, rejection-sampled to avoid modulo bias.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        check(lo <= hi, "Rng::uniform_int: empty range");
        uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t r;
        do {
            r = gen_();
        } while (r >= limit);
        return lo + static_cast<int64_t>(r % span);
    }

    // Standard normal via Box-Muller; consumes exactly two uniforms.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Independent child generator keyed by a stream label; does not consume
    // state from this generator.  Equal labels give equal children.
    Rng fork(uint64_t stream) const { return Rng(derive_seed(seed_, stream)); }

  private:
    uint64_t seed_;
    std::mt19937_64 gen_;
};

}  // namespace mstr
