#pragma once

#include <cstdint>
#include <initializer_list>

namespace gridnet {

/// SplitMix64 finalizer; the building block of every counter-based stream.
std::uint64_t splitmix64(std::uint64_t x);

/// Stateless generator: each draw is a pure function of (key, counter).
class CounterRng {
public:
    explicit CounterRng(std::uint64_t key) : key_(key) {}
    std::uint64_t bits(std::uint64_t counter) const;
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform(std::uint64_t counter) const;

private:
    std::uint64_t key_;
};

/// Derives a child seed from a parent seed and a list of indices.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

/// Sequential stream over a CounterRng. Unlike the standard distributions,
/// its draws are identical on every platform.
class StreamRng {
public:
    explicit StreamRng(std::uint64_t seed) : rng_(seed) {}
    std::uint64_t bits() { return rng_.bits(counter_++); }
    double uniform() { return rng_.uniform(counter_++); }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi);
    bool bernoulli(double p) { return uniform() < p; }
    /// Standard normal via Box-Muller (one draw per call).
    double normal();

private:
    CounterRng rng_;
    std::uint64_t counter_ = 0;
};

}  // namespace gridnet
