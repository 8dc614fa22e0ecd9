#pragma once

#include <cstdint>
#include <vector>

#include "gridnet/grid_spec.hpp"
#include "gridnet/rng.hpp"

namespace gridnet {

/// Total-dropout gates r_{i,j} ~ Bernoulli(p), one per grid position.
/// Only the residual unit is gated; identity and vertical paths never are.
struct DropMask {
    int streams = 0;
    int columns = 0;
    double keep_p = 1.0;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
    std::vector<bool> keep;

    bool kept(int i, int j) const { return keep[static_cast<std::size_t>(i) * columns + j]; }
    static DropMask all_keep(const GridSpec& spec);
    std::size_t count_kept() const;
};

/// Samples the gates for training step `step`. Pure in (spec shape, p, seed, step).
DropMask sample_drop_mask(const GridSpec& spec, double keep_p, std::uint64_t seed, std::uint64_t step = 0);

}  // namespace gridnet
