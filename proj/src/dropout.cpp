#include "gridnet/dropout.hpp"

#include <algorithm>
#include <stdexcept>

namespace gridnet {

DropMask DropMask::all_keep(const GridSpec& spec) {
    DropMask m;
    m.streams = spec.n_streams;
    m.columns = spec.n_columns();
    m.keep.assign(static_cast<std::size_t>(m.streams) * m.columns, true);
    return m;
}

std::size_t DropMask::count_kept() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
}

DropMask sample_drop_mask(const GridSpec& spec, double keep_p, std::uint64_t seed, std::uint64_t step) {
    if (!(keep_p >= 0.0 && keep_p <= 1.0)) {
        throw std::invalid_argument("sample_drop_mask: p must lie in [0,1]");
    }
    DropMask m = DropMask::all_keep(spec);
    m.keep_p = keep_p;
    m.seed = seed;
    m.step = step;
    const CounterRng rng(derive_seed(seed, {step}));
    for (std::size_t k = 0; k < m.keep.size(); ++k) {
        m.keep[k] = rng.uniform(k) < keep_p;
    }
    return m;
}

}  // namespace gridnet
