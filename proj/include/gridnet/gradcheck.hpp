#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "gridnet/grid_model.hpp"
#include "gridnet/tensor.hpp"

namespace gridnet {

struct GradcheckOptions {
    int samples = 100;
    double step = 1e-5;
    double tolerance = 1e-4;
    std::uint64_t seed = 0;
    /// Probes that flip a relu mask are skipped and redrawn, at most this many times in total.
    int max_skips = 1000;
};

struct GradcheckReport {
    double max_rel_error = 0.0;
    int checked = 0;
    int skipped = 0;
    std::string worst;  // "<name>[index]" of the largest error
    bool passed = false;
};

struct GradcheckTarget {
    std::string name;
    Tensor<double>* tensor = nullptr;
};

/// |a-b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

/// Compares reverse-mode gradients of `loss_fn` against central differences
/// on randomly drawn coordinates of `targets`. `loss_fn` must record onto
/// the tape it is given and return a scalar.
GradcheckReport finite_diff_gradcheck(const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                                      std::span<const GradcheckTarget> targets, const GradcheckOptions& opts);

/// Gradcheck of the softmax cross-entropy of a whole grid in train mode
/// (batch statistics, no dropout) over all of its trainable parameters.
GradcheckReport gradcheck_grid(GridModel<double>& model, const Tensor<double>& input, std::span<const int> labels,
                               const GradcheckOptions& opts);

}  // namespace gridnet
