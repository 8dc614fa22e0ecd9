#include "gridnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gridnet/dropout.hpp"
#include "gridnet/ops.hpp"

namespace gridnet {

double relative_error(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace {

struct Probe {
    double loss = 0.0;
    std::uint64_t kinks = 0;
};

Probe evaluate(const std::function<Tensor<double>(Tape<double>&)>& loss_fn) {
    Tape<double> tape;
    tape.track_kinks(true);
    const Tensor<double> loss = loss_fn(tape);
    return {loss.values()[0], tape.kink_signature()};
}

}  // namespace

GradcheckReport finite_diff_gradcheck(const std::function<Tensor<double>(Tape<double>&)>& loss_fn,
                                      std::span<const GradcheckTarget> targets, const GradcheckOptions& opts) {
    if (targets.empty()) {
        throw std::invalid_argument("gradcheck: no target tensors");
    }
    for (const auto& t : targets) {
        t.tensor->zero_grad();
    }
    std::uint64_t base_kinks = 0;
    {
        Tape<double> tape;
        tape.track_kinks(true);
        const Tensor<double> loss = loss_fn(tape);
        base_kinks = tape.kink_signature();
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (const auto& t : targets) {
        const auto g = std::as_const(*t.tensor).grad();
        analytic.emplace_back(g.begin(), g.end());
        if (analytic.back().empty()) {
            analytic.back().assign(t.tensor->numel(), 0.0);
        }
    }

    GradcheckReport report;
    const CounterRng rng(derive_seed(opts.seed, {0x67726164ULL}));
    std::uint64_t draw = 0;
    while (report.checked < opts.samples && report.skipped <= opts.max_skips) {
        const std::size_t which = rng.bits(draw++) % targets.size();
        Tensor<double>& tensor = *targets[which].tensor;
        const std::size_t idx = rng.bits(draw++) % tensor.numel();
        double& slot = tensor.values()[idx];
        const double saved = slot;
        slot = saved + opts.step;
        const Probe plus = evaluate(loss_fn);
        slot = saved - opts.step;
        const Probe minus = evaluate(loss_fn);
        slot = saved;
        if (plus.kinks != base_kinks || minus.kinks != base_kinks) {
            ++report.skipped;
            continue;
        }
        const double numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
        const double err = relative_error(analytic[which][idx], numeric);
        if (err > report.max_rel_error || report.checked == 0) {
            report.max_rel_error = std::max(report.max_rel_error, err);
            report.worst = targets[which].name + "[" + std::to_string(idx) + "]";
        }
        ++report.checked;
    }
    report.passed = report.checked == opts.samples && report.max_rel_error < opts.tolerance;
    return report;
}

GradcheckReport gradcheck_grid(GridModel<double>& model, const Tensor<double>& input, std::span<const int> labels,
                               const GradcheckOptions& opts) {
    std::vector<GradcheckTarget> targets;
    for (auto& e : model.named_tensors()) {
        if (e.role == TensorRole::Parameter && !e.frozen) {
            targets.push_back({e.name, e.tensor});
        }
    }
    auto loss_fn = [&](Tape<double>& tape) {
        const ForwardResult<double> out = forward(model, input, Mode::Train, nullptr, &tape);
        return softmax_cross_entropy(out.logits, labels, &tape);
    };
    return finite_diff_gradcheck(loss_fn, targets, opts);
}

}  // namespace gridnet
