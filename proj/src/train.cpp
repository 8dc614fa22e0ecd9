#include "gridnet/train.hpp"

#include <cmath>
#include <stdexcept>

#include "gridnet/ops.hpp"

namespace gridnet {

void AdamConfig::validate() const {
    if (!(lr >= 0.0) || !(decay >= 0.0) || !(eps > 0.0)) {
        throw std::invalid_argument("adam: lr and decay must be non-negative, eps positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("adam: betas must lie in [0,1)");
    }
    if (multiplicative_decay && decay >= 1.0) {
        throw std::invalid_argument("adam: multiplicative decay must be below 1");
    }
}

double OptimState::current_lr() const {
    const double t = static_cast<double>(step);
    if (cfg.multiplicative_decay) {
        return base_lr * std::pow(1.0 - cfg.decay, t);
    }
    return base_lr / (1.0 + cfg.decay * t);
}

template <typename T>
OptimState make_optim_state(const GridModel<T>& model, const AdamConfig& cfg) {
    cfg.validate();
    OptimState s;
    s.cfg = cfg;
    s.base_lr = cfg.lr;
    for (const auto& e : model.named_tensors()) {
        if (e.role == TensorRole::Parameter) {
            s.m.emplace_back(e.tensor->numel(), 0.0);
            s.v.emplace_back(e.tensor->numel(), 0.0);
        }
    }
    return s;
}

template <typename T>
void adam_update(std::span<const AdamTarget<T>> targets, OptimState& state) {
    if (targets.size() != state.m.size() || targets.size() != state.v.size()) {
        throw std::invalid_argument("adam: optimizer state holds " + std::to_string(state.m.size()) +
                                    " tensors, got " + std::to_string(targets.size()));
    }
    for (std::size_t k = 0; k < targets.size(); ++k) {
        const AdamTarget<T>& t = targets[k];
        if (t.tensor->numel() != state.m[k].size()) {
            throw std::invalid_argument("adam: moment size mismatch for " + t.name);
        }
        if (t.frozen || !t.tensor->has_grad()) {
            continue;
        }
        for (T g : std::as_const(*t.tensor).grad()) {
            if (!std::isfinite(static_cast<double>(g))) {
                throw std::runtime_error("adam: non-finite gradient in " + t.name);
            }
        }
    }
    const double lr = state.current_lr();
    ++state.step;
    const double t = static_cast<double>(state.step);
    const double b1 = state.cfg.beta1;
    const double b2 = state.cfg.beta2;
    const double c1 = 1.0 - std::pow(b1, t);
    const double c2 = 1.0 - std::pow(b2, t);
    for (std::size_t k = 0; k < targets.size(); ++k) {
        Tensor<T>& p = *targets[k].tensor;
        if (targets[k].frozen) {
            if (p.has_grad()) {
                p.zero_grad();
            }
            continue;
        }
        // A tensor that took no part in this step (a dropped residual unit)
        // still gets the zero-gradient update, so the result does not depend
        // on whether its gradient slot was ever allocated.
        std::span<T> g = p.grad();
        std::span<T> w = p.values();
        std::vector<double>& m = state.m[k];
        std::vector<double>& v = state.v[k];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = g[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            const double mhat = m[i] / c1;
            const double vhat = v[i] / c2;
            w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + state.cfg.eps));
        }
        p.zero_grad();
    }
}

template <typename T>
void adam_step(GridModel<T>& model, OptimState& state) {
    std::vector<AdamTarget<T>> targets;
    for (auto& e : model.named_tensors()) {
        if (e.role == TensorRole::Parameter) {
            targets.push_back({e.tensor, e.name, e.frozen});
        }
    }
    adam_update<T>(targets, state);
}

void TrainConfig::validate() const {
    if (batch_size < 1) {
        throw std::invalid_argument("train: batch_size must be positive");
    }
    if (epochs < 0) {
        throw std::invalid_argument("train: epochs must be non-negative");
    }
    if (lr_drop_epoch < 0 || lr_drop_epoch > epochs) {
        throw std::invalid_argument("train: need 0 <= lr_drop_epoch <= epochs");
    }
    if (!(lr_after_drop >= 0.0)) {
        throw std::invalid_argument("train: lr_after_drop must be non-negative");
    }
    if (!(dropout_p >= 0.0 && dropout_p <= 1.0)) {
        throw std::invalid_argument("train: dropout_p must lie in [0,1]");
    }
    if (snapshot_every < 0) {
        throw std::invalid_argument("train: snapshot_every must be non-negative");
    }
}

Batch make_batch(std::span<const Scene> scenes, std::span<const std::size_t> indices, const AugmentConfig& augment,
                 std::uint64_t seed, std::uint64_t batch_index) {
    const int n = static_cast<int>(indices.size());
    const int s = augment.out_size;
    const std::size_t plane = static_cast<std::size_t>(s) * s;
    Batch batch;
    batch.images = Tensor<float>(Shape{n, 3, s, s});
    batch.labels.resize(static_cast<std::size_t>(n) * plane);
    float* dst = batch.images.data();
    for (int k = 0; k < n; ++k) {
        StreamRng rng(derive_seed(seed, {0x70617463ULL, batch_index, static_cast<std::uint64_t>(k)}));
        const Patch patch = random_patch(scenes[indices[k]], augment, rng);
        std::copy(patch.image.begin(), patch.image.end(), dst + static_cast<std::size_t>(k) * 3 * plane);
        std::copy(patch.labels.begin(), patch.labels.end(), batch.labels.begin() + static_cast<std::ptrdiff_t>(k * plane));
    }
    return batch;
}

std::optional<double> train_step(GridModel<float>& model, const Batch& batch, const DropMask* drop, OptimState& opt) {
    bool any = false;
    for (int l : batch.labels) {
        if (l != kIgnoreLabel) {
            any = true;
            break;
        }
    }
    if (!any) {
        return std::nullopt;
    }
    Tape<float> tape;
    const ForwardResult<float> out = forward(model, batch.images, Mode::Train, drop, &tape);
    const Tensor<float> loss = softmax_cross_entropy(out.logits, std::span<const int>(batch.labels), &tape);
    tape.backward(loss);
    const double value = loss.values()[0];
    if (!std::isfinite(value)) {
        model.zero_grad();
        throw std::runtime_error("train: non-finite loss at step " + std::to_string(opt.step));
    }
    adam_step(model, opt);
    return value;
}

nlohmann::ordered_json EpochLog::to_json() const {
    return {{"epoch", epoch},     {"mean_loss", mean_loss}, {"steps", steps},     {"skipped_batches", skipped_batches},
            {"base_lr", base_lr}, {"lr_first", lr_first},   {"lr_last", lr_last}, {"global_step", global_step}};
}

double base_lr_for_epoch(const TrainConfig& cfg, const AdamConfig& adam, int epoch) {
    return epoch < cfg.lr_drop_epoch ? adam.lr : cfg.lr_after_drop;
}

std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t k = 0; k < n; ++k) {
        order[k] = k;
    }
    StreamRng rng(derive_seed(seed, {0x7065726dULL, static_cast<std::uint64_t>(epoch)}));
    for (std::size_t k = n; k > 1; --k) {
        std::swap(order[k - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(k - 1)))]);
    }
    return order;
}

EpochLog train_epoch(GridModel<float>& model, std::span<const Scene> scenes, const TrainConfig& cfg, OptimState& opt,
                     int epoch) {
    cfg.validate();
    if (scenes.empty()) {
        throw std::invalid_argument("train_epoch: empty dataset");
    }
    EpochLog log;
    log.epoch = epoch;
    opt.base_lr = base_lr_for_epoch(cfg, opt.cfg, epoch);
    log.base_lr = opt.base_lr;
    const std::vector<std::size_t> order = epoch_order(cfg.seed, epoch, scenes.size());
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    const std::size_t n_batches = (order.size() + bs - 1) / bs;
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n_batches; ++b) {
        const std::uint64_t batch_index = static_cast<std::uint64_t>(epoch) * n_batches + b;
        const std::size_t lo = b * bs;
        const std::size_t hi = std::min(order.size(), lo + bs);
        const Batch batch =
            make_batch(scenes, std::span<const std::size_t>(order).subspan(lo, hi - lo), cfg.augment, cfg.seed, batch_index);
        const DropMask drop = sample_drop_mask(model.spec(), cfg.dropout_p, cfg.seed, batch_index);
        const double lr = opt.current_lr();
        const std::optional<double> loss = train_step(model, batch, &drop, opt);
        if (!loss) {
            ++log.skipped_batches;
            continue;
        }
        if (log.steps == 0) {
            log.lr_first = lr;
        }
        log.lr_last = lr;
        loss_sum += *loss;
        ++log.steps;
    }
    log.mean_loss = log.steps > 0 ? loss_sum / log.steps : 0.0;
    log.global_step = opt.step;
    return log;
}

template OptimState make_optim_state(const GridModel<float>&, const AdamConfig&);
template OptimState make_optim_state(const GridModel<double>&, const AdamConfig&);
template void adam_update(std::span<const AdamTarget<float>>, OptimState&);
template void adam_update(std::span<const AdamTarget<double>>, OptimState&);
template void adam_step(GridModel<float>&, OptimState&);
template void adam_step(GridModel<double>&, OptimState&);

}  // namespace gridnet
