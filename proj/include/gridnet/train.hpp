#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridnet/dropout.hpp"
#include "gridnet/grid_model.hpp"
#include "gridnet/scene.hpp"

namespace gridnet {

struct AdamConfig {
    double lr = 0.01;
    /// Inverse-time decay per step: lr_t = lr / (1 + decay * t).
    double decay = 5e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    /// Use lr * (1 - decay)^t instead of inverse-time decay.
    bool multiplicative_decay = false;

    void validate() const;
};

/// Adam moments for every parameter in canonical order, frozen ones included
/// so that the layout does not depend on the mask.
struct OptimState {
    AdamConfig cfg;
    /// Base learning rate currently in force (switches at the lr drop).
    double base_lr = 0.01;
    std::uint64_t step = 0;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;

    /// Learning rate the next step will use.
    double current_lr() const;
};

template <typename T>
OptimState make_optim_state(const GridModel<T>& model, const AdamConfig& cfg);

template <typename T>
struct AdamTarget {
    Tensor<T>* tensor = nullptr;
    std::string name;
    /// Frozen tensors keep their value; their moments stay zero.
    bool frozen = false;
};

/// Bias-corrected Adam over `targets` (parallel to state.m / state.v).
/// Missing gradients count as zero; gradients are zeroed after the update.
/// A non-finite gradient aborts the step before anything changes and names
/// the offending tensor.
template <typename T>
void adam_update(std::span<const AdamTarget<T>> targets, OptimState& state);

template <typename T>
void adam_step(GridModel<T>& model, OptimState& state);

struct TrainConfig {
    int batch_size = 4;
    int epochs = 80;
    int lr_drop_epoch = 80;
    double lr_after_drop = 0.001;
    /// Keep probability of each residual unit (1 disables total dropout).
    double dropout_p = 0.9;
    std::uint64_t seed = 0;
    /// Checkpoint period in epochs; 0 writes only the final checkpoint.
    int snapshot_every = 0;
    AugmentConfig augment;

    void validate() const;
};

/// Assembled training batch.
struct Batch {
    Tensor<float> images;
    std::vector<int> labels;
};

/// Patches for the scenes at `indices`, each drawn from the stream
/// (seed, batch_index, k).
Batch make_batch(std::span<const Scene> scenes, std::span<const std::size_t> indices, const AugmentConfig& augment,
                 std::uint64_t seed, std::uint64_t batch_index);

/// Forward, loss, backward and one Adam step. Returns nullopt (no step taken)
/// when every label of the batch is ignored.
std::optional<double> train_step(GridModel<float>& model, const Batch& batch, const DropMask* drop, OptimState& opt);

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;
    int steps = 0;
    int skipped_batches = 0;
    double base_lr = 0.0;
    double lr_first = 0.0;
    double lr_last = 0.0;
    std::uint64_t global_step = 0;

    nlohmann::ordered_json to_json() const;
};

/// Base learning rate in force during `epoch`.
double base_lr_for_epoch(const TrainConfig& cfg, const AdamConfig& adam, int epoch);

/// Permutation of [0, n) used for `epoch`.
std::vector<std::size_t> epoch_order(std::uint64_t seed, int epoch, std::size_t n);

/// One pass over `scenes` in the order drawn for `epoch`. Every random draw
/// is keyed on (seed, epoch, batch), so resuming at an epoch boundary
/// reproduces an uninterrupted run.
EpochLog train_epoch(GridModel<float>& model, std::span<const Scene> scenes, const TrainConfig& cfg, OptimState& opt,
                     int epoch);

}  // namespace gridnet
