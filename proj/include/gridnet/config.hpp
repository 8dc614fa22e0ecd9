#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridnet/grid_spec.hpp"
#include "gridnet/scene.hpp"
#include "gridnet/train.hpp"

namespace gridnet {

/// Synthetic dataset definition: scene k of a split is generated from
/// derive_seed(split seed, k).
struct DataConfig {
    int scene_width = 128;
    int scene_height = 128;
    int max_shapes = 6;
    int train_scenes = 128;
    int eval_scenes = 32;
    std::uint64_t train_seed = 1;
    std::uint64_t eval_seed = 2;
};

struct RunConfig {
    GridSpec grid;
    /// Preset the mask was built from; empty when given explicitly.
    std::string mask_preset = "full";
    DataConfig data;
    AugmentConfig augment;
    TrainConfig train;
    AdamConfig adam;
    std::vector<double> scales = {1.0};
    std::string output_dir = "run";
    std::uint64_t seed = 0;
    int threads = 1;

    /// Cross-field checks; throws std::invalid_argument.
    void validate() const;
};

/// Desk-scale defaults: 5 streams, 2 Sub + 2 Up columns, F_0 = 8, four classes.
RunConfig default_run_config();

nlohmann::ordered_json spec_to_json(const GridSpec& spec);
/// Strict: unknown keys and wrong types are rejected. "mask" is either a
/// preset name or {"residual": [[...]], "vertical": [[...]]}.
GridSpec spec_from_json(const nlohmann::json& j, std::string* preset_out = nullptr);

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Fields absent from `j` keep their defaults; unknown keys throw.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

}  // namespace gridnet
