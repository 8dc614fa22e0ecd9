#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <json.hpp>

#include "gridnet/grid_model.hpp"
#include "gridnet/train.hpp"

namespace gridnet {

inline constexpr char kCheckpointMagic[4] = {'G', 'R', 'D', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    /// Number of completed epochs.
    int epoch = 0;
    /// Free-form record of the seeds the run was started from.
    nlohmann::ordered_json seeds = nlohmann::ordered_json::object();
};

/// Layout: "GRDN", u32 version, u64 header length, JSON header, then
/// little-endian f32 parameters and buffers in canonical order, then the f64
/// first moments and f64 second moments of every parameter.
void save_checkpoint(const std::string& path, const GridModel<float>& model, const OptimState& opt,
                     const CheckpointMeta& meta);

struct LoadedCheckpoint {
    GridModel<float> model;
    OptimState opt;
    CheckpointMeta meta;
    nlohmann::json header;
};

/// Verifies magic, version and size. When `expected` is given, the stored
/// shape table must match a grid built from it; the error names the first
/// mismatching block.
LoadedCheckpoint load_checkpoint(const std::string& path, const GridSpec* expected = nullptr);

}  // namespace gridnet
