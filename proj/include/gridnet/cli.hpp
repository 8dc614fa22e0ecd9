#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "gridnet/grid_spec.hpp"
#include "gridnet/image_io.hpp"

namespace gridnet {

/// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

/// Deterministic report of a grid: stream shapes, evaluation order and the
/// exact and approximate parameter and activation counts.
nlohmann::ordered_json grid_report(const GridSpec& spec, std::pair<int, int> input_hw);

/// Fixed rendering palette; class c uses entry c modulo its size.
const std::vector<std::array<std::uint8_t, 3>>& segmentation_palette();
RgbImage render_segmentation(const std::vector<int>& labels, int width, int height);

/// Entry point of the `gridnet` tool. Returns an ExitCode.
int run_cli(int argc, char** argv);

}  // namespace gridnet
