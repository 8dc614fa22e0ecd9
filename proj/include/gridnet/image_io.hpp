#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace gridnet {

/// 8-bit interleaved RGB raster.
struct RgbImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;
};

/// Single-channel raster; maxval 255 or 65535.
struct GrayImage {
    int width = 0;
    int height = 0;
    int maxval = 255;
    std::vector<std::uint16_t> values;
};

/// Binary P6. Throws std::runtime_error on I/O failure.
void write_ppm(const std::string& path, const RgbImage& image);
/// Binary P5; 16-bit big-endian samples when maxval > 255.
void write_pgm(const std::string& path, const GrayImage& image);
/// Reads P6 (binary) or P3 (ASCII) with maxval up to 65535, scaled to 8 bits.
RgbImage read_ppm(const std::string& path);
/// Reads P5 or P2.
GrayImage read_pgm(const std::string& path);

/// Planar float [0,1] (3 x H x W) to interleaved 8-bit RGB, and back.
RgbImage to_rgb8(const std::vector<float>& planar, int width, int height);
std::vector<float> to_planar(const RgbImage& image);

/// Integer map to PGM, picking maxval 255 when every value fits.
GrayImage to_gray(const std::vector<int>& values, int width, int height);

}  // namespace gridnet
