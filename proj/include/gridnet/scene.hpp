#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridnet/rng.hpp"

namespace gridnet {

enum class ShapeKind { Rectangle, Disk, Triangle };

std::string to_string(ShapeKind kind);

struct ShapeRecord {
    ShapeKind kind = ShapeKind::Rectangle;
    int cls = 1;
    int instance = 1;
    /// Bounding box of the drawn shape, before occlusion.
    int x0 = 0;
    int y0 = 0;
    int x1 = 0;
    int y1 = 0;
    float rgb[3] = {0, 0, 0};
};

/// Synthetic segmentation scene. `image` is planar RGB (3 x H x W) in
/// [0,1]; `instances` is 0 for background and 1.. for drawn shapes.
struct Scene {
    int width = 0;
    int height = 0;
    int num_classes = 0;
    std::uint64_t seed = 0;
    std::vector<float> image;
    std::vector<int> labels;
    std::vector<int> instances;
    std::vector<ShapeRecord> shapes;

    std::size_t pixels() const { return static_cast<std::size_t>(width) * static_cast<std::size_t>(height); }
    /// Class of every instance id present in the maps; index 0 is unused.
    std::vector<int> instance_classes() const;
};

/// Draws rectangles, disks and triangles (one kind per class, cycling) with
/// class-correlated colors, per-instance color jitter and pixel noise.
/// Later shapes occlude earlier ones. Pure in its arguments.
Scene generate_scene(std::uint64_t seed, int width, int height, int num_classes, int max_shapes);

struct AugmentConfig {
    int crop_min = 48;
    int crop_max = 128;
    int out_size = 64;
    double hflip_p = 0.5;

    /// Throws when the crop range does not fit a scene of the given size.
    void validate(int scene_width, int scene_height) const;
};

struct Patch {
    int size = 0;
    std::vector<float> image;  // 3 x size x size
    std::vector<int> labels;
    std::vector<int> instances;
    int crop_x = 0;
    int crop_y = 0;
    int crop_side = 0;
    bool flipped = false;
};

/// Random square crop resized to `out_size` (bilinear for the image, nearest
/// for label and instance maps), then an optional horizontal flip applied
/// to all three maps.
Patch random_patch(const Scene& scene, const AugmentConfig& cfg, StreamRng& rng);

/// Crop at a fixed square window, no flip; used by random_patch.
Patch crop_resize(const Scene& scene, int x, int y, int side, int out_size);

/// Mirrors a patch horizontally in place.
void hflip(Patch& patch);

/// Half-pixel-centred bilinear resampling of planar channels.
std::vector<float> resize_bilinear(const std::vector<float>& src, int channels, int h, int w, int out_h, int out_w);
/// Nearest-neighbour resampling of an integer map.
std::vector<int> resize_nearest(const std::vector<int>& src, int h, int w, int out_h, int out_w);

/// Scene seeds of a dataset: seed k is derived from (dataset seed, k).
std::vector<std::uint64_t> dataset_seeds(std::uint64_t dataset_seed, int count);

}  // namespace gridnet
