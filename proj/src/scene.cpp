#include "gridnet/scene.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace gridnet {

std::string to_string(ShapeKind kind) {
    switch (kind) {
        case ShapeKind::Rectangle: return "rectangle";
        case ShapeKind::Disk: return "disk";
        case ShapeKind::Triangle: return "triangle";
    }
    return "rectangle";
}

std::vector<int> Scene::instance_classes() const {
    int max_id = 0;
    for (int id : instances) {
        max_id = std::max(max_id, id);
    }
    std::vector<int> out(static_cast<std::size_t>(max_id) + 1, 0);
    for (std::size_t p = 0; p < instances.size(); ++p) {
        out[instances[p]] = labels[p];
    }
    return out;
}

namespace {

// Base colors per class; classes beyond the table reuse it with a shift.
constexpr float kClassColors[][3] = {
    {0.85f, 0.20f, 0.15f}, {0.15f, 0.70f, 0.25f}, {0.20f, 0.35f, 0.90f}, {0.90f, 0.80f, 0.15f},
    {0.75f, 0.25f, 0.80f}, {0.10f, 0.80f, 0.80f}, {0.95f, 0.55f, 0.10f}, {0.55f, 0.55f, 0.55f},
};
constexpr int kNumColors = sizeof(kClassColors) / sizeof(kClassColors[0]);

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

double edge(double ax, double ay, double bx, double by, double px, double py) {
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax);
}

}  // namespace

Scene generate_scene(std::uint64_t seed, int width, int height, int num_classes, int max_shapes) {
    if (num_classes < 2) {
        throw std::invalid_argument("generate_scene: need at least 2 classes");
    }
    if (width < 1 || height < 1) {
        throw std::invalid_argument("generate_scene: empty scene");
    }
    if (max_shapes < 0) {
        throw std::invalid_argument("generate_scene: negative max_shapes");
    }
    Scene scene;
    scene.width = width;
    scene.height = height;
    scene.num_classes = num_classes;
    scene.seed = seed;
    const std::size_t plane = scene.pixels();
    scene.labels.assign(plane, 0);
    scene.instances.assign(plane, 0);
    scene.image.assign(3 * plane, 0.0f);

    StreamRng rng(derive_seed(seed, {1}));
    // Background: a dim, slightly tinted gray with a horizontal gradient.
    const double bg = rng.uniform(0.25, 0.45);
    const double tint[3] = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05)};
    const double slope = rng.uniform(-0.1, 0.1);
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                const double g = slope * (static_cast<double>(x) / width - 0.5);
                scene.image[c * plane + static_cast<std::size_t>(y) * width + x] = clamp01(bg + tint[c] + g);
            }
        }
    }

    const int n_shapes = max_shapes == 0 ? 0 : rng.uniform_int((max_shapes + 1) / 2, max_shapes);
    // The first C-1 shapes take every object class once, in random order.
    std::vector<int> classes(static_cast<std::size_t>(num_classes - 1));
    std::iota(classes.begin(), classes.end(), 1);
    for (int k = static_cast<int>(classes.size()) - 1; k > 0; --k) {
        std::swap(classes[k], classes[rng.uniform_int(0, k)]);
    }
    const double side = std::min(width, height);
    for (int s = 0; s < n_shapes; ++s) {
        ShapeRecord rec;
        rec.instance = s + 1;
        rec.cls = s < static_cast<int>(classes.size()) ? classes[s] : rng.uniform_int(1, num_classes - 1);
        rec.kind = static_cast<ShapeKind>((rec.cls - 1) % 3);
        const float* base = kClassColors[(rec.cls - 1) % kNumColors];
        const double shift = ((rec.cls - 1) / kNumColors) * 0.15;
        for (int c = 0; c < 3; ++c) {
            rec.rgb[c] = clamp01(base[c] - shift + rng.uniform(-0.08, 0.08));
        }
        const double cx = rng.uniform(0.0, width);
        const double cy = rng.uniform(0.0, height);
        const double r = side * rng.uniform(0.10, 0.22);

        double tri[6] = {};
        double hw = r;
        double hh = r;
        if (rec.kind == ShapeKind::Rectangle) {
            hw = r * rng.uniform(0.6, 1.3);
            hh = r * rng.uniform(0.6, 1.3);
        } else if (rec.kind == ShapeKind::Triangle) {
            const double rot = rng.uniform(0.0, 2.0 * std::numbers::pi);
            for (int v = 0; v < 3; ++v) {
                const double a = rot + v * 2.0 * std::numbers::pi / 3.0 + rng.uniform(-0.3, 0.3);
                const double rr = r * rng.uniform(1.0, 1.4);
                tri[2 * v] = cx + rr * std::cos(a);
                tri[2 * v + 1] = cy + rr * std::sin(a);
            }
        }
        rec.x0 = std::max(0, static_cast<int>(std::floor(cx - 1.5 * hw)));
        rec.x1 = std::min(width - 1, static_cast<int>(std::ceil(cx + 1.5 * hw)));
        rec.y0 = std::max(0, static_cast<int>(std::floor(cy - 1.5 * hh)));
        rec.y1 = std::min(height - 1, static_cast<int>(std::ceil(cy + 1.5 * hh)));
        for (int y = rec.y0; y <= rec.y1; ++y) {
            for (int x = rec.x0; x <= rec.x1; ++x) {
                const double px = x + 0.5;
                const double py = y + 0.5;
                bool inside = false;
                switch (rec.kind) {
                    case ShapeKind::Rectangle:
                        inside = std::abs(px - cx) <= hw && std::abs(py - cy) <= hh;
                        break;
                    case ShapeKind::Disk:
                        inside = (px - cx) * (px - cx) + (py - cy) * (py - cy) <= r * r;
                        break;
                    case ShapeKind::Triangle: {
                        const double e0 = edge(tri[0], tri[1], tri[2], tri[3], px, py);
                        const double e1 = edge(tri[2], tri[3], tri[4], tri[5], px, py);
                        const double e2 = edge(tri[4], tri[5], tri[0], tri[1], px, py);
                        inside = (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
                        break;
                    }
                }
                if (!inside) {
                    continue;
                }
                const std::size_t p = static_cast<std::size_t>(y) * width + x;
                scene.labels[p] = rec.cls;
                scene.instances[p] = rec.instance;
                for (int c = 0; c < 3; ++c) {
                    scene.image[c * plane + p] = rec.rgb[c];
                }
            }
        }
        scene.shapes.push_back(rec);
    }

    StreamRng noise(derive_seed(seed, {2}));
    for (float& v : scene.image) {
        v = clamp01(v + 0.04 * noise.normal());
    }
    return scene;
}

void AugmentConfig::validate(int scene_width, int scene_height) const {
    if (crop_min < 1 || crop_min > crop_max) {
        throw std::invalid_argument("augment: need 1 <= crop_min <= crop_max");
    }
    if (crop_max > std::min(scene_width, scene_height)) {
        throw std::invalid_argument("augment: crop_max " + std::to_string(crop_max) + " larger than scene " +
                                    std::to_string(scene_width) + "x" + std::to_string(scene_height));
    }
    if (out_size < 1) {
        throw std::invalid_argument("augment: out_size must be positive");
    }
    if (!(hflip_p >= 0.0 && hflip_p <= 1.0)) {
        throw std::invalid_argument("augment: hflip_p must lie in [0,1]");
    }
}

std::vector<float> resize_bilinear(const std::vector<float>& src, int channels, int h, int w, int out_h, int out_w) {
    std::vector<float> out(static_cast<std::size_t>(channels) * out_h * out_w);
    const double sy = static_cast<double>(h) / out_h;
    const double sx = static_cast<double>(w) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, h - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, w - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const double wx = fx - x0;
            for (int c = 0; c < channels; ++c) {
                const float* p = src.data() + static_cast<std::size_t>(c) * h * w;
                const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
                const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
                out[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return out;
}

std::vector<int> resize_nearest(const std::vector<int>& src, int h, int w, int out_h, int out_w) {
    std::vector<int> out(static_cast<std::size_t>(out_h) * out_w);
    for (int y = 0; y < out_h; ++y) {
        const int sy = std::min(h - 1, static_cast<int>((y + 0.5) * h / out_h));
        for (int x = 0; x < out_w; ++x) {
            const int sx = std::min(w - 1, static_cast<int>((x + 0.5) * w / out_w));
            out[static_cast<std::size_t>(y) * out_w + x] = src[static_cast<std::size_t>(sy) * w + sx];
        }
    }
    return out;
}

Patch crop_resize(const Scene& scene, int x, int y, int side, int out_size) {
    if (side < 1 || x < 0 || y < 0 || x + side > scene.width || y + side > scene.height) {
        throw std::invalid_argument("crop window outside the scene");
    }
    const std::size_t plane = scene.pixels();
    const std::size_t crop_plane = static_cast<std::size_t>(side) * side;
    std::vector<float> img(3 * crop_plane);
    std::vector<int> lab(crop_plane);
    std::vector<int> ins(crop_plane);
    for (int yy = 0; yy < side; ++yy) {
        for (int xx = 0; xx < side; ++xx) {
            const std::size_t s = static_cast<std::size_t>(y + yy) * scene.width + (x + xx);
            const std::size_t d = static_cast<std::size_t>(yy) * side + xx;
            for (int c = 0; c < 3; ++c) {
                img[c * crop_plane + d] = scene.image[c * plane + s];
            }
            lab[d] = scene.labels[s];
            ins[d] = scene.instances[s];
        }
    }
    Patch patch;
    patch.size = out_size;
    patch.crop_x = x;
    patch.crop_y = y;
    patch.crop_side = side;
    if (side == out_size) {
        patch.image = std::move(img);
        patch.labels = std::move(lab);
        patch.instances = std::move(ins);
    } else {
        patch.image = resize_bilinear(img, 3, side, side, out_size, out_size);
        patch.labels = resize_nearest(lab, side, side, out_size, out_size);
        patch.instances = resize_nearest(ins, side, side, out_size, out_size);
    }
    return patch;
}

void hflip(Patch& patch) {
    const int s = patch.size;
    auto flip_rows = [s](auto& v, int planes) {
        for (int c = 0; c < planes; ++c) {
            for (int y = 0; y < s; ++y) {
                auto row = v.begin() + (static_cast<std::ptrdiff_t>(c) * s + y) * s;
                std::reverse(row, row + s);
            }
        }
    };
    flip_rows(patch.image, 3);
    flip_rows(patch.labels, 1);
    flip_rows(patch.instances, 1);
    patch.flipped = !patch.flipped;
}

Patch random_patch(const Scene& scene, const AugmentConfig& cfg, StreamRng& rng) {
    cfg.validate(scene.width, scene.height);
    const int side = rng.uniform_int(cfg.crop_min, cfg.crop_max);
    const int x = rng.uniform_int(0, scene.width - side);
    const int y = rng.uniform_int(0, scene.height - side);
    const bool flip = rng.bernoulli(cfg.hflip_p);
    Patch patch = crop_resize(scene, x, y, side, cfg.out_size);
    if (flip) {
        hflip(patch);
    }
    return patch;
}

std::vector<std::uint64_t> dataset_seeds(std::uint64_t dataset_seed, int count) {
    std::vector<std::uint64_t> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int k = 0; k < count; ++k) {
        out.push_back(derive_seed(dataset_seed, {static_cast<std::uint64_t>(k)}));
    }
    return out;
}

}  // namespace gridnet
