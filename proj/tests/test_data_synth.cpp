#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "gridnet/image_io.hpp"
#include "gridnet/scene.hpp"

using namespace gridnet;

namespace {

bool same_scene(const Scene& a, const Scene& b) {
    return a.width == b.width && a.height == b.height && a.image == b.image && a.labels == b.labels &&
           a.instances == b.instances && a.shapes.size() == b.shapes.size();
}

std::set<int> value_set(const std::vector<int>& v) { return {v.begin(), v.end()}; }

}  // namespace

TEST_CASE("scene generation is deterministic and seed-sensitive") {
    const Scene a = generate_scene(17, 64, 48, 4, 6);
    const Scene b = generate_scene(17, 64, 48, 4, 6);
    CHECK(same_scene(a, b));
    CHECK(a.image.size() == 3u * 64 * 48);
    CHECK(a.labels.size() == 64u * 48);
    CHECK(a.instances.size() == 64u * 48);
    CHECK_FALSE(same_scene(a, generate_scene(18, 64, 48, 4, 6)));
}

TEST_CASE("scene without shapes is all background") {
    const Scene s = generate_scene(3, 32, 32, 4, 0);
    CHECK(std::all_of(s.labels.begin(), s.labels.end(), [](int v) { return v == 0; }));
    CHECK(std::all_of(s.instances.begin(), s.instances.end(), [](int v) { return v == 0; }));
    CHECK(s.shapes.empty());
}

TEST_CASE("scene maps are consistent") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Scene s = generate_scene(seed, 64, 64, 4, 6);
        for (float v : s.image) {
            CHECK((v >= 0.0f && v <= 1.0f));
        }
        std::vector<int> cls_of(64, -1);
        for (std::size_t k = 0; k < s.pixels(); ++k) {
            const int inst = s.instances[k];
            const int lab = s.labels[k];
            CHECK((lab >= 0 && lab < 4));
            if (inst == 0) {
                CHECK(lab == 0);
                continue;
            }
            CHECK(lab > 0);
            // Each instance id belongs to exactly one class.
            if (cls_of[inst] < 0) {
                cls_of[inst] = lab;
            }
            CHECK(cls_of[inst] == lab);
        }
        const std::vector<int> ic = s.instance_classes();
        for (std::size_t id = 1; id < ic.size(); ++id) {
            if (cls_of[id] >= 0) {
                CHECK(ic[id] == cls_of[id]);
            }
        }
    }
}

TEST_CASE("class census over 100 seeds") {
    std::vector<int> seen(4, 0);
    const auto seeds = dataset_seeds(5, 100);
    for (std::uint64_t seed : seeds) {
        const std::set<int> present = value_set(generate_scene(seed, 128, 128, 4, 6).labels);
        for (int c : present) {
            ++seen[c];
        }
    }
    for (int c = 0; c < 4; ++c) {
        CAPTURE(c);
        CHECK(seen[c] >= 80);
    }
}

TEST_CASE("whole-scene crop only resizes") {
    const Scene s = generate_scene(9, 64, 64, 4, 6);
    AugmentConfig cfg{64, 64, 64, 0.0};
    StreamRng rng(1);
    const Patch p = random_patch(s, cfg, rng);
    CHECK(p.crop_side == 64);
    CHECK(p.labels == s.labels);
    CHECK(p.instances == s.instances);
    for (std::size_t k = 0; k < p.image.size(); ++k) {
        CHECK(p.image[k] == doctest::Approx(s.image[k]).epsilon(1e-6));
    }
}

TEST_CASE("flip is an involution on all three maps") {
    const Scene s = generate_scene(10, 96, 96, 4, 6);
    Patch p = crop_resize(s, 5, 7, 80, 50);
    const Patch orig = p;
    hflip(p);
    CHECK(p.labels != orig.labels);
    hflip(p);
    CHECK(p.image == orig.image);
    CHECK(p.labels == orig.labels);
    CHECK(p.instances == orig.instances);
}

TEST_CASE("resized labels never invent classes") {
    AugmentConfig cfg{20, 96, 37, 0.5};
    StreamRng rng(77);
    int scene_seed = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        if (trial % 50 == 0) {
            ++scene_seed;
        }
        const Scene s = generate_scene(static_cast<std::uint64_t>(scene_seed), 96, 96, 4, 6);
        const Patch p = random_patch(s, cfg, rng);
        CHECK((p.crop_side >= 20 && p.crop_side <= 96));
        // Labels inside the crop window of the source scene.
        std::set<int> window;
        for (int y = p.crop_y; y < p.crop_y + p.crop_side; ++y) {
            for (int x = p.crop_x; x < p.crop_x + p.crop_side; ++x) {
                window.insert(s.labels[static_cast<std::size_t>(y) * 96 + x]);
            }
        }
        for (int v : value_set(p.labels)) {
            CHECK(window.contains(v));
        }
    }
}

TEST_CASE("crop and flip keep a tagged pixel aligned") {
    Scene s = generate_scene(11, 64, 64, 4, 6);
    const int tx = 30;
    const int ty = 21;
    const std::size_t k = static_cast<std::size_t>(ty) * 64 + tx;
    s.labels[k] = 3;
    s.instances[k] = 99;
    for (int c = 0; c < 3; ++c) {
        s.image[c * s.pixels() + k] = 0.25f * static_cast<float>(c + 1);
    }
    Patch p = crop_resize(s, 10, 5, 40, 40);
    hflip(p);
    const int px = 40 - 1 - (tx - 10);
    const int py = ty - 5;
    const std::size_t q = static_cast<std::size_t>(py) * 40 + px;
    CHECK(p.labels[q] == 3);
    CHECK(p.instances[q] == 99);
    for (int c = 0; c < 3; ++c) {
        CHECK(p.image[c * 1600 + q] == doctest::Approx(0.25f * (c + 1)));
    }
}

TEST_CASE("crop configuration errors") {
    const Scene s = generate_scene(1, 64, 64, 4, 2);
    StreamRng rng(0);
    CHECK_THROWS_AS(random_patch(s, AugmentConfig{48, 128, 64, 0.5}, rng), std::invalid_argument);
    CHECK_THROWS_AS(random_patch(s, AugmentConfig{50, 40, 64, 0.5}, rng), std::invalid_argument);
    CHECK_THROWS_AS(crop_resize(s, 30, 30, 40, 16), std::invalid_argument);
}

TEST_CASE("bilinear resize keeps constants and averages on halving") {
    const std::vector<float> flat(2 * 6 * 6, 0.4f);
    for (float v : resize_bilinear(flat, 2, 6, 6, 11, 4)) {
        CHECK(v == doctest::Approx(0.4f));
    }
    // Half-pixel centres: halving a 2x2 block samples its centre.
    const std::vector<float> src = {0.0f, 1.0f, 2.0f, 3.0f};
    const auto out = resize_bilinear(src, 1, 2, 2, 1, 1);
    CHECK(out[0] == doctest::Approx(1.5f));
}

TEST_CASE("netpbm round trips") {
    const auto dir = std::filesystem::temp_directory_path() / "gridnet_test_io";
    std::filesystem::create_directories(dir);
    const Scene s = generate_scene(4, 24, 16, 4, 3);
    const RgbImage rgb = to_rgb8(s.image, 24, 16);
    write_ppm((dir / "a.ppm").string(), rgb);
    const RgbImage back = read_ppm((dir / "a.ppm").string());
    CHECK(back.width == 24);
    CHECK(back.rgb == rgb.rgb);
    const std::vector<float> planar = to_planar(back);
    for (std::size_t k = 0; k < planar.size(); ++k) {
        CHECK(std::abs(planar[k] - s.image[k]) <= 0.5f / 255.0f + 1e-6f);
    }

    std::vector<int> wide(24 * 16, 7);
    wide[5] = 1000;
    const GrayImage g = to_gray(wide, 24, 16);
    CHECK(g.maxval == 65535);
    write_pgm((dir / "b.pgm").string(), g);
    const GrayImage gb = read_pgm((dir / "b.pgm").string());
    CHECK(gb.values == g.values);
    CHECK(to_gray(s.labels, 24, 16).maxval == 255);
    CHECK_THROWS(read_ppm((dir / "missing.ppm").string()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("dataset seeds are stable and distinct") {
    const auto a = dataset_seeds(3, 50);
    CHECK(a == dataset_seeds(3, 50));
    CHECK(std::set<std::uint64_t>(a.begin(), a.end()).size() == 50);
    CHECK(dataset_seeds(3, 10) == std::vector<std::uint64_t>(a.begin(), a.begin() + 10));
}

TEST_CASE("uniform_int covers its range evenly") {
    StreamRng rng(3);
    std::vector<int> hist(5, 0);
    for (int k = 0; k < 50000; ++k) {
        const int v = rng.uniform_int(2, 6);
        REQUIRE((v >= 2 && v <= 6));
        ++hist[v - 2];
    }
    for (int h : hist) {
        CHECK(std::abs(h - 10000) < 500);
    }
}
