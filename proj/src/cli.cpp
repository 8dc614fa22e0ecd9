#include "gridnet/cli.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <thread>

#include <CLI11.hpp>

#include "gridnet/checkpoint.hpp"
#include "gridnet/config.hpp"
#include "gridnet/gradcheck.hpp"
#include "gridnet/grid_model.hpp"
#include "gridnet/metrics.hpp"
#include "gridnet/scene.hpp"
#include "gridnet/train.hpp"

namespace gridnet {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

ordered_json grid_report(const GridSpec& spec_in, std::pair<int, int> input_hw) {
    const GridSpec spec = spec_in.normalized();
    const GridModel<float> model = build_grid<float>(spec, input_hw, 0);
    ordered_json j;
    j["spec"] = spec_to_json(spec);
    j["input_hw"] = {input_hw.first, input_hw.second};
    ordered_json streams = ordered_json::array();
    for (int i = 0; i < spec.n_streams; ++i) {
        const StreamDims d = model.stream_shapes()[i];
        streams.push_back({{"stream", i}, {"features", d.features}, {"height", d.height}, {"width", d.width}});
    }
    j["stream_shapes"] = streams;
    ordered_json order = ordered_json::array();
    for (const BlockCoord& c : model.eval_order()) {
        order.push_back(c.str());
    }
    j["eval_order"] = order;
    const std::int64_t exact_params = count_params_exact(model);
    const std::int64_t exact_activ = exact_activation_count(spec, input_hw);
    const double approx_activ = approx_activation_count(spec, input_hw);
    j["exact_params"] = exact_params;
    if (spec.count(ColumnKind::Sub) >= 1) {
        const double approx_params = approx_param_count(spec);
        j["approx_params"] = approx_params;
        j["param_ratio"] = static_cast<double>(exact_params) / approx_params;
    } else {
        j["approx_params"] = nullptr;
        j["param_ratio"] = nullptr;
    }
    j["exact_activations"] = exact_activ;
    j["approx_activations"] = approx_activ;
    j["activation_ratio"] = approx_activ != 0.0 ? nlohmann::ordered_json(static_cast<double>(exact_activ) / approx_activ)
                                                : nlohmann::ordered_json(nullptr);
    return j;
}

const std::vector<std::array<std::uint8_t, 3>>& segmentation_palette() {
    static const std::vector<std::array<std::uint8_t, 3>> palette = {
        {0, 0, 0},       {220, 20, 60},  {0, 142, 0},    {30, 60, 230},   {250, 170, 30},
        {190, 60, 200},  {0, 200, 200},  {250, 110, 20}, {150, 150, 150}, {255, 255, 255},
        {128, 64, 128},  {107, 142, 35}, {70, 130, 180}, {119, 11, 32},   {0, 0, 142},
        {102, 102, 156}, {152, 251, 152}, {255, 0, 0},   {0, 60, 100},    {220, 220, 0},
    };
    return palette;
}

RgbImage render_segmentation(const std::vector<int>& labels, int width, int height) {
    const auto& pal = segmentation_palette();
    RgbImage img{width, height, std::vector<std::uint8_t>(labels.size() * 3)};
    for (std::size_t k = 0; k < labels.size(); ++k) {
        const auto& col = labels[k] == kIgnoreLabel ? pal[0] : pal[static_cast<std::size_t>(labels[k]) % pal.size()];
        std::copy(col.begin(), col.end(), img.rgb.begin() + static_cast<std::ptrdiff_t>(3 * k));
    }
    return img;
}

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    std::optional<int> epochs;
    std::string resume;
    std::string checkpoint;
    std::string image;
    std::string out;
    std::string split = "eval";
    int samples = 100;
    int count = 8;
};

class UsageError : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

RunConfig resolve_config(const Options& opt) {
    RunConfig cfg = opt.config.empty() ? default_run_config() : load_run_config(opt.config);
    if (opt.seed) {
        cfg.seed = *opt.seed;
        cfg.train.seed = *opt.seed;
    }
    if (opt.threads) {
        cfg.threads = *opt.threads;
    }
    if (opt.epochs) {
        cfg.train.epochs = *opt.epochs;
        // A shorter run keeps its drop inside the run; the drop epoch never
        // exceeds the epoch count.
        cfg.train.lr_drop_epoch = std::min(cfg.train.lr_drop_epoch, cfg.train.epochs);
    }
    cfg.validate();
    return cfg;
}

/// Runs fn(k) for k in [0, n) on `threads` workers. Each index writes only
/// its own slot, so results do not depend on the thread count.
template <typename F>
void parallel_for(std::size_t n, int threads, F&& fn) {
    if (threads <= 1 || n <= 1) {
        for (std::size_t k = 0; k < n; ++k) {
            fn(k);
        }
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&] {
            for (std::size_t k = next++; k < n; k = next++) {
                try {
                    fn(k);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) {
                        error = std::current_exception();
                    }
                }
            }
        });
    }
    for (auto& th : pool) {
        th.join();
    }
    if (error) {
        std::rethrow_exception(error);
    }
}

std::vector<Scene> make_scenes(const DataConfig& d, int num_classes, std::uint64_t seed, int count, int threads) {
    const std::vector<std::uint64_t> seeds = dataset_seeds(seed, count);
    std::vector<Scene> scenes(seeds.size());
    parallel_for(seeds.size(), threads, [&](std::size_t k) {
        scenes[k] = generate_scene(seeds[k], d.scene_width, d.scene_height, num_classes, d.max_shapes);
    });
    return scenes;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    out << text;
}

ordered_json run_seeds(const RunConfig& cfg) {
    return {{"seed", cfg.seed}, {"train_data", cfg.data.train_seed}, {"eval_data", cfg.data.eval_seed}};
}

int cmd_report(const Options& opt) {
    const RunConfig cfg = resolve_config(opt);
    std::cout << grid_report(cfg.grid, {cfg.augment.out_size, cfg.augment.out_size}).dump(2) << "\n";
    return kExitOk;
}

int cmd_train(const Options& opt) {
    const RunConfig cfg = resolve_config(opt);
    const fs::path dir = cfg.output_dir;
    fs::create_directories(dir);
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");

    const std::pair<int, int> hw{cfg.augment.out_size, cfg.augment.out_size};
    GridModel<float> model;
    OptimState optim;
    int start_epoch = 0;
    if (!opt.resume.empty()) {
        LoadedCheckpoint ck = load_checkpoint(opt.resume, &cfg.grid);
        model = std::move(ck.model);
        optim = std::move(ck.opt);
        start_epoch = ck.meta.epoch;
        std::cerr << "resuming from " << opt.resume << " at epoch " << start_epoch << "\n";
    } else {
        model = build_grid<float>(cfg.grid, hw, derive_seed(cfg.seed, {0x696e6974ULL}));
        optim = make_optim_state(model, cfg.adam);
    }
    const std::vector<Scene> scenes =
        make_scenes(cfg.data, cfg.grid.num_classes, cfg.data.train_seed, cfg.data.train_scenes, cfg.threads);

    std::ofstream log(dir / "log.jsonl", opt.resume.empty() ? std::ios::trunc : std::ios::app);
    if (!log) {
        throw std::runtime_error("cannot open " + (dir / "log.jsonl").string());
    }
    CheckpointMeta meta{start_epoch, run_seeds(cfg)};
    if (start_epoch == 0 && opt.resume.empty()) {
        save_checkpoint((dir / "epoch_0000.grdn").string(), model, optim, meta);
    }
    for (int epoch = start_epoch; epoch < cfg.train.epochs; ++epoch) {
        const EpochLog rec = train_epoch(model, scenes, cfg.train, optim, epoch);
        log << rec.to_json().dump() << "\n" << std::flush;
        std::cerr << "epoch " << epoch + 1 << "/" << cfg.train.epochs << " loss " << rec.mean_loss << "\n";
        meta.epoch = epoch + 1;
        if (cfg.train.snapshot_every > 0 && meta.epoch % cfg.train.snapshot_every == 0) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%04d.grdn", meta.epoch);
            save_checkpoint((dir / name).string(), model, optim, meta);
        }
    }
    save_checkpoint((dir / "final.grdn").string(), model, optim, meta);
    return kExitOk;
}

LoadedCheckpoint require_checkpoint(const Options& opt) {
    if (opt.checkpoint.empty()) {
        throw UsageError("--checkpoint is required");
    }
    if (!fs::exists(opt.checkpoint)) {
        throw std::runtime_error("checkpoint not found: " + opt.checkpoint);
    }
    return load_checkpoint(opt.checkpoint);
}

int cmd_eval(const Options& opt) {
    const RunConfig cfg = resolve_config(opt);
    LoadedCheckpoint ck = require_checkpoint(opt);
    const GridSpec& spec = ck.model.spec();
    if (opt.split != "eval" && opt.split != "train") {
        throw UsageError("--split must be 'train' or 'eval'");
    }
    const bool train_split = opt.split == "train";
    const std::vector<Scene> scenes =
        make_scenes(cfg.data, spec.num_classes, train_split ? cfg.data.train_seed : cfg.data.eval_seed,
                    train_split ? cfg.data.train_scenes : cfg.data.eval_scenes, cfg.threads);
    std::vector<EvalSample> samples(scenes.size());
    std::vector<std::vector<std::string>> warnings(scenes.size());
    parallel_for(scenes.size(), cfg.threads, [&](std::size_t k) {
        const Scene& s = scenes[k];
        MultiscaleResult r = multiscale_predict(ck.model, s.image, s.height, s.width, cfg.scales);
        samples[k] = {std::move(r.labels), s.labels, s.instances};
        warnings[k] = std::move(r.warnings);
    });
    if (!warnings.empty()) {
        for (const std::string& w : warnings.front()) {
            std::cerr << "warning: " << w << "\n";
        }
    }
    const MetricsReport report = evaluate_samples(samples, spec.num_classes, CategoryMap::synthetic(spec.num_classes));
    ordered_json j = report.to_json();
    j["split"] = opt.split;
    j["scenes"] = scenes.size();
    j["scales"] = cfg.scales;
    const std::string text = j.dump(2) + "\n";
    if (!opt.out.empty()) {
        write_text(opt.out, text);
    }
    std::cout << text;
    return kExitOk;
}

int cmd_infer(const Options& opt) {
    const RunConfig cfg = resolve_config(opt);
    if (opt.image.empty() || opt.out.empty()) {
        throw UsageError("infer needs --image <in.ppm> and --out <prefix>");
    }
    LoadedCheckpoint ck = require_checkpoint(opt);
    const RgbImage img = read_ppm(opt.image);
    const MultiscaleResult r = multiscale_predict(ck.model, to_planar(img), img.height, img.width, cfg.scales);
    for (const std::string& w : r.warnings) {
        std::cerr << "warning: " << w << "\n";
    }
    write_ppm(opt.out + ".ppm", render_segmentation(r.labels, img.width, img.height));
    write_pgm(opt.out + ".pgm", to_gray(r.labels, img.width, img.height));
    return kExitOk;
}

int cmd_gradcheck(const Options& opt) {
    const RunConfig cfg = resolve_config(opt);
    GridSpec spec = cfg.grid;
    const int side = std::max(16, min_input_side(spec));
    GridModel<double> model = build_grid<double>(spec, {side, side}, derive_seed(cfg.seed, {0x696e6974ULL}));
    StreamRng rng(derive_seed(cfg.seed, {0x78ULL}));
    Tensor<double> x(Shape{1, spec.image_channels, side, side});
    for (double& v : x.values()) {
        v = rng.uniform();
    }
    std::vector<int> labels(static_cast<std::size_t>(side) * side);
    for (int& l : labels) {
        l = rng.uniform_int(0, spec.num_classes - 1);
    }
    GradcheckOptions go;
    go.samples = opt.samples;
    go.seed = cfg.seed;
    const GradcheckReport rep = gradcheck_grid(model, x, labels, go);
    ordered_json j = {{"input", {1, spec.image_channels, side, side}},
                      {"samples", go.samples},
                      {"step", go.step},
                      {"tolerance", go.tolerance},
                      {"checked", rep.checked},
                      {"skipped", rep.skipped},
                      {"max_rel_error", rep.max_rel_error},
                      {"worst", rep.worst},
                      {"passed", rep.passed}};
    std::cout << j.dump(2) << "\n";
    return kExitOk;
}

int cmd_scenes(const Options& opt) {
    const RunConfig cfg = resolve_config(opt);
    if (opt.out.empty()) {
        throw UsageError("scenes needs --out <directory>");
    }
    const fs::path dir = opt.out;
    fs::create_directories(dir);
    const bool train_split = opt.split == "train";
    const std::uint64_t seed = train_split ? cfg.data.train_seed : cfg.data.eval_seed;
    const std::vector<Scene> scenes = make_scenes(cfg.data, cfg.grid.num_classes, seed, opt.count, cfg.threads);
    ordered_json manifest;
    manifest["split"] = opt.split;
    manifest["dataset_seed"] = seed;
    manifest["width"] = cfg.data.scene_width;
    manifest["height"] = cfg.data.scene_height;
    manifest["num_classes"] = cfg.grid.num_classes;
    manifest["max_shapes"] = cfg.data.max_shapes;
    ordered_json entries = ordered_json::array();
    for (std::size_t k = 0; k < scenes.size(); ++k) {
        const Scene& s = scenes[k];
        char stem[32];
        std::snprintf(stem, sizeof(stem), "scene_%04zu", k);
        write_ppm((dir / (std::string(stem) + ".ppm")).string(), to_rgb8(s.image, s.width, s.height));
        write_pgm((dir / (std::string(stem) + "_labels.pgm")).string(), to_gray(s.labels, s.width, s.height));
        write_pgm((dir / (std::string(stem) + "_instances.pgm")).string(), to_gray(s.instances, s.width, s.height));
        entries.push_back({{"index", k}, {"seed", s.seed}, {"file", std::string(stem)}, {"shapes", s.shapes.size()}});
    }
    manifest["scenes"] = entries;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"Grid-structured residual segmentation network: training, evaluation and analysis"};
    app.require_subcommand(1);
    Options opt;

    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", opt.config, "JSON run configuration")->check(CLI::ExistingFile);
        sub->add_option("--seed", opt.seed, "Run seed (overrides the config)");
        sub->add_option("--threads", opt.threads, "Worker threads (default 1)")->check(CLI::PositiveNumber);
    };
    CLI::App* report = app.add_subcommand("report", "Print stream shapes and parameter/activation counts");
    common(report);
    CLI::App* train = app.add_subcommand("train", "Train on synthetic scenes, writing checkpoints and a JSON-lines log");
    common(train);
    train->add_option("--epochs", opt.epochs, "Number of epochs (overrides the config)")->check(CLI::NonNegativeNumber);
    train->add_option("--resume", opt.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
    CLI::App* eval = app.add_subcommand("eval", "Evaluate a checkpoint (IoU, iIoU, category scores)");
    common(eval);
    eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint to evaluate")->required();
    eval->add_option("--split", opt.split, "Scene split: eval or train");
    eval->add_option("--out", opt.out, "Also write the report to this file");
    CLI::App* infer = app.add_subcommand("infer", "Segment a PPM image");
    common(infer);
    infer->add_option("--checkpoint", opt.checkpoint, "Checkpoint to use")->required();
    infer->add_option("--image", opt.image, "Input PPM image")->required();
    infer->add_option("--out", opt.out, "Output prefix for <prefix>.ppm and <prefix>.pgm")->required();
    CLI::App* gradcheck = app.add_subcommand("gradcheck", "Compare gradients against central finite differences");
    common(gradcheck);
    gradcheck->add_option("--samples", opt.samples, "Sampled parameter coordinates")->check(CLI::PositiveNumber);
    CLI::App* scenes = app.add_subcommand("scenes", "Export synthetic scenes as PPM/PGM files plus a manifest");
    common(scenes);
    scenes->add_option("--out", opt.out, "Output directory")->required();
    scenes->add_option("--count", opt.count, "Number of scenes")->check(CLI::PositiveNumber);
    scenes->add_option("--split", opt.split, "Scene split: eval or train");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    try {
        if (report->parsed()) {
            return cmd_report(opt);
        }
        if (train->parsed()) {
            return cmd_train(opt);
        }
        if (eval->parsed()) {
            return cmd_eval(opt);
        }
        if (infer->parsed()) {
            return cmd_infer(opt);
        }
        if (gradcheck->parsed()) {
            return cmd_gradcheck(opt);
        }
        if (scenes->parsed()) {
            return cmd_scenes(opt);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}

}  // namespace gridnet
