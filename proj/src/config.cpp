#include "gridnet/config.hpp"

#include <fstream>
#include <set>
#include <stdexcept>

namespace gridnet {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

void reject_unknown(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) {
        throw std::invalid_argument(where + ": expected an object");
    }
    const std::set<std::string> keys(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items()) {
        if (!keys.contains(k)) {
            throw std::invalid_argument(where + ": unknown key '" + k + "'");
        }
    }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
    if (!j.contains(key)) {
        return;
    }
    const json& v = j.at(key);
    if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) {
            throw std::invalid_argument(where + "." + key + ": expected a boolean");
        }
    } else if constexpr (std::is_integral_v<V>) {
        if (!v.is_number_integer()) {
            throw std::invalid_argument(where + "." + key + ": expected an integer");
        }
        if (std::is_unsigned_v<V> && v.is_number_integer() && !v.is_number_unsigned()) {
            throw std::invalid_argument(where + "." + key + ": expected a non-negative integer");
        }
    } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) {
            throw std::invalid_argument(where + "." + key + ": expected a number");
        }
    } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) {
            throw std::invalid_argument(where + "." + key + ": expected a string");
        }
    }
    out = v.get<V>();
}

std::vector<std::vector<bool>> mask_rows(const ConnectionMask& m, bool residual) {
    std::vector<std::vector<bool>> rows;
    for (int i = 0; i < m.streams(); ++i) {
        std::vector<bool> row;
        for (int j = 0; j < m.columns(); ++j) {
            row.push_back(residual ? m.residual_on(i, j) : m.vertical_on(i, j));
        }
        rows.push_back(row);
    }
    return rows;
}

void fill_mask(const json& rows, ConnectionMask& m, bool residual) {
    const std::string what = residual ? "grid.mask.residual" : "grid.mask.vertical";
    if (!rows.is_array() || static_cast<int>(rows.size()) != m.streams()) {
        throw std::invalid_argument(what + ": expected " + std::to_string(m.streams()) + " rows");
    }
    for (int i = 0; i < m.streams(); ++i) {
        const json& row = rows[static_cast<std::size_t>(i)];
        if (!row.is_array() || static_cast<int>(row.size()) != m.columns()) {
            throw std::invalid_argument(what + ": row " + std::to_string(i) + " needs " +
                                        std::to_string(m.columns()) + " entries");
        }
        for (int j = 0; j < m.columns(); ++j) {
            const json& v = row[static_cast<std::size_t>(j)];
            if (!v.is_boolean()) {
                throw std::invalid_argument(what + ": entries must be booleans");
            }
            if (residual) {
                m.set_residual(i, j, v.get<bool>());
            } else {
                m.set_vertical(i, j, v.get<bool>());
            }
        }
    }
}

}  // namespace

ordered_json spec_to_json(const GridSpec& spec) {
    ordered_json j;
    j["n_streams"] = spec.n_streams;
    ordered_json cols = ordered_json::array();
    for (ColumnKind k : spec.column_kinds) {
        cols.push_back(to_string(k));
    }
    j["columns"] = cols;
    j["base_features"] = spec.base_features;
    j["num_classes"] = spec.num_classes;
    j["image_channels"] = spec.image_channels;
    j["dropout_p"] = spec.dropout_p;
    j["fusion"] = to_string(spec.fusion);
    j["vertical_residual"] = spec.vertical_residual;
    const GridSpec n = spec.normalized();
    j["mask"] = {{"residual", mask_rows(n.mask, true)}, {"vertical", mask_rows(n.mask, false)}};
    return j;
}

GridSpec spec_from_json(const json& j, std::string* preset_out) {
    const std::string where = "grid";
    reject_unknown(j, where,
                   {"n_streams", "columns", "base_features", "num_classes", "image_channels", "dropout_p", "fusion",
                    "vertical_residual", "mask"});
    GridSpec spec;
    spec.column_kinds = {ColumnKind::Sub, ColumnKind::Sub, ColumnKind::Up, ColumnKind::Up};
    spec.base_features = 8;
    spec.num_classes = 4;
    read(j, "n_streams", spec.n_streams, where);
    if (j.contains("columns")) {
        const json& cols = j.at("columns");
        if (!cols.is_array()) {
            throw std::invalid_argument("grid.columns: expected an array of \"sub\"/\"up\"");
        }
        spec.column_kinds.clear();
        for (const json& c : cols) {
            if (c == "sub") {
                spec.column_kinds.push_back(ColumnKind::Sub);
            } else if (c == "up") {
                spec.column_kinds.push_back(ColumnKind::Up);
            } else {
                throw std::invalid_argument("grid.columns: entries must be \"sub\" or \"up\", got " + c.dump());
            }
        }
    }
    read(j, "base_features", spec.base_features, where);
    read(j, "num_classes", spec.num_classes, where);
    read(j, "image_channels", spec.image_channels, where);
    read(j, "dropout_p", spec.dropout_p, where);
    if (j.contains("fusion")) {
        std::string f;
        read(j, "fusion", f, where);
        if (f == "sum") {
            spec.fusion = Fusion::Sum;
        } else if (f == "concat") {
            spec.fusion = Fusion::Concat;
        } else {
            throw std::invalid_argument("grid.fusion: expected \"sum\" or \"concat\"");
        }
    }
    read(j, "vertical_residual", spec.vertical_residual, where);
    spec.mask = ConnectionMask();
    spec.validate();
    std::string preset = "full";
    if (j.contains("mask")) {
        const json& m = j.at("mask");
        if (m.is_string()) {
            preset = m.get<std::string>();
            spec.mask = preset_mask(parse_mask_preset(preset), spec);
        } else {
            reject_unknown(m, "grid.mask", {"residual", "vertical"});
            if (!m.contains("residual") || !m.contains("vertical")) {
                throw std::invalid_argument("grid.mask: needs both \"residual\" and \"vertical\"");
            }
            ConnectionMask mask(spec.n_streams, spec.n_columns(), false);
            fill_mask(m.at("residual"), mask, true);
            fill_mask(m.at("vertical"), mask, false);
            spec.mask = mask;
            preset.clear();
        }
    } else {
        spec.mask = ConnectionMask::all_on(spec.n_streams, spec.n_columns());
    }
    if (preset_out != nullptr) {
        *preset_out = preset;
    }
    return spec;
}

RunConfig default_run_config() {
    RunConfig cfg;
    cfg.grid = make_symmetric_spec(5, 2, 2, 8, 4);
    cfg.augment = AugmentConfig{48, 128, 64, 0.5};
    cfg.train.augment = cfg.augment;
    return cfg;
}

void RunConfig::validate() const {
    grid.validate();
    if (grid.image_channels != 3) {
        throw std::invalid_argument("config: synthetic scenes are RGB, grid.image_channels must be 3");
    }
    if (grid.num_classes < 2) {
        throw std::invalid_argument("config: need at least two classes");
    }
    if (data.scene_width < 1 || data.scene_height < 1 || data.max_shapes < 0 || data.train_scenes < 1 ||
        data.eval_scenes < 1) {
        throw std::invalid_argument("config: data sizes must be positive");
    }
    augment.validate(data.scene_width, data.scene_height);
    if (augment.out_size < min_input_side(grid)) {
        throw std::invalid_argument("config: augment.out_size below the grid's minimum input side " +
                                    std::to_string(min_input_side(grid)));
    }
    train.validate();
    adam.validate();
    if (scales.empty()) {
        throw std::invalid_argument("config: scales must not be empty");
    }
    for (double s : scales) {
        if (!(s > 0.0)) {
            throw std::invalid_argument("config: scales must be positive");
        }
    }
    if (threads < 1) {
        throw std::invalid_argument("config: threads must be at least 1");
    }
}

ordered_json to_json(const RunConfig& cfg) {
    ordered_json j;
    ordered_json grid = spec_to_json(cfg.grid);
    grid.erase("dropout_p");
    if (!cfg.mask_preset.empty()) {
        grid["mask"] = cfg.mask_preset;
    }
    j["grid"] = grid;
    j["data"] = {{"scene_width", cfg.data.scene_width},   {"scene_height", cfg.data.scene_height},
                 {"max_shapes", cfg.data.max_shapes},     {"train_scenes", cfg.data.train_scenes},
                 {"eval_scenes", cfg.data.eval_scenes},   {"train_seed", cfg.data.train_seed},
                 {"eval_seed", cfg.data.eval_seed}};
    j["augment"] = {{"crop_min", cfg.augment.crop_min},
                    {"crop_max", cfg.augment.crop_max},
                    {"out_size", cfg.augment.out_size},
                    {"hflip_p", cfg.augment.hflip_p}};
    j["train"] = {{"batch_size", cfg.train.batch_size},       {"epochs", cfg.train.epochs},
                  {"lr_drop_epoch", cfg.train.lr_drop_epoch}, {"lr_after_drop", cfg.train.lr_after_drop},
                  {"dropout_p", cfg.train.dropout_p},         {"snapshot_every", cfg.train.snapshot_every}};
    j["adam"] = {{"lr", cfg.adam.lr},       {"decay", cfg.adam.decay}, {"beta1", cfg.adam.beta1},
                 {"beta2", cfg.adam.beta2}, {"eps", cfg.adam.eps},     {"multiplicative_decay", cfg.adam.multiplicative_decay}};
    j["scales"] = cfg.scales;
    j["output_dir"] = cfg.output_dir;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    return j;
}

RunConfig run_config_from_json(const json& j) {
    reject_unknown(j, "config", {"grid", "data", "augment", "train", "adam", "scales", "output_dir", "seed", "threads"});
    RunConfig cfg = default_run_config();
    if (j.contains("grid")) {
        cfg.grid = spec_from_json(j.at("grid"), &cfg.mask_preset);
    }
    if (j.contains("data")) {
        const json& d = j.at("data");
        reject_unknown(d, "data",
                       {"scene_width", "scene_height", "max_shapes", "train_scenes", "eval_scenes", "train_seed",
                        "eval_seed"});
        read(d, "scene_width", cfg.data.scene_width, "data");
        read(d, "scene_height", cfg.data.scene_height, "data");
        read(d, "max_shapes", cfg.data.max_shapes, "data");
        read(d, "train_scenes", cfg.data.train_scenes, "data");
        read(d, "eval_scenes", cfg.data.eval_scenes, "data");
        read(d, "train_seed", cfg.data.train_seed, "data");
        read(d, "eval_seed", cfg.data.eval_seed, "data");
    }
    if (j.contains("augment")) {
        const json& a = j.at("augment");
        reject_unknown(a, "augment", {"crop_min", "crop_max", "out_size", "hflip_p"});
        read(a, "crop_min", cfg.augment.crop_min, "augment");
        read(a, "crop_max", cfg.augment.crop_max, "augment");
        read(a, "out_size", cfg.augment.out_size, "augment");
        read(a, "hflip_p", cfg.augment.hflip_p, "augment");
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t, "train",
                       {"batch_size", "epochs", "lr_drop_epoch", "lr_after_drop", "dropout_p", "snapshot_every"});
        read(t, "batch_size", cfg.train.batch_size, "train");
        read(t, "epochs", cfg.train.epochs, "train");
        read(t, "lr_drop_epoch", cfg.train.lr_drop_epoch, "train");
        read(t, "lr_after_drop", cfg.train.lr_after_drop, "train");
        read(t, "dropout_p", cfg.train.dropout_p, "train");
        read(t, "snapshot_every", cfg.train.snapshot_every, "train");
    }
    if (j.contains("adam")) {
        const json& a = j.at("adam");
        reject_unknown(a, "adam", {"lr", "decay", "beta1", "beta2", "eps", "multiplicative_decay"});
        read(a, "lr", cfg.adam.lr, "adam");
        read(a, "decay", cfg.adam.decay, "adam");
        read(a, "beta1", cfg.adam.beta1, "adam");
        read(a, "beta2", cfg.adam.beta2, "adam");
        read(a, "eps", cfg.adam.eps, "adam");
        read(a, "multiplicative_decay", cfg.adam.multiplicative_decay, "adam");
    }
    if (j.contains("scales")) {
        const json& s = j.at("scales");
        if (!s.is_array()) {
            throw std::invalid_argument("scales: expected an array of numbers");
        }
        cfg.scales.clear();
        for (const json& v : s) {
            if (!v.is_number()) {
                throw std::invalid_argument("scales: expected an array of numbers");
            }
            cfg.scales.push_back(v.get<double>());
        }
    }
    read(j, "output_dir", cfg.output_dir, "config");
    read(j, "seed", cfg.seed, "config");
    read(j, "threads", cfg.threads, "config");
    cfg.grid.dropout_p = cfg.train.dropout_p;
    cfg.train.seed = cfg.seed;
    cfg.train.augment = cfg.augment;
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("cannot open config " + path);
    }
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config " + path + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace gridnet
