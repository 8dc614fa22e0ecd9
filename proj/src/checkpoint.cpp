#include "gridnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "gridnet/config.hpp"

namespace gridnet {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename U>
void put_le(std::string& out, U bits) {
    for (std::size_t k = 0; k < sizeof(U); ++k) {
        out.push_back(static_cast<char>((bits >> (8 * k)) & 0xff));
    }
}

template <typename U>
U get_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t k = 0; k < sizeof(U); ++k) {
        v |= static_cast<U>(p[k]) << (8 * k);
    }
    return v;
}

ordered_json shape_json(const Shape& s) { return ordered_json::array({s.n, s.c, s.h, s.w}); }

ordered_json tensor_table(const GridModel<float>& model) {
    ordered_json table = ordered_json::array();
    for (const auto& e : model.named_tensors()) {
        table.push_back({{"name", e.name},
                         {"role", e.role == TensorRole::Parameter ? "parameter" : "buffer"},
                         {"shape", shape_json(e.tensor->shape())}});
    }
    return table;
}

std::string block_of(const std::string& name) {
    const std::size_t dot = name.find('.');
    return dot == std::string::npos ? name : name.substr(0, dot);
}

}  // namespace

void save_checkpoint(const std::string& path, const GridModel<float>& model, const OptimState& opt,
                     const CheckpointMeta& meta) {
    ordered_json header;
    header["spec"] = spec_to_json(model.spec());
    header["input_hw"] = {model.input_hw().first, model.input_hw().second};
    header["tensors"] = tensor_table(model);
    header["optimizer"] = {{"lr", opt.cfg.lr},
                           {"decay", opt.cfg.decay},
                           {"beta1", opt.cfg.beta1},
                           {"beta2", opt.cfg.beta2},
                           {"eps", opt.cfg.eps},
                           {"multiplicative_decay", opt.cfg.multiplicative_decay},
                           {"base_lr", opt.base_lr},
                           {"step", opt.step}};
    header["epoch"] = meta.epoch;
    header["seeds"] = meta.seeds;
    const std::string text = header.dump();

    std::string out(kCheckpointMagic, 4);
    put_le<std::uint32_t>(out, kCheckpointVersion);
    put_le<std::uint64_t>(out, text.size());
    out += text;
    std::size_t n_params = 0;
    for (const auto& e : model.named_tensors()) {
        for (float v : e.tensor->values()) {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
        }
        n_params += e.role == TensorRole::Parameter ? 1 : 0;
    }
    if (opt.m.size() != n_params || opt.v.size() != n_params) {
        throw std::invalid_argument("save_checkpoint: optimizer state does not match the model");
    }
    for (const auto* moments : {&opt.m, &opt.v}) {
        for (const auto& arr : *moments) {
            for (double v : arr) {
                put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
            }
        }
    }
    // Write to a sibling file first so an interrupted save never leaves a
    // truncated checkpoint under the final name.
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) {
            throw std::runtime_error("cannot open " + tmp + " for writing");
        }
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) {
            throw std::runtime_error("write failed: " + tmp);
        }
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw std::runtime_error("cannot move " + tmp + " to " + path);
    }
}

LoadedCheckpoint load_checkpoint(const std::string& path, const GridSpec* expected) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw std::runtime_error("cannot open checkpoint " + path);
    }
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
        throw std::runtime_error(path + ": not a gridnet checkpoint (bad magic)");
    }
    const auto version = get_le<std::uint32_t>(p + 4);
    if (version != kCheckpointVersion) {
        throw std::runtime_error(path + ": checkpoint version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCheckpointVersion));
    }
    const auto header_len = get_le<std::uint64_t>(p + 8);
    if (header_len > bytes.size() - 16) {
        throw std::runtime_error(path + ": truncated checkpoint header");
    }
    LoadedCheckpoint ck;
    try {
        ck.header = json::parse(bytes.substr(16, header_len));
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ": corrupt checkpoint header: " + e.what());
    }
    const json& h = ck.header;
    const GridSpec stored = spec_from_json(h.at("spec"));
    const std::pair<int, int> hw{h.at("input_hw").at(0).get<int>(), h.at("input_hw").at(1).get<int>()};

    if (expected != nullptr) {
        const GridModel<float> ref = build_grid<float>(*expected, hw, 0);
        const ordered_json want = tensor_table(ref);
        const json& have = h.at("tensors");
        const std::size_t n = std::min(want.size(), have.size());
        for (std::size_t k = 0; k < n; ++k) {
            if (want[k].at("name") != have[k].at("name") || want[k].at("shape") != have[k].at("shape")) {
                const std::string name = want[k].at("name");
                throw std::runtime_error(path + ": shape table mismatch at " + block_of(name) + ": expected " +
                                         name + " " + want[k].at("shape").dump() + ", checkpoint has " +
                                         have[k].at("name").get<std::string>() + " " + have[k].at("shape").dump());
            }
        }
        if (want.size() != have.size()) {
            const std::string name = want.size() > n ? want[n].at("name").get<std::string>()
                                                     : have[n].at("name").get<std::string>();
            throw std::runtime_error(path + ": shape table mismatch at " + block_of(name) + ": " + name +
                                     " present on one side only");
        }
        if (!(stored.normalized() == expected->normalized())) {
            throw std::runtime_error(path + ": grid spec differs from the expected one (same shapes, different " +
                                     "mask, fusion or dropout settings)");
        }
    }

    ck.model = build_grid<float>(stored, hw, 0);
    if (tensor_table(ck.model) != ordered_json(h.at("tensors"))) {
        throw std::runtime_error(path + ": shape table inconsistent with the stored spec");
    }
    std::size_t floats = 0;
    std::size_t doubles = 0;
    for (const auto& e : ck.model.named_tensors()) {
        floats += e.tensor->numel();
        doubles += e.role == TensorRole::Parameter ? 2 * e.tensor->numel() : 0;
    }
    const std::size_t need = 16 + header_len + 4 * floats + 8 * doubles;
    if (bytes.size() != need) {
        throw std::runtime_error(path + ": checkpoint is " + std::to_string(bytes.size()) + " bytes, expected " +
                                 std::to_string(need) + (bytes.size() < need ? " (truncated)" : ""));
    }
    const unsigned char* q = p + 16 + header_len;
    for (auto& e : ck.model.named_tensors()) {
        for (float& v : e.tensor->values()) {
            v = std::bit_cast<float>(get_le<std::uint32_t>(q));
            q += 4;
        }
    }
    const json& o = h.at("optimizer");
    AdamConfig adam;
    adam.lr = o.at("lr");
    adam.decay = o.at("decay");
    adam.beta1 = o.at("beta1");
    adam.beta2 = o.at("beta2");
    adam.eps = o.at("eps");
    adam.multiplicative_decay = o.at("multiplicative_decay");
    ck.opt = make_optim_state(ck.model, adam);
    ck.opt.base_lr = o.at("base_lr");
    ck.opt.step = o.at("step");
    for (auto* moments : {&ck.opt.m, &ck.opt.v}) {
        for (auto& arr : *moments) {
            for (double& v : arr) {
                v = std::bit_cast<double>(get_le<std::uint64_t>(q));
                q += 8;
            }
        }
    }
    ck.meta.epoch = h.at("epoch");
    ck.meta.seeds = h.at("seeds");
    return ck;
}

}  // namespace gridnet
