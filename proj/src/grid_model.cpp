#include "gridnet/grid_model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>

namespace gridnet {

bool has_residual_unit(const GridSpec& spec, int i, int j) {
    const int entry = stream_entry_column(spec, i);
    return entry != -2 && entry < j;
}

bool has_vertical_unit(const GridSpec& spec, int i, int j) {
    if (spec.column_kinds[j] == ColumnKind::Sub) {
        return i >= 1;
    }
    if (i + 1 >= spec.n_streams) {
        return false;
    }
    const int entry = stream_entry_column(spec, i + 1);
    return entry != -2 && entry < j;
}

namespace {

template <typename T>
class Initializer {
public:
    explicit Initializer(std::uint64_t seed) : rng_(seed) {}

    Tensor<T> normal(Shape s, int fan_in) {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
        Tensor<T> t(s, true);
        for (T& v : t.values()) {
            v = static_cast<T>(dist(rng_));
        }
        return t;
    }

    ConvParams<T> conv(int out_c, int in_c, int k, int stride, bool bias) {
        ConvParams<T> p;
        p.weight = normal(Shape{out_c, in_c, k, k}, in_c * k * k);
        if (bias) {
            p.bias = Tensor<T>(Shape{1, out_c, 1, 1}, true);
        }
        p.stride = stride;
        p.padding = Padding::same(k);
        return p;
    }

    ConvParams<T> deconv(int in_c, int out_c, int k) {
        ConvParams<T> p;
        p.weight = normal(Shape{in_c, out_c, k, k}, in_c * k * k);
        p.stride = 2;
        p.padding = Padding::same(k);
        return p;
    }

private:
    std::mt19937_64 rng_;
};

int concat_slots(bool has_res, bool has_vert) {
    return (has_res ? 2 : 0) + (has_vert ? 1 : 0);
}

// Simulates which blocks are active under a mask (no dropout).
bool output_reachable(const GridSpec& spec) {
    std::vector<char> prev(static_cast<std::size_t>(spec.n_streams), 0);
    prev[0] = 1;
    for (int j = 0; j < spec.n_columns(); ++j) {
        std::vector<char> cur(prev.size(), 0);
        const bool sub = spec.column_kinds[j] == ColumnKind::Sub;
        for (int step = 0; step < spec.n_streams; ++step) {
            const int i = sub ? step : spec.n_streams - 1 - step;
            bool active = false;
            if (has_residual_unit(spec, i, j) && spec.mask.residual_on(i, j) && prev[i]) {
                active = true;
            }
            if (has_vertical_unit(spec, i, j) && spec.mask.vertical_on(i, j) && cur[sub ? i - 1 : i + 1]) {
                active = true;
            }
            cur[i] = active ? 1 : 0;
        }
        prev = cur;
    }
    return prev[0] != 0;
}

void add_bn(auto& out, const std::string& prefix, auto& bn, bool frozen) {
    out.push_back({prefix + ".beta", &bn.beta, TensorRole::Parameter, frozen});
    out.push_back({prefix + ".gamma", &bn.gamma, TensorRole::Parameter, frozen});
    out.push_back({prefix + ".running_mean", &bn.running_mean, TensorRole::Buffer, frozen});
    out.push_back({prefix + ".running_var", &bn.running_var, TensorRole::Buffer, frozen});
}

void add_conv(auto& out, const std::string& prefix, auto& conv, bool frozen) {
    if (conv.bias.defined()) {
        out.push_back({prefix + ".bias", &conv.bias, TensorRole::Parameter, frozen});
    }
    out.push_back({prefix + ".weight", &conv.weight, TensorRole::Parameter, frozen});
}

template <typename TensorPtr>
struct LocalEntry {
    std::string name;
    TensorPtr tensor;
    TensorRole role;
    bool frozen;
};

}  // namespace

template <typename T>
template <typename M, typename V>
void GridModel<T>::visit(M& model, V&& fn) {
    using Ptr = decltype(&model.head_.weight);
    using Entry = LocalEntry<Ptr>;
    auto emit = [&](const std::string& scope, std::optional<BlockCoord> coord, std::vector<Entry>& entries) {
        std::sort(entries.begin(), entries.end(), [](const Entry& a, const Entry& b) { return a.name < b.name; });
        for (auto& e : entries) {
            fn(scope + "." + e.name, coord, e.tensor, e.role, e.frozen);
        }
    };
    {
        std::vector<Entry> entries;
        add_bn(entries, "bn", model.stem_bn_, false);
        add_conv(entries, "conv", model.stem_conv_, false);
        emit("stem", std::nullopt, entries);
    }
    const ConnectionMask& mask = model.spec_.mask;
    for (auto& [coord, blk] : model.blocks_) {
        std::vector<Entry> entries;
        const bool res_off = !mask.residual_on(coord.stream, coord.column);
        const bool vert_off = !mask.vertical_on(coord.stream, coord.column);
        if (blk.res) {
            add_bn(entries, "res.bn1", blk.res->bn1, res_off);
            add_conv(entries, "res.conv1", blk.res->conv1, res_off);
            add_bn(entries, "res.bn2", blk.res->bn2, res_off);
            add_conv(entries, "res.conv2", blk.res->conv2, res_off);
        }
        if (blk.vertical) {
            const bool sub = blk.kind == ColumnKind::Sub;
            add_bn(entries, sub ? "sub.bn" : "up.bn", blk.vertical->bn, vert_off);
            add_conv(entries, sub ? "sub.conv" : "up.deconv", blk.vertical->conv, vert_off);
        }
        if (blk.fuse_proj) {
            add_conv(entries, "fuse", *blk.fuse_proj, res_off && vert_off);
        }
        emit("block" + coord.str(), coord, entries);
    }
    {
        std::vector<Entry> entries;
        add_conv(entries, "conv", model.head_, false);
        emit("head", std::nullopt, entries);
    }
}

template <typename T>
GridModel<T> GridModel<T>::clone() const {
    GridModel out;
    out.spec_ = spec_;
    out.input_hw_ = input_hw_;
    out.stream_shapes_ = stream_shapes_;
    out.eval_order_ = eval_order_;
    out.stem_bn_ = stem_bn_;
    out.stem_conv_ = stem_conv_;
    out.blocks_ = blocks_;
    out.head_ = head_;
    visit(out, [](const std::string&, std::optional<BlockCoord>, Tensor<T>* t, TensorRole, bool) {
        *t = t->clone();
    });
    return out;
}

template <typename T>
GridBlock<T>& GridModel<T>::block(BlockCoord c) {
    auto it = blocks_.find(c);
    if (it == blocks_.end()) {
        throw std::out_of_range("no grid block at " + c.str());
    }
    return it->second;
}

template <typename T>
const GridBlock<T>& GridModel<T>::block(BlockCoord c) const {
    auto it = blocks_.find(c);
    if (it == blocks_.end()) {
        throw std::out_of_range("no grid block at " + c.str());
    }
    return it->second;
}

template <typename T>
std::vector<NamedTensor<T>> GridModel<T>::named_tensors() {
    std::vector<NamedTensor<T>> out;
    visit(*this, [&](const std::string& name, std::optional<BlockCoord> coord, Tensor<T>* t, TensorRole role,
                     bool frozen) { out.push_back({name, coord, t, role, frozen}); });
    return out;
}

template <typename T>
std::vector<NamedTensor<T, true>> GridModel<T>::named_tensors() const {
    std::vector<NamedTensor<T, true>> out;
    visit(*this, [&](const std::string& name, std::optional<BlockCoord> coord, const Tensor<T>* t, TensorRole role,
                     bool frozen) { out.push_back({name, coord, t, role, frozen}); });
    return out;
}

template <typename T>
std::vector<Tensor<T>*> GridModel<T>::trainable_parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& e : named_tensors()) {
        if (e.role == TensorRole::Parameter && !e.frozen) {
            out.push_back(e.tensor);
        }
    }
    return out;
}

template <typename T>
void GridModel<T>::zero_grad() {
    for (auto& e : named_tensors()) {
        if (e.role == TensorRole::Parameter) {
            e.tensor->zero_grad();
        }
    }
}

template <typename T>
void GridModel<T>::set_mask(const ConnectionMask& mask) {
    GridSpec next = spec_;
    next.mask = mask;
    next.validate();
    if (!output_reachable(next)) {
        throw std::invalid_argument("mask leaves the output block unreachable from the input");
    }
    spec_ = next;
}

template <typename T>
GridModel<T> build_grid(const GridSpec& spec_in, std::pair<int, int> input_hw, std::uint64_t init_seed) {
    const GridSpec spec = spec_in.normalized();
    const int min_side = min_input_side(spec);
    if (input_hw.first < min_side || input_hw.second < min_side) {
        throw std::invalid_argument("input " + std::to_string(input_hw.first) + "x" + std::to_string(input_hw.second) +
                                    " too small for " + std::to_string(spec.n_streams) + " streams (need >= " +
                                    std::to_string(min_side) + " per side)");
    }
    if (!output_reachable(spec)) {
        throw std::invalid_argument("mask leaves the output block unreachable from the input");
    }
    GridModel<T> model;
    model.spec_ = spec;
    model.input_hw_ = input_hw;
    for (int i = 0; i < spec.n_streams; ++i) {
        model.stream_shapes_.push_back(stream_dims(spec, i, input_hw));
    }
    Initializer<T> init(init_seed);
    // Convolutions inside units carry no bias: every unit output is batch
    // normalized before the next convolution, which cancels a per-channel
    // offset. Only the stem and the head have biases.
    const int f0 = spec.base_features;
    model.stem_bn_ = BatchNormState<T>::make(spec.image_channels);
    model.stem_conv_ = init.conv(f0, spec.image_channels, 3, 1, true);

    for (int j = 0; j < spec.n_columns(); ++j) {
        const ColumnKind kind = spec.column_kinds[j];
        for (int step = 0; step < spec.n_streams; ++step) {
            const int i = kind == ColumnKind::Sub ? step : spec.n_streams - 1 - step;
            const bool has_res = has_residual_unit(spec, i, j);
            const bool has_vert = has_vertical_unit(spec, i, j);
            if (!has_res && !has_vert) {
                continue;
            }
            const int fi = model.stream_shapes_[i].features;
            GridBlock<T> blk;
            blk.coord = BlockCoord{i, j};
            blk.kind = kind;
            if (has_res) {
                ResidualUnit<T> ru;
                ru.bn1 = BatchNormState<T>::make(fi);
                ru.conv1 = init.conv(fi, fi, 3, 1, false);
                ru.bn2 = BatchNormState<T>::make(fi);
                ru.conv2 = init.conv(fi, fi, 3, 1, false);
                blk.res = std::move(ru);
            }
            if (has_vert) {
                SamplingUnit<T> su;
                if (kind == ColumnKind::Sub) {
                    const int src = model.stream_shapes_[i - 1].features;
                    su.bn = BatchNormState<T>::make(src);
                    su.conv = init.conv(fi, src, 3, 2, false);
                } else {
                    const int src = model.stream_shapes_[i + 1].features;
                    su.bn = BatchNormState<T>::make(src);
                    su.conv = init.deconv(src, fi, 3);
                }
                blk.vertical = std::move(su);
            }
            if (spec.fusion == Fusion::Concat) {
                const int slots = concat_slots(has_res, has_vert);
                if (slots >= 2) {
                    ConvParams<T> proj = init.conv(fi, slots * fi, 1, 1, false);
                    proj.padding = Padding{};
                    blk.fuse_proj = std::move(proj);
                }
            }
            model.blocks_.emplace(blk.coord, std::move(blk));
            model.eval_order_.push_back(BlockCoord{i, j});
        }
    }
    model.head_ = init.conv(spec.num_classes, f0, 1, 1, true);
    model.head_.padding = Padding{};
    return model;
}

template <typename T>
FusionTerms<T> fuse_block(GridBlock<T>& block, const Tensor<T>* horizontal_in, const Tensor<T>* vertical_in,
                          const BlockContext& ctx, Tape<T>* tape) {
    if (horizontal_in == nullptr && vertical_in == nullptr) {
        throw std::invalid_argument("fuse_block " + block.coord.str() + ": both inputs absent");
    }
    if (horizontal_in != nullptr && !block.res) {
        throw std::invalid_argument("fuse_block " + block.coord.str() + ": no residual unit for horizontal input");
    }
    if (vertical_in != nullptr && !block.vertical) {
        throw std::invalid_argument("fuse_block " + block.coord.str() + ": no sampling unit for vertical input");
    }
    FusionTerms<T> terms;
    const std::pair<int, int> target_hw{ctx.target.height, ctx.target.width};
    if (horizontal_in != nullptr) {
        terms.identity = *horizontal_in;
        if (ctx.keep_residual) {
            ResidualUnit<T>& ru = *block.res;
            Tensor<T> h = relu(batch_norm(*horizontal_in, ru.bn1, ctx.mode, tape), tape);
            h = conv2d(h, ru.conv1, tape);
            h = relu(batch_norm(h, ru.bn2, ctx.mode, tape), tape);
            terms.residual = conv2d(h, ru.conv2, tape);
        }
    }
    if (vertical_in != nullptr) {
        SamplingUnit<T>& su = *block.vertical;
        Tensor<T> v = relu(batch_norm(*vertical_in, su.bn, ctx.mode, tape), tape);
        if (block.kind == ColumnKind::Sub) {
            terms.vertical = conv2d_down(v, su.conv, tape);
            if (ctx.vertical_residual) {
                terms.shortcut = shortcut_down(*vertical_in, tape);
            }
        } else {
            terms.vertical = deconv2d_up(v, su.conv, target_hw, tape);
            if (ctx.vertical_residual) {
                terms.shortcut = shortcut_up(*vertical_in, target_hw, tape);
            }
        }
    }

    if (ctx.fusion == Fusion::Sum || !block.fuse_proj) {
        Tensor<T> out;
        for (const Tensor<T>* t : {&terms.identity, &terms.residual, &terms.vertical, &terms.shortcut}) {
            if (!t->defined()) {
                continue;
            }
            out = out.defined() ? add(out, *t, tape) : *t;
        }
        terms.output = out;
        return terms;
    }

    // Concat: fixed slots [identity, residual, vertical(+shortcut)], with
    // zeros standing in for absent or gated addends.
    const Tensor<T>& any = horizontal_in != nullptr ? *horizontal_in : terms.vertical;
    const Shape slot_shape{any.shape().n, ctx.target.features, ctx.target.height, ctx.target.width};
    std::vector<Tensor<T>> parts;
    if (block.res) {
        parts.push_back(terms.identity.defined() ? terms.identity : Tensor<T>(slot_shape));
        parts.push_back(terms.residual.defined() ? terms.residual : Tensor<T>(slot_shape));
    }
    if (block.vertical) {
        Tensor<T> v = terms.vertical.defined() ? terms.vertical : Tensor<T>(slot_shape);
        if (terms.shortcut.defined()) {
            v = add(v, terms.shortcut, tape);
        }
        parts.push_back(v);
    }
    const Tensor<T> joined = concat_channels<T>(parts, tape);
    terms.output = conv2d(joined, *block.fuse_proj, tape);
    return terms;
}

template <typename T>
ForwardResult<T> forward(GridModel<T>& model, const Tensor<T>& batch, Mode mode, const DropMask* drop,
                         Tape<T>* tape) {
    const GridSpec& spec = model.spec();
    if (drop != nullptr && mode != Mode::Train) {
        throw std::invalid_argument("forward: drop mask given in eval mode");
    }
    if (drop != nullptr && (drop->streams != spec.n_streams || drop->columns != spec.n_columns())) {
        throw std::invalid_argument("forward: drop mask dimensions do not match the grid");
    }
    const Shape& xs = batch.shape();
    if (xs.c != spec.image_channels) {
        throw std::invalid_argument("forward: batch " + xs.str() + " has " + std::to_string(xs.c) +
                                    " channels, grid expects " + std::to_string(spec.image_channels));
    }
    const int min_side = min_input_side(spec);
    if (xs.h < min_side || xs.w < min_side) {
        throw std::invalid_argument("forward: batch " + xs.str() + " smaller than minimum side " +
                                    std::to_string(min_side));
    }
    std::vector<StreamDims> dims;
    for (int i = 0; i < spec.n_streams; ++i) {
        dims.push_back(stream_dims(spec, i, {xs.h, xs.w}));
    }

    ForwardResult<T> result;
    Tensor<T> x = batch_norm(batch, model.stem_bn(), mode, tape);
    result.stem = conv2d(x, model.stem_conv(), tape);

    std::vector<Tensor<T>> prev(static_cast<std::size_t>(spec.n_streams));
    prev[0] = result.stem;
    std::vector<Tensor<T>> cur(prev.size());
    int column = -1;
    for (const BlockCoord& c : model.eval_order()) {
        if (c.column != column) {
            if (column >= 0) {
                prev.swap(cur);
            }
            std::fill(cur.begin(), cur.end(), Tensor<T>());
            column = c.column;
        }
        GridBlock<T>& blk = model.block(c);
        const int i = c.stream;
        const int j = c.column;
        const Tensor<T>* horiz = nullptr;
        const Tensor<T>* vert = nullptr;
        if (blk.res && spec.mask.residual_on(i, j) && prev[i].defined()) {
            horiz = &prev[i];
        }
        if (blk.vertical && spec.mask.vertical_on(i, j)) {
            const int src = blk.kind == ColumnKind::Sub ? i - 1 : i + 1;
            if (cur[src].defined()) {
                vert = &cur[src];
            }
        }
        if (horiz == nullptr && vert == nullptr) {
            continue;
        }
        BlockContext ctx;
        ctx.mode = mode;
        ctx.keep_residual = drop == nullptr || drop->kept(i, j);
        ctx.fusion = spec.fusion;
        ctx.vertical_residual = spec.vertical_residual;
        ctx.target = dims[i];
        FusionTerms<T> terms = fuse_block(blk, horiz, vert, ctx, tape);
        const Shape expect{xs.n, dims[i].features, dims[i].height, dims[i].width};
        if (!(terms.output.shape() == expect)) {
            throw std::runtime_error("forward: block " + c.str() + " produced " + terms.output.shape().str() +
                                     ", stream shape is " + expect.str());
        }
        cur[i] = terms.output;
        result.features.emplace(c, terms.output);
    }
    if (column >= 0) {
        prev.swap(cur);
    }
    if (!prev[0].defined()) {
        throw std::runtime_error("forward: output block is inactive under the current mask");
    }
    result.logits = conv2d(prev[0], model.head(), tape);
    return result;
}

template <typename T>
std::int64_t count_params_exact(const GridModel<T>& model) {
    std::int64_t total = 0;
    for (const auto& e : model.named_tensors()) {
        if (e.role == TensorRole::Parameter) {
            total += static_cast<std::int64_t>(e.tensor->numel());
        }
    }
    return total;
}

std::int64_t exact_activation_count(const GridSpec& spec_in, std::pair<int, int> input_hw) {
    const GridSpec spec = spec_in.normalized();
    std::int64_t total = 0;
    for (int j = 0; j < spec.n_columns(); ++j) {
        for (int i = 0; i < spec.n_streams; ++i) {
            if (has_residual_unit(spec, i, j) || has_vertical_unit(spec, i, j)) {
                const StreamDims d = stream_dims(spec, i, input_hw);
                total += static_cast<std::int64_t>(d.features) * d.height * d.width;
            }
        }
    }
    return total;
}

#define GRIDNET_INSTANTIATE_GRID(T)                                                                           \
    template class GridModel<T>;                                                                              \
    template GridModel<T> build_grid<T>(const GridSpec&, std::pair<int, int>, std::uint64_t);                 \
    template FusionTerms<T> fuse_block(GridBlock<T>&, const Tensor<T>*, const Tensor<T>*, const BlockContext&, \
                                       Tape<T>*);                                                             \
    template ForwardResult<T> forward(GridModel<T>&, const Tensor<T>&, Mode, const DropMask*, Tape<T>*);      \
    template std::int64_t count_params_exact(const GridModel<T>&);

GRIDNET_INSTANTIATE_GRID(float)
GRIDNET_INSTANTIATE_GRID(double)

}  // namespace gridnet
