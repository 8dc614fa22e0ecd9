#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "gridnet/dropout.hpp"
#include "gridnet/grid_spec.hpp"
#include "gridnet/ops.hpp"
#include "gridnet/tensor.hpp"

namespace gridnet {

/// BN -> ReLU -> 3x3 conv -> BN -> ReLU -> 3x3 conv, channel preserving.
template <typename T>
struct ResidualUnit {
    BatchNormState<T> bn1;
    ConvParams<T> conv1;
    BatchNormState<T> bn2;
    ConvParams<T> conv2;
};

/// BN -> ReLU -> stride-2 3x3 conv (Sub) or transposed conv (Up).
template <typename T>
struct SamplingUnit {
    BatchNormState<T> bn;
    ConvParams<T> conv;
};

template <typename T>
struct GridBlock {
    BlockCoord coord;
    ColumnKind kind = ColumnKind::Sub;
    std::optional<ResidualUnit<T>> res;
    std::optional<SamplingUnit<T>> vertical;
    /// 1x1 projection back to F_i, concat fusion only.
    std::optional<ConvParams<T>> fuse_proj;
};

enum class TensorRole { Parameter, Buffer };

template <typename T, bool Const = false>
struct NamedTensor {
    std::string name;
    std::optional<BlockCoord> coord;
    std::conditional_t<Const, const Tensor<T>*, Tensor<T>*> tensor = nullptr;
    TensorRole role = TensorRole::Parameter;
    /// Masked-out parameters stay allocated but are never updated.
    bool frozen = false;
};

template <typename T>
class GridModel {
public:
    GridModel() = default;
    GridModel(GridModel&&) noexcept = default;
    GridModel& operator=(GridModel&&) noexcept = default;
    GridModel(const GridModel&) = delete;
    GridModel& operator=(const GridModel&) = delete;

    /// Deep copy: no storage is shared with the original.
    GridModel clone() const;

    const GridSpec& spec() const { return spec_; }
    std::pair<int, int> input_hw() const { return input_hw_; }
    const std::vector<StreamDims>& stream_shapes() const { return stream_shapes_; }
    const std::vector<BlockCoord>& eval_order() const { return eval_order_; }

    bool has_block(BlockCoord c) const { return blocks_.contains(c); }
    GridBlock<T>& block(BlockCoord c);
    const GridBlock<T>& block(BlockCoord c) const;
    const std::map<BlockCoord, GridBlock<T>>& blocks() const { return blocks_; }

    BatchNormState<T>& stem_bn() { return stem_bn_; }
    ConvParams<T>& stem_conv() { return stem_conv_; }
    ConvParams<T>& head() { return head_; }
    const BatchNormState<T>& stem_bn() const { return stem_bn_; }
    const ConvParams<T>& stem_conv() const { return stem_conv_; }
    const ConvParams<T>& head() const { return head_; }

    /// Every parameter and buffer in checkpoint order: stem, blocks sorted by
    /// (i,j) with names sorted lexicographically inside a block, then head.
    std::vector<NamedTensor<T>> named_tensors();
    std::vector<NamedTensor<T, true>> named_tensors() const;
    /// Trainable, non-frozen parameters.
    std::vector<Tensor<T>*> trainable_parameters();

    void zero_grad();
    void set_mask(const ConnectionMask& mask);

private:
    template <typename M, typename V>
    static void visit(M& model, V&& fn);

    template <typename U>
    friend GridModel<U> build_grid(const GridSpec&, std::pair<int, int>, std::uint64_t);

    GridSpec spec_;
    std::pair<int, int> input_hw_{0, 0};
    std::vector<StreamDims> stream_shapes_;
    std::vector<BlockCoord> eval_order_;
    BatchNormState<T> stem_bn_;
    ConvParams<T> stem_conv_;
    std::map<BlockCoord, GridBlock<T>> blocks_;
    ConvParams<T> head_;
};

/// Materializes stem, every structurally present block, and head. Stream
/// shapes are recorded for `input_hw`; parameters are drawn from `init_seed`.
template <typename T>
GridModel<T> build_grid(const GridSpec& spec, std::pair<int, int> input_hw, std::uint64_t init_seed = 0);

/// Which addends take part in a block, and the shape it must produce.
struct BlockContext {
    Mode mode = Mode::Eval;
    bool keep_residual = true;
    Fusion fusion = Fusion::Sum;
    bool vertical_residual = false;
    StreamDims target;
};

template <typename T>
struct FusionTerms {
    Tensor<T> identity;
    Tensor<T> residual;
    Tensor<T> vertical;
    Tensor<T> shortcut;
    Tensor<T> output;
};

/// X = identity + residual(identity) + vertical(neighbour) (sum fusion), with
/// absent or gated addends left out. Throws when both inputs are absent.
template <typename T>
FusionTerms<T> fuse_block(GridBlock<T>& block, const Tensor<T>* horizontal_in, const Tensor<T>* vertical_in,
                          const BlockContext& ctx, Tape<T>* tape = nullptr);

template <typename T>
struct ForwardResult {
    Tensor<T> logits;
    Tensor<T> stem;
    std::map<BlockCoord, Tensor<T>> features;
};

/// Evaluates the grid. `drop` gates residual units and is only accepted in
/// train mode. Any input of at least min_input_side() is accepted; the
/// stream shapes for that input are enforced block by block.
template <typename T>
ForwardResult<T> forward(GridModel<T>& model, const Tensor<T>& batch, Mode mode, const DropMask* drop = nullptr,
                         Tape<T>* tape = nullptr);

template <typename T>
std::int64_t count_params_exact(const GridModel<T>& model);

/// Sum of the sizes of every block output for one image of `input_hw`.
std::int64_t exact_activation_count(const GridSpec& spec, std::pair<int, int> input_hw);

/// Structural presence of units at (i,j), independent of the mask.
bool has_residual_unit(const GridSpec& spec, int i, int j);
bool has_vertical_unit(const GridSpec& spec, int i, int j);

extern template class GridModel<float>;
extern template class GridModel<double>;

}  // namespace gridnet
