#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "gridnet/tensor.hpp"

namespace gridnet {

enum class Mode { Train, Eval };

struct Padding {
    int top = 0;
    int bottom = 0;
    int left = 0;
    int right = 0;

    static Padding same(int k) { return {(k - 1) / 2, (k - 1) / 2, (k - 1) / 2, (k - 1) / 2}; }
    static Padding uniform(int p) { return {p, p, p, p}; }
};

/// Convolution weights. For forward convolutions `weight` is
/// (out_c, in_c, k_h, k_w); transposed convolutions reuse the layout of the
/// strided convolution they are the adjoint of, i.e. (in_c, out_c, k_h, k_w).
/// `bias` is (1, out_c, 1, 1) or undefined.
template <typename T>
struct ConvParams {
    Tensor<T> weight;
    Tensor<T> bias;
    int stride = 1;
    Padding padding;
};

/// Output extent of a forward convolution along one axis.
int conv_out_size(int in, int pad_total, int k, int stride);

/// Output padding in {0,1} that makes a transposed convolution reach
/// `target`, or -1 when unreachable.
int transposed_output_padding(int in, int target, int pad_total, int k, int stride);

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params, Tape<T>* tape = nullptr);

/// Stride-2 convolution (subsampling unit).
template <typename T>
Tensor<T> conv2d_down(const Tensor<T>& input, const ConvParams<T>& params, Tape<T>* tape = nullptr);

/// Stride-2 transposed convolution producing exactly `target_hw`.
template <typename T>
Tensor<T> deconv2d_up(const Tensor<T>& input, const ConvParams<T>& params, std::pair<int, int> target_hw,
                      Tape<T>* tape = nullptr);

template <typename T>
struct BatchNormState {
    Tensor<T> gamma;         // (1,c,1,1), trainable
    Tensor<T> beta;          // (1,c,1,1), trainable
    Tensor<T> running_mean;  // (1,c,1,1), buffer
    Tensor<T> running_var;   // (1,c,1,1), buffer
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormState make(int channels);
};

/// Per-channel batch normalization. Train mode normalizes with batch
/// statistics over (n,h,w) and updates the running estimates (unbiased
/// variance); eval mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, Mode mode, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape = nullptr);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape = nullptr);

/// Channel-wise concatenation.
template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts, Tape<T>* tape = nullptr);

/// Sum of every element, as a (1,1,1,1) tensor.
template <typename T>
Tensor<T> sum_all(const Tensor<T>& input, Tape<T>* tape = nullptr);

/// Parameter-free shortcut used by the vertically residual variant:
/// nearest subsampling to (ceil(h/2), ceil(w/2)) with channels duplicated.
template <typename T>
Tensor<T> shortcut_down(const Tensor<T>& input, Tape<T>* tape = nullptr);

/// Parameter-free shortcut for upsampling: nearest upsampling to
/// `target_hw` with the two channel halves averaged.
template <typename T>
Tensor<T> shortcut_up(const Tensor<T>& input, std::pair<int, int> target_hw, Tape<T>* tape = nullptr);

inline constexpr int kIgnoreLabel = 255;

/// Mean over non-ignored pixels of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tape<T>* tape = nullptr,
                                int ignore_label = kIgnoreLabel);

/// Per-pixel argmax over channels, (n*h*w) labels in NHW order.
template <typename T>
std::vector<int> argmax_channels(const Tensor<T>& logits);

}  // namespace gridnet
