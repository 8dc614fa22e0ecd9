#include "gridnet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace gridnet {

namespace {

// Geometry of a correlation from `src` (C_in,H,W) to `dst` (C_out,OH,OW)
// with weights (C_out,C_in,KH,KW). Transposed convolutions run the same
// kernels with the roles of src and dst swapped.
struct CorrGeom {
    int in_c, in_h, in_w;
    int out_c, out_h, out_w;
    int k_h, k_w;
    int stride;
    int pad_top, pad_left;
};

// Range of output rows [lo, hi) whose tap `k` lands inside [0, in).
inline std::pair<int, int> valid_range(int k, int pad, int stride, int in, int out) {
    const int lo_num = pad - k;
    int lo = lo_num <= 0 ? 0 : (lo_num + stride - 1) / stride;
    const int hi_num = in - 1 + pad - k;
    int hi = hi_num < 0 ? 0 : hi_num / stride + 1;
    lo = std::min(lo, out);
    hi = std::min(hi, out);
    return {lo, std::max(lo, hi)};
}

// dst[oc] += sum_{ic,ky,kx} w[oc,ic,ky,kx] * src[ic, oy*s+ky-pt, ox*s+kx-pl]
// Summation per output element runs in (ic, ky, kx) order.
template <typename T>
void corr_forward(const T* __restrict src, const T* __restrict w, T* __restrict dst, const CorrGeom& g) {
    const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
    const int s = g.stride;
    for (int oc = 0; oc < g.out_c; ++oc) {
        T* dplane = dst + oc * out_plane;
        for (int ic = 0; ic < g.in_c; ++ic) {
            const T* splane = src + ic * in_plane;
            const T* wk = w + (static_cast<std::size_t>(oc) * g.in_c + ic) * g.k_h * g.k_w;
            for (int ky = 0; ky < g.k_h; ++ky) {
                const auto [oy0, oy1] = valid_range(ky, g.pad_top, s, g.in_h, g.out_h);
                for (int kx = 0; kx < g.k_w; ++kx) {
                    const T wv = wk[ky * g.k_w + kx];
                    const auto [ox0, ox1] = valid_range(kx, g.pad_left, s, g.in_w, g.out_w);
                    for (int oy = oy0; oy < oy1; ++oy) {
                        const T* srow = splane + static_cast<std::size_t>(oy * s + ky - g.pad_top) * g.in_w;
                        T* drow = dplane + static_cast<std::size_t>(oy) * g.out_w;
                        if (s == 1) {
                            const T* sp = srow + (kx - g.pad_left);
                            for (int ox = ox0; ox < ox1; ++ox) {
                                drow[ox] += wv * sp[ox];
                            }
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox) {
                                drow[ox] += wv * srow[ox * s + kx - g.pad_left];
                            }
                        }
                    }
                }
            }
        }
    }
}

// src_grad[ic] += sum_{oc,ky,kx} w[oc,ic,ky,kx] * dst_grad[oc] scattered back.
template <typename T>
void corr_scatter(const T* __restrict dgrad, const T* __restrict w, T* __restrict sgrad, const CorrGeom& g) {
    const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
    const int s = g.stride;
    for (int ic = 0; ic < g.in_c; ++ic) {
        T* splane = sgrad + ic * in_plane;
        for (int oc = 0; oc < g.out_c; ++oc) {
            const T* dplane = dgrad + oc * out_plane;
            const T* wk = w + (static_cast<std::size_t>(oc) * g.in_c + ic) * g.k_h * g.k_w;
            for (int ky = 0; ky < g.k_h; ++ky) {
                const auto [oy0, oy1] = valid_range(ky, g.pad_top, s, g.in_h, g.out_h);
                for (int kx = 0; kx < g.k_w; ++kx) {
                    const T wv = wk[ky * g.k_w + kx];
                    const auto [ox0, ox1] = valid_range(kx, g.pad_left, s, g.in_w, g.out_w);
                    for (int oy = oy0; oy < oy1; ++oy) {
                        T* srow = splane + static_cast<std::size_t>(oy * s + ky - g.pad_top) * g.in_w;
                        const T* drow = dplane + static_cast<std::size_t>(oy) * g.out_w;
                        if (s == 1) {
                            T* sp = srow + (kx - g.pad_left);
                            for (int ox = ox0; ox < ox1; ++ox) {
                                sp[ox] += wv * drow[ox];
                            }
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox) {
                                srow[ox * s + kx - g.pad_left] += wv * drow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

// wgrad[oc,ic,ky,kx] += sum_{oy,ox} dst_grad[oc,oy,ox] * src[ic,iy,ix]
template <typename T>
void corr_weight_grad(const T* __restrict dgrad, const T* __restrict src, T* __restrict wgrad, const CorrGeom& g,
                      std::vector<T>& acc) {
    const std::size_t in_plane = static_cast<std::size_t>(g.in_h) * g.in_w;
    const std::size_t out_plane = static_cast<std::size_t>(g.out_h) * g.out_w;
    const int s = g.stride;
    acc.assign(static_cast<std::size_t>(g.out_w), T(0));
    T* a = acc.data();
    for (int oc = 0; oc < g.out_c; ++oc) {
        const T* dplane = dgrad + oc * out_plane;
        for (int ic = 0; ic < g.in_c; ++ic) {
            const T* splane = src + ic * in_plane;
            T* wk = wgrad + (static_cast<std::size_t>(oc) * g.in_c + ic) * g.k_h * g.k_w;
            for (int ky = 0; ky < g.k_h; ++ky) {
                const auto [oy0, oy1] = valid_range(ky, g.pad_top, s, g.in_h, g.out_h);
                for (int kx = 0; kx < g.k_w; ++kx) {
                    const auto [ox0, ox1] = valid_range(kx, g.pad_left, s, g.in_w, g.out_w);
                    std::fill(a, a + g.out_w, T(0));
                    for (int oy = oy0; oy < oy1; ++oy) {
                        const T* srow = splane + static_cast<std::size_t>(oy * s + ky - g.pad_top) * g.in_w;
                        const T* drow = dplane + static_cast<std::size_t>(oy) * g.out_w;
                        if (s == 1) {
                            const T* sp = srow + (kx - g.pad_left);
                            for (int ox = ox0; ox < ox1; ++ox) {
                                a[ox] += drow[ox] * sp[ox];
                            }
                        } else {
                            for (int ox = ox0; ox < ox1; ++ox) {
                                a[ox] += drow[ox] * srow[ox * s + kx - g.pad_left];
                            }
                        }
                    }
                    T total = T(0);
                    for (int ox = ox0; ox < ox1; ++ox) {
                        total += a[ox];
                    }
                    wk[ky * g.k_w + kx] += total;
                }
            }
        }
    }
}

template <typename T>
void check_conv_params(const ConvParams<T>& p, const char* op) {
    if (!p.weight.defined()) {
        throw std::invalid_argument(std::string(op) + ": weight is undefined");
    }
    if (p.stride < 1) {
        throw std::invalid_argument(std::string(op) + ": stride must be positive");
    }
    const Padding& pd = p.padding;
    if (pd.top < 0 || pd.bottom < 0 || pd.left < 0 || pd.right < 0) {
        throw std::invalid_argument(std::string(op) + ": negative padding");
    }
}

template <typename T>
void add_bias(T* out, const Tensor<T>& bias, int n, int c, std::size_t plane) {
    if (!bias.defined()) {
        return;
    }
    const T* b = bias.data();
    for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < c; ++ic) {
            T* p = out + (static_cast<std::size_t>(in) * c + ic) * plane;
            std::fill(p, p + plane, b[ic]);
        }
    }
}

template <typename T>
void accumulate_bias_grad(const T* gout, Tensor<T> bias, int n, int c, std::size_t plane) {
    auto gb = bias.grad();
    for (int ic = 0; ic < c; ++ic) {
        T total = T(0);
        for (int in = 0; in < n; ++in) {
            const T* p = gout + (static_cast<std::size_t>(in) * c + ic) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                total += p[k];
            }
        }
        gb[ic] += total;
    }
}

template <typename T>
Tensor<T> conv_impl(const Tensor<T>& input, const ConvParams<T>& params, Tape<T>* tape, const char* op) {
    check_conv_params(params, op);
    const Shape& xs = input.shape();
    const Shape& ws = params.weight.shape();
    if (ws.c != xs.c) {
        throw std::invalid_argument(std::string(op) + ": input " + xs.str() + " incompatible with weight " +
                                    ws.str() + " (channel mismatch)");
    }
    if (params.bias.defined() && params.bias.numel() != static_cast<std::size_t>(ws.n)) {
        throw std::invalid_argument(std::string(op) + ": bias " + params.bias.shape().str() +
                                    " does not match weight " + ws.str());
    }
    const Padding& pd = params.padding;
    const int oh = conv_out_size(xs.h, pd.top + pd.bottom, ws.h, params.stride);
    const int ow = conv_out_size(xs.w, pd.left + pd.right, ws.w, params.stride);
    if (oh <= 0 || ow <= 0) {
        throw std::invalid_argument(std::string(op) + ": input " + xs.str() + " too small for weight " + ws.str());
    }
    const CorrGeom g{xs.c, xs.h, xs.w, ws.n, oh, ow, ws.h, ws.w, params.stride, pd.top, pd.left};
    const bool rec = needs_grad(tape, {&input, &params.weight, &params.bias});
    Tensor<T> out(Shape{xs.n, ws.n, oh, ow}, rec);
    const std::size_t in_sz = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
    const std::size_t out_sz = static_cast<std::size_t>(ws.n) * oh * ow;
    add_bias(out.data(), params.bias, xs.n, ws.n, static_cast<std::size_t>(oh) * ow);
    for (int n = 0; n < xs.n; ++n) {
        corr_forward(input.data() + n * in_sz, params.weight.data(), out.data() + n * out_sz, g);
    }
    if (rec) {
        tape->record(op, out, [input = Tensor<T>(input), params = ConvParams<T>(params), out, g, in_sz, out_sz]() mutable {
            const T* gout = out.grad().data();
            const int batch = input.shape().n;
            if (input.requires_grad()) {
                T* gin = input.grad().data();
                for (int n = 0; n < batch; ++n) {
                    corr_scatter(gout + n * out_sz, params.weight.data(), gin + n * in_sz, g);
                }
            }
            if (params.weight.requires_grad()) {
                std::vector<T> acc;
                T* gw = params.weight.grad().data();
                for (int n = 0; n < batch; ++n) {
                    corr_weight_grad(gout + n * out_sz, input.data() + n * in_sz, gw, g, acc);
                }
            }
            if (params.bias.defined() && params.bias.requires_grad()) {
                accumulate_bias_grad(gout, params.bias, batch, g.out_c, static_cast<std::size_t>(g.out_h) * g.out_w);
            }
        });
    }
    return out;
}

std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

int conv_out_size(int in, int pad_total, int k, int stride) {
    const int span = in + pad_total - k;
    if (span < 0) {
        return 0;
    }
    return span / stride + 1;
}

int transposed_output_padding(int in, int target, int pad_total, int k, int stride) {
    const int base = (in - 1) * stride - pad_total + k;
    for (int op = 0; op <= 1; ++op) {
        if (base + op == target) {
            return op;
        }
    }
    return -1;
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const ConvParams<T>& params, Tape<T>* tape) {
    return conv_impl(input, params, tape, "conv2d");
}

template <typename T>
Tensor<T> conv2d_down(const Tensor<T>& input, const ConvParams<T>& params, Tape<T>* tape) {
    if (params.stride != 2) {
        throw std::invalid_argument("conv2d_down: stride must be 2, got " + std::to_string(params.stride));
    }
    if (input.shape().h == 0 || input.shape().w == 0) {
        throw std::invalid_argument("conv2d_down: empty spatial input " + input.shape().str());
    }
    return conv_impl(input, params, tape, "conv2d_down");
}

template <typename T>
Tensor<T> deconv2d_up(const Tensor<T>& input, const ConvParams<T>& params, std::pair<int, int> target_hw,
                      Tape<T>* tape) {
    check_conv_params(params, "deconv2d_up");
    if (params.stride != 2) {
        throw std::invalid_argument("deconv2d_up: stride must be 2, got " + std::to_string(params.stride));
    }
    const Shape& xs = input.shape();
    const Shape& ws = params.weight.shape();  // (in_c, out_c, kh, kw)
    if (ws.n != xs.c) {
        throw std::invalid_argument("deconv2d_up: input " + xs.str() + " incompatible with weight " + ws.str() +
                                    " (channel mismatch)");
    }
    if (params.bias.defined() && params.bias.numel() != static_cast<std::size_t>(ws.c)) {
        throw std::invalid_argument("deconv2d_up: bias " + params.bias.shape().str() + " does not match weight " +
                                    ws.str());
    }
    const auto [th, tw] = target_hw;
    const Padding& pd = params.padding;
    const int op_h = transposed_output_padding(xs.h, th, pd.top + pd.bottom, ws.h, 2);
    const int op_w = transposed_output_padding(xs.w, tw, pd.left + pd.right, ws.w, 2);
    if (op_h < 0 || op_w < 0) {
        throw std::invalid_argument("deconv2d_up: target (" + std::to_string(th) + "," + std::to_string(tw) +
                                    ") unreachable from input " + xs.str() + " with output padding in {0,1}");
    }
    // Adjoint geometry: the strided conv maps target (ws.c channels) -> input (ws.n channels).
    const CorrGeom g{ws.c, th, tw, ws.n, xs.h, xs.w, ws.h, ws.w, 2, pd.top, pd.left};
    const bool rec = needs_grad(tape, {&input, &params.weight, &params.bias});
    Tensor<T> out(Shape{xs.n, ws.c, th, tw}, rec);
    const std::size_t in_sz = static_cast<std::size_t>(xs.c) * xs.h * xs.w;
    const std::size_t out_sz = static_cast<std::size_t>(ws.c) * th * tw;
    add_bias(out.data(), params.bias, xs.n, ws.c, static_cast<std::size_t>(th) * tw);
    for (int n = 0; n < xs.n; ++n) {
        corr_scatter(input.data() + n * in_sz, params.weight.data(), out.data() + n * out_sz, g);
    }
    if (rec) {
        tape->record("deconv2d_up", out, [input = Tensor<T>(input), params = ConvParams<T>(params), out, g, in_sz, out_sz]() mutable {
            const T* gout = out.grad().data();
            const int batch = input.shape().n;
            if (input.requires_grad()) {
                T* gin = input.grad().data();
                for (int n = 0; n < batch; ++n) {
                    corr_forward(gout + n * out_sz, params.weight.data(), gin + n * in_sz, g);
                }
            }
            if (params.weight.requires_grad()) {
                std::vector<T> acc;
                T* gw = params.weight.grad().data();
                for (int n = 0; n < batch; ++n) {
                    corr_weight_grad(input.data() + n * in_sz, gout + n * out_sz, gw, g, acc);
                }
            }
            if (params.bias.defined() && params.bias.requires_grad()) {
                accumulate_bias_grad(gout, params.bias, batch, g.in_c, static_cast<std::size_t>(g.in_h) * g.in_w);
            }
        });
    }
    return out;
}

template <typename T>
BatchNormState<T> BatchNormState<T>::make(int channels) {
    BatchNormState st;
    const Shape s{1, channels, 1, 1};
    st.gamma = Tensor<T>::full(s, T(1));
    st.gamma.set_requires_grad(true);
    st.beta = Tensor<T>(s, true);
    st.running_mean = Tensor<T>(s);
    st.running_var = Tensor<T>::full(s, T(1));
    return st;
}

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, BatchNormState<T>& state, Mode mode, Tape<T>* tape) {
    const Shape& xs = input.shape();
    const auto c = static_cast<std::size_t>(xs.c);
    if (state.gamma.numel() != c || state.beta.numel() != c || state.running_mean.numel() != c ||
        state.running_var.numel() != c) {
        throw std::invalid_argument("batch_norm: state sized for " + std::to_string(state.gamma.numel()) +
                                    " channels, input " + xs.str());
    }
    const std::size_t plane = xs.plane();
    const std::size_t m = static_cast<std::size_t>(xs.n) * plane;
    if (mode == Mode::Train && m <= 1) {
        throw std::invalid_argument("batch_norm: train mode needs more than one value per channel, input " +
                                    xs.str());
    }
    const bool rec = needs_grad(tape, {&input, &state.gamma, &state.beta});
    Tensor<T> out(xs, rec);
    Tensor<T> xhat(xs);
    std::vector<T> inv_std(c);
    const T* x = input.data();
    T* y = out.data();
    T* xh = xhat.data();
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        double var = 0.0;
        if (mode == Mode::Train) {
            for (int n = 0; n < xs.n; ++n) {
                const T* p = x + (n * c + ch) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    mean += p[k];
                }
            }
            mean /= static_cast<double>(m);
            for (int n = 0; n < xs.n; ++n) {
                const T* p = x + (n * c + ch) * plane;
                for (std::size_t k = 0; k < plane; ++k) {
                    const double d = p[k] - mean;
                    var += d * d;
                }
            }
            var /= static_cast<double>(m);
            const double mom = state.momentum;
            T& rm = state.running_mean.data()[ch];
            T& rv = state.running_var.data()[ch];
            rm = static_cast<T>((1.0 - mom) * rm + mom * mean);
            rv = static_cast<T>((1.0 - mom) * rv + mom * var * static_cast<double>(m) / static_cast<double>(m - 1));
        } else {
            mean = state.running_mean.data()[ch];
            var = state.running_var.data()[ch];
        }
        const T istd = static_cast<T>(1.0 / std::sqrt(var + state.eps));
        inv_std[ch] = istd;
        const T mu = static_cast<T>(mean);
        const T gm = state.gamma.data()[ch];
        const T bt = state.beta.data()[ch];
        for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = (n * c + ch) * plane;
            for (std::size_t k = 0; k < plane; ++k) {
                const T v = (x[off + k] - mu) * istd;
                xh[off + k] = v;
                y[off + k] = gm * v + bt;
            }
        }
    }
    if (rec) {
        tape->record("batch_norm", out,
                     [input = Tensor<T>(input), gamma = state.gamma, beta = state.beta, out, xhat, inv_std, mode, c, plane, m]() mutable {
                         const T* gy = out.grad().data();
                         const T* xh = xhat.data();
                         const int batch = input.shape().n;
                         T* gx = input.requires_grad() ? input.grad().data() : nullptr;
                         T* gg = gamma.requires_grad() ? gamma.grad().data() : nullptr;
                         T* gb = beta.requires_grad() ? beta.grad().data() : nullptr;
                         for (std::size_t ch = 0; ch < c; ++ch) {
                             T sum_dy = T(0);
                             T sum_dy_xh = T(0);
                             for (int n = 0; n < batch; ++n) {
                                 const std::size_t off = (n * c + ch) * plane;
                                 for (std::size_t k = 0; k < plane; ++k) {
                                     sum_dy += gy[off + k];
                                     sum_dy_xh += gy[off + k] * xh[off + k];
                                 }
                             }
                             if (gg != nullptr) {
                                 gg[ch] += sum_dy_xh;
                             }
                             if (gb != nullptr) {
                                 gb[ch] += sum_dy;
                             }
                             if (gx == nullptr) {
                                 continue;
                             }
                             const T scale = gamma.data()[ch] * inv_std[ch];
                             if (mode == Mode::Train) {
                                 const T mm = static_cast<T>(m);
                                 const T k1 = scale / mm;
                                 for (int n = 0; n < batch; ++n) {
                                     const std::size_t off = (n * c + ch) * plane;
                                     for (std::size_t k = 0; k < plane; ++k) {
                                         gx[off + k] += k1 * (mm * gy[off + k] - sum_dy - xh[off + k] * sum_dy_xh);
                                     }
                                 }
                             } else {
                                 for (int n = 0; n < batch; ++n) {
                                     const std::size_t off = (n * c + ch) * plane;
                                     for (std::size_t k = 0; k < plane; ++k) {
                                         gx[off + k] += scale * gy[off + k];
                                     }
                                 }
                             }
                         }
                     });
    }
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& input, Tape<T>* tape) {
    const bool rec = needs_grad(tape, {&input});
    Tensor<T> out(input.shape(), rec);
    const T* x = input.data();
    T* y = out.data();
    const std::size_t count = input.numel();
    for (std::size_t k = 0; k < count; ++k) {
        y[k] = x[k] > T(0) ? x[k] : T(0);
    }
    if (tape != nullptr && tape->tracking_kinks()) {
        std::uint64_t h = count;
        std::uint64_t word = 0;
        for (std::size_t k = 0; k < count; ++k) {
            word = (word << 1) | (x[k] > T(0) ? 1U : 0U);
            if ((k & 63U) == 63U) {
                h = mix64(h ^ word);
                word = 0;
            }
        }
        tape->fold_kink(mix64(h ^ word));
    }
    if (rec) {
        tape->record("relu", out, [input = Tensor<T>(input), out]() mutable {
            if (!input.requires_grad()) {
                return;
            }
            const T* x = input.data();
            const T* gy = out.grad().data();
            T* gx = input.grad().data();
            const std::size_t count = input.numel();
            for (std::size_t k = 0; k < count; ++k) {
                gx[k] += x[k] > T(0) ? gy[k] : T(0);
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b, Tape<T>* tape) {
    if (!(a.shape() == b.shape())) {
        throw std::invalid_argument("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
    }
    const bool rec = needs_grad(tape, {&a, &b});
    Tensor<T> out(a.shape(), rec);
    const T* x = a.data();
    const T* y = b.data();
    T* z = out.data();
    const std::size_t count = a.numel();
    for (std::size_t k = 0; k < count; ++k) {
        z[k] = x[k] + y[k];
    }
    if (rec) {
        tape->record("add", out, [a = Tensor<T>(a), b = Tensor<T>(b), out]() mutable {
            const T* gz = out.grad().data();
            const std::size_t count = out.numel();
            for (Tensor<T>* t : {&a, &b}) {
                if (!t->requires_grad()) {
                    continue;
                }
                T* g = t->grad().data();
                for (std::size_t k = 0; k < count; ++k) {
                    g[k] += gz[k];
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> concat_channels(std::span<const Tensor<T>> parts, Tape<T>* tape) {
    if (parts.empty()) {
        throw std::invalid_argument("concat_channels: no inputs");
    }
    const Shape& s0 = parts[0].shape();
    int total_c = 0;
    bool any_grad = false;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
            throw std::invalid_argument("concat_channels: shape mismatch " + s0.str() + " vs " + s.str());
        }
        total_c += s.c;
        any_grad = any_grad || p.requires_grad();
    }
    const bool rec = tape != nullptr && any_grad;
    Tensor<T> out(Shape{s0.n, total_c, s0.h, s0.w}, rec);
    const std::size_t plane = s0.plane();
    for (int n = 0; n < s0.n; ++n) {
        int c_off = 0;
        for (const auto& p : parts) {
            const std::size_t len = static_cast<std::size_t>(p.shape().c) * plane;
            const T* src = p.data() + n * len;
            std::copy(src, src + len, out.data() + (static_cast<std::size_t>(n) * total_c + c_off) * plane);
            c_off += p.shape().c;
        }
    }
    if (rec) {
        std::vector<Tensor<T>> saved(parts.begin(), parts.end());
        tape->record("concat_channels", out, [saved, out, total_c, plane]() mutable {
            const T* gz = out.grad().data();
            const int batch = out.shape().n;
            int c_off = 0;
            for (auto& p : saved) {
                const std::size_t len = static_cast<std::size_t>(p.shape().c) * plane;
                if (p.requires_grad()) {
                    T* g = p.grad().data();
                    for (int n = 0; n < batch; ++n) {
                        const T* src = gz + (static_cast<std::size_t>(n) * total_c + c_off) * plane;
                        T* dst = g + n * len;
                        for (std::size_t k = 0; k < len; ++k) {
                            dst[k] += src[k];
                        }
                    }
                }
                c_off += p.shape().c;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& input, Tape<T>* tape) {
    const bool rec = needs_grad(tape, {&input});
    Tensor<T> out(Shape{1, 1, 1, 1}, rec);
    T total = T(0);
    for (T v : input.values()) {
        total += v;
    }
    out.data()[0] = total;
    if (rec) {
        tape->record("sum_all", out, [input = Tensor<T>(input), out]() mutable {
            if (!input.requires_grad()) {
                return;
            }
            const T g = out.grad()[0];
            for (T& v : input.grad()) {
                v += g;
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> shortcut_down(const Tensor<T>& input, Tape<T>* tape) {
    const Shape& xs = input.shape();
    if (xs.h == 0 || xs.w == 0) {
        throw std::invalid_argument("shortcut_down: empty spatial input " + xs.str());
    }
    const int oh = (xs.h + 1) / 2;
    const int ow = (xs.w + 1) / 2;
    const bool rec = needs_grad(tape, {&input});
    Tensor<T> out(Shape{xs.n, 2 * xs.c, oh, ow}, rec);
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < xs.c; ++c) {
            for (int y = 0; y < oh; ++y) {
                for (int x = 0; x < ow; ++x) {
                    const T v = input.at(n, c, 2 * y, 2 * x);
                    out.at(n, c, y, x) = v;
                    out.at(n, c + xs.c, y, x) = v;
                }
            }
        }
    }
    if (rec) {
        tape->record("shortcut_down", out, [input = Tensor<T>(input), out]() mutable {
            if (!input.requires_grad()) {
                return;
            }
            const Shape& xs = input.shape();
            const Shape& os = out.shape();
            const auto gout = out.grad();
            auto gin = input.grad();
            for (int n = 0; n < xs.n; ++n) {
                for (int c = 0; c < xs.c; ++c) {
                    for (int y = 0; y < os.h; ++y) {
                        for (int x = 0; x < os.w; ++x) {
                            const std::size_t o1 = ((static_cast<std::size_t>(n) * os.c + c) * os.h + y) * os.w + x;
                            const std::size_t o2 =
                                ((static_cast<std::size_t>(n) * os.c + c + xs.c) * os.h + y) * os.w + x;
                            const std::size_t i =
                                ((static_cast<std::size_t>(n) * xs.c + c) * xs.h + 2 * y) * xs.w + 2 * x;
                            gin[i] += gout[o1] + gout[o2];
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> shortcut_up(const Tensor<T>& input, std::pair<int, int> target_hw, Tape<T>* tape) {
    const Shape& xs = input.shape();
    const auto [th, tw] = target_hw;
    if (xs.c % 2 != 0) {
        throw std::invalid_argument("shortcut_up: channel count must be even, input " + xs.str());
    }
    if ((th + 1) / 2 != xs.h || (tw + 1) / 2 != xs.w) {
        throw std::invalid_argument("shortcut_up: target (" + std::to_string(th) + "," + std::to_string(tw) +
                                    ") does not halve to input " + xs.str());
    }
    const int half = xs.c / 2;
    const bool rec = needs_grad(tape, {&input});
    Tensor<T> out(Shape{xs.n, half, th, tw}, rec);
    for (int n = 0; n < xs.n; ++n) {
        for (int c = 0; c < half; ++c) {
            for (int y = 0; y < th; ++y) {
                for (int x = 0; x < tw; ++x) {
                    out.at(n, c, y, x) = T(0.5) * (input.at(n, c, y / 2, x / 2) + input.at(n, c + half, y / 2, x / 2));
                }
            }
        }
    }
    if (rec) {
        tape->record("shortcut_up", out, [input = Tensor<T>(input), out, half]() mutable {
            if (!input.requires_grad()) {
                return;
            }
            const Shape& xs = input.shape();
            const Shape& os = out.shape();
            const auto gout = out.grad();
            auto gin = input.grad();
            for (int n = 0; n < os.n; ++n) {
                for (int c = 0; c < half; ++c) {
                    for (int y = 0; y < os.h; ++y) {
                        for (int x = 0; x < os.w; ++x) {
                            const T g = T(0.5) * gout[((static_cast<std::size_t>(n) * os.c + c) * os.h + y) * os.w + x];
                            const std::size_t i1 =
                                ((static_cast<std::size_t>(n) * xs.c + c) * xs.h + y / 2) * xs.w + x / 2;
                            const std::size_t i2 =
                                ((static_cast<std::size_t>(n) * xs.c + c + half) * xs.h + y / 2) * xs.w + x / 2;
                            gin[i1] += g;
                            gin[i2] += g;
                        }
                    }
                }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels, Tape<T>* tape,
                                int ignore_label) {
    const Shape& s = logits.shape();
    const std::size_t plane = s.plane();
    const std::size_t pixels = static_cast<std::size_t>(s.n) * plane;
    if (labels.size() != pixels) {
        throw std::invalid_argument("softmax_cross_entropy: " + std::to_string(labels.size()) +
                                    " labels for logits " + s.str());
    }
    std::size_t count = 0;
    for (int l : labels) {
        if (l == ignore_label) {
            continue;
        }
        if (l < 0 || l >= s.c) {
            throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," +
                                        std::to_string(s.c) + ")");
        }
        ++count;
    }
    if (count == 0) {
        throw std::invalid_argument("softmax_cross_entropy: every pixel is ignored");
    }
    const bool rec = needs_grad(tape, {&logits});
    Tensor<T> out(Shape{1, 1, 1, 1}, rec);
    // Softmax probabilities are kept for the backward pass.
    std::vector<T> prob(rec ? logits.numel() : 0);
    const T* z = logits.data();
    // Extended precision keeps the loss within an ulp or so of exact, which
    // finite-difference probes rely on.
    long double total = 0.0;
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
            long double mx = -std::numeric_limits<long double>::infinity();
            for (int c = 0; c < s.c; ++c) {
                mx = std::max(mx, static_cast<long double>(z[base + c * plane]));
            }
            long double se = 0.0;
            for (int c = 0; c < s.c; ++c) {
                se += std::exp(static_cast<long double>(z[base + c * plane]) - mx);
            }
            const long double lse = mx + std::log(se);
            const int l = labels[n * plane + p];
            if (rec) {
                for (int c = 0; c < s.c; ++c) {
                    prob[base + c * plane] = static_cast<T>(std::exp(static_cast<long double>(z[base + c * plane]) - lse));
                }
            }
            if (l != ignore_label) {
                total += lse - static_cast<long double>(z[base + l * plane]);
            }
        }
    }
    out.data()[0] = static_cast<T>(total / static_cast<long double>(count));
    if (rec) {
        std::vector<int> lab(labels.begin(), labels.end());
        tape->record("softmax_cross_entropy",
                     out, [logits = Tensor<T>(logits), out, prob = std::move(prob), lab = std::move(lab), count, ignore_label]() mutable {
                         const Shape& s = logits.shape();
                         const std::size_t plane = s.plane();
                         const T scale = out.grad()[0] / static_cast<T>(count);
                         T* g = logits.grad().data();
                         for (int n = 0; n < s.n; ++n) {
                             for (std::size_t p = 0; p < plane; ++p) {
                                 const int l = lab[n * plane + p];
                                 if (l == ignore_label) {
                                     continue;
                                 }
                                 const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
                                 for (int c = 0; c < s.c; ++c) {
                                     const T onehot = c == l ? T(1) : T(0);
                                     g[base + c * plane] += scale * (prob[base + c * plane] - onehot);
                                 }
                             }
                         }
                     });
    }
    return out;
}

template <typename T>
std::vector<int> argmax_channels(const Tensor<T>& logits) {
    const Shape& s = logits.shape();
    const std::size_t plane = s.plane();
    std::vector<int> out(static_cast<std::size_t>(s.n) * plane, 0);
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = static_cast<std::size_t>(n) * s.c * plane + p;
            int best = 0;
            T best_v = logits.data()[base];
            for (int c = 1; c < s.c; ++c) {
                const T v = logits.data()[base + c * plane];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            out[n * plane + p] = best;
        }
    }
    return out;
}

#define GRIDNET_INSTANTIATE_OPS(T)                                                                             \
    template Tensor<T> conv2d(const Tensor<T>&, const ConvParams<T>&, Tape<T>*);                               \
    template Tensor<T> conv2d_down(const Tensor<T>&, const ConvParams<T>&, Tape<T>*);                          \
    template Tensor<T> deconv2d_up(const Tensor<T>&, const ConvParams<T>&, std::pair<int, int>, Tape<T>*);     \
    template struct BatchNormState<T>;                                                                         \
    template Tensor<T> batch_norm(const Tensor<T>&, BatchNormState<T>&, Mode, Tape<T>*);                       \
    template Tensor<T> relu(const Tensor<T>&, Tape<T>*);                                                       \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&, Tape<T>*);                                      \
    template Tensor<T> concat_channels(std::span<const Tensor<T>>, Tape<T>*);                                  \
    template Tensor<T> sum_all(const Tensor<T>&, Tape<T>*);                                                    \
    template Tensor<T> shortcut_down(const Tensor<T>&, Tape<T>*);                                              \
    template Tensor<T> shortcut_up(const Tensor<T>&, std::pair<int, int>, Tape<T>*);                           \
    template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const int>, Tape<T>*, int);           \
    template std::vector<int> argmax_channels(const Tensor<T>&);

GRIDNET_INSTANTIATE_OPS(float)
GRIDNET_INSTANTIATE_OPS(double)

}  // namespace gridnet
