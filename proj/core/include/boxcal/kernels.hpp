#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "boxcal/rng.hpp"
#include "boxcal/tensor.hpp"

// Forward/backward kernels for the segmentation network. The set is fixed
// and small on purpose: the network is a static DAG of exactly these ops,
// each backward accumulates analytic gradients into the given buffers, and
// every kernel has a finite-difference test against it.

namespace boxcal::nn {

namespace detail {
inline void fail(const std::string& kernel, const std::string& msg) {
    throw std::invalid_argument(kernel + ": " + msg);
}
inline void require(bool ok, const std::string& kernel, const std::string& msg) {
    if (!ok) fail(kernel, msg);
}
}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d, kernel size 1 or 3, stride 1. 3×3 uses zero padding 1 so the
// spatial size is preserved; 1×1 needs none.
// ---------------------------------------------------------------------------

template <typename T>
void conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                    Tensor<T>& output) {
    detail::require(input.rank() == 3, "conv2d", "input must be C×H×W, got " + input.shape_str());
    detail::require(weight.rank() == 4, "conv2d", "weight must be Co×Ci×k×k, got " + weight.shape_str());
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = weight.dim(0), k = weight.dim(2);
    detail::require(k == weight.dim(3) && (k == 1 || k == 3), "conv2d",
                    "kernel must be 1×1 or 3×3, got " + weight.shape_str());
    detail::require(weight.dim(1) == ci, "conv2d",
                    "input channels " + std::to_string(ci) + " != weight channels " +
                        std::to_string(weight.dim(1)));
    if (bias)
        detail::require(bias->rank() == 1 && bias->dim(0) == co, "conv2d",
                        "bias must be length " + std::to_string(co));
    if (output.shape() != std::vector<int>{co, h, w}) output = Tensor<T>({co, h, w});

    const int pad = (k == 3) ? 1 : 0;
#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < co; ++oc) {
        T* out_c = output.data() + static_cast<size_t>(oc) * h * w;
        const T b = bias ? (*bias)[static_cast<size_t>(oc)] : T(0);
        std::fill(out_c, out_c + static_cast<size_t>(h) * w, b);
        for (int icn = 0; icn < ci; ++icn) {
            const T* in_c = input.data() + static_cast<size_t>(icn) * h * w;
            const T* wk = weight.data() + ((static_cast<size_t>(oc) * ci + icn) * k) * k;
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const T wv = wk[kh * k + kw];
                    if (wv == T(0)) continue;
                    const int dy = kh - pad, dx = kw - pad;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    for (int y = y0; y < y1; ++y) {
                        T* orow = out_c + static_cast<size_t>(y) * w;
                        const T* irow = in_c + static_cast<size_t>(y + dy) * w + dx;
                        for (int x = x0; x < x1; ++x) orow[x] += wv * irow[x];
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& d_output,
                     Tensor<T>* d_input, Tensor<T>& d_weight, Tensor<T>* d_bias) {
    const int ci = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int co = weight.dim(0), k = weight.dim(2);
    detail::require(d_output.shape() == std::vector<int>({co, h, w}), "conv2d_backward",
                    "d_output shape " + d_output.shape_str() + " does not match output");
    const int pad = (k == 3) ? 1 : 0;

    if (d_input) {
#pragma omp parallel for schedule(static)
        for (int icn = 0; icn < ci; ++icn) {
            T* din_c = d_input->data() + static_cast<size_t>(icn) * h * w;
            for (int oc = 0; oc < co; ++oc) {
                const T* dout_c = d_output.data() + static_cast<size_t>(oc) * h * w;
                const T* wk = weight.data() + ((static_cast<size_t>(oc) * ci + icn) * k) * k;
                for (int kh = 0; kh < k; ++kh) {
                    for (int kw = 0; kw < k; ++kw) {
                        const T wv = wk[kh * k + kw];
                        if (wv == T(0)) continue;
                        // out[y][x] consumed in[y+dy][x+dx]; flip for the gather
                        const int dy = kh - pad, dx = kw - pad;
                        const int y0 = std::max(0, dy), y1 = std::min(h, h + dy);
                        const int x0 = std::max(0, dx), x1 = std::min(w, w + dx);
                        for (int y = y0; y < y1; ++y) {
                            T* drow = din_c + static_cast<size_t>(y) * w;
                            const T* orow = dout_c + static_cast<size_t>(y - dy) * w - dx;
                            for (int x = x0; x < x1; ++x) drow[x] += wv * orow[x];
                        }
                    }
                }
            }
        }
    }

#pragma omp parallel for schedule(static)
    for (int oc = 0; oc < co; ++oc) {
        const T* dout_c = d_output.data() + static_cast<size_t>(oc) * h * w;
        if (d_bias) {
            T s = T(0);
            for (size_t i = 0; i < static_cast<size_t>(h) * w; ++i) s += dout_c[i];
            (*d_bias)[static_cast<size_t>(oc)] += s;
        }
        for (int icn = 0; icn < ci; ++icn) {
            const T* in_c = input.data() + static_cast<size_t>(icn) * h * w;
            T* dwk = d_weight.data() + ((static_cast<size_t>(oc) * ci + icn) * k) * k;
            for (int kh = 0; kh < k; ++kh) {
                for (int kw = 0; kw < k; ++kw) {
                    const int dy = kh - pad, dx = kw - pad;
                    const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
                    const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
                    T s = T(0);
                    for (int y = y0; y < y1; ++y) {
                        const T* orow = dout_c + static_cast<size_t>(y) * w;
                        const T* irow = in_c + static_cast<size_t>(y + dy) * w + dx;
                        for (int x = x0; x < x1; ++x) s += orow[x] * irow[x];
                    }
                    dwk[kh * k + kw] += s;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// maxpool 2×2 stride 2. Ties break to the first index in row-major order;
// the backward routes gradient only to the stored argmax.
// ---------------------------------------------------------------------------

template <typename T>
void maxpool2x2_forward(const Tensor<T>& input, Tensor<T>& output, std::vector<std::int32_t>& argmax) {
    detail::require(input.rank() == 3, "maxpool2x2", "input must be C×H×W, got " + input.shape_str());
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    detail::require(h % 2 == 0 && w % 2 == 0, "maxpool2x2",
                    "H and W must be even, got " + input.shape_str());
    const int oh = h / 2, ow = w / 2;
    if (output.shape() != std::vector<int>{c, oh, ow}) output = Tensor<T>({c, oh, ow});
    argmax.assign(output.numel(), 0);
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < oh; ++y) {
            for (int x = 0; x < ow; ++x) {
                size_t best_i = input.idx3(ch, 2 * y, 2 * x);
                T best = input[best_i];
                for (int dy = 0; dy < 2; ++dy) {
                    for (int dx = 0; dx < 2; ++dx) {
                        const size_t i = input.idx3(ch, 2 * y + dy, 2 * x + dx);
                        if (input[i] > best) {  // strict: first max wins
                            best = input[i];
                            best_i = i;
                        }
                    }
                }
                output.at(ch, y, x) = best;
                argmax[output.idx3(ch, y, x)] = static_cast<std::int32_t>(best_i);
            }
        }
    }
}

template <typename T>
void maxpool2x2_backward(const Tensor<T>& d_output, const std::vector<std::int32_t>& argmax,
                         Tensor<T>& d_input) {
    detail::require(argmax.size() == d_output.numel(), "maxpool2x2_backward",
                    "argmax size does not match d_output");
    for (size_t i = 0; i < d_output.numel(); ++i)
        d_input[static_cast<size_t>(argmax[i])] += d_output[i];
}

// ---------------------------------------------------------------------------
// nearest-neighbor ×2 upsample
// ---------------------------------------------------------------------------

template <typename T>
void upsample2x_forward(const Tensor<T>& input, Tensor<T>& output) {
    detail::require(input.rank() == 3, "upsample2x", "input must be C×H×W, got " + input.shape_str());
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (output.shape() != std::vector<int>{c, 2 * h, 2 * w}) output = Tensor<T>({c, 2 * h, 2 * w});
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            const T* irow = input.data() + input.idx3(ch, y, 0);
            for (int dy = 0; dy < 2; ++dy) {
                T* orow = output.data() + output.idx3(ch, 2 * y + dy, 0);
                for (int x = 0; x < w; ++x) {
                    orow[2 * x] = irow[x];
                    orow[2 * x + 1] = irow[x];
                }
            }
        }
    }
}

template <typename T>
void upsample2x_backward(const Tensor<T>& d_output, Tensor<T>& d_input) {
    const int c = d_input.dim(0), h = d_input.dim(1), w = d_input.dim(2);
    detail::require(d_output.shape() == std::vector<int>({c, 2 * h, 2 * w}), "upsample2x_backward",
                    "d_output shape " + d_output.shape_str() + " does not match 2× input");
#pragma omp parallel for schedule(static)
    for (int ch = 0; ch < c; ++ch) {
        for (int y = 0; y < h; ++y) {
            T* drow = d_input.data() + d_input.idx3(ch, y, 0);
            const T* o0 = d_output.data() + d_output.idx3(ch, 2 * y, 0);
            const T* o1 = d_output.data() + d_output.idx3(ch, 2 * y + 1, 0);
            for (int x = 0; x < w; ++x)
                drow[x] += o0[2 * x] + o0[2 * x + 1] + o1[2 * x] + o1[2 * x + 1];
        }
    }
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
void relu_forward(const Tensor<T>& input, Tensor<T>& output) {
    if (!output.same_shape(input)) output = Tensor<T>(input.shape());
    const size_t n = input.numel();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i)
        output[static_cast<size_t>(i)] = input[static_cast<size_t>(i)] > T(0) ? input[static_cast<size_t>(i)] : T(0);
}

/// Gradient at exactly 0 is defined as 0.
template <typename T>
void relu_backward(const Tensor<T>& input, const Tensor<T>& d_output, Tensor<T>& d_input) {
    detail::require(input.same_shape(d_output), "relu_backward",
                    "shape mismatch " + input.shape_str() + " vs " + d_output.shape_str());
    for (size_t i = 0; i < input.numel(); ++i)
        if (input[i] > T(0)) d_input[i] += d_output[i];
}

template <typename T>
void sigmoid_forward(const Tensor<T>& input, Tensor<T>& output) {
    if (!output.same_shape(input)) output = Tensor<T>(input.shape());
    for (size_t i = 0; i < input.numel(); ++i)
        output[i] = T(1) / (T(1) + std::exp(-input[i]));
}

template <typename T>
void sigmoid_backward(const Tensor<T>& output, const Tensor<T>& d_output, Tensor<T>& d_input) {
    detail::require(output.same_shape(d_output), "sigmoid_backward",
                    "shape mismatch " + output.shape_str() + " vs " + d_output.shape_str());
    for (size_t i = 0; i < output.numel(); ++i)
        d_input[i] += d_output[i] * output[i] * (T(1) - output[i]);
}

// ---------------------------------------------------------------------------
// softmax over the channel dimension of a C×H×W tensor
// ---------------------------------------------------------------------------

template <typename T>
void channel_softmax_forward(const Tensor<T>& input, Tensor<T>& output) {
    detail::require(input.rank() == 3, "channel_softmax", "input must be C×H×W, got " + input.shape_str());
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    if (!output.same_shape(input)) output = Tensor<T>(input.shape());
    const size_t plane = static_cast<size_t>(h) * w;
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(plane); ++p) {
        const size_t px = static_cast<size_t>(p);
        T mx = input[px];
        for (int ch = 1; ch < c; ++ch) mx = std::max(mx, input[ch * plane + px]);
        T sum = T(0);
        for (int ch = 0; ch < c; ++ch) {
            const T e = std::exp(input[ch * plane + px] - mx);
            output[ch * plane + px] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int ch = 0; ch < c; ++ch) output[ch * plane + px] *= inv;
    }
}

/// d_input from the gradient w.r.t. the softmax output (probabilities).
template <typename T>
void channel_softmax_backward(const Tensor<T>& output, const Tensor<T>& d_prob, Tensor<T>& d_input) {
    detail::require(output.same_shape(d_prob), "channel_softmax_backward",
                    "shape mismatch " + output.shape_str() + " vs " + d_prob.shape_str());
    const int c = output.dim(0);
    const size_t plane = static_cast<size_t>(output.dim(1)) * output.dim(2);
#pragma omp parallel for schedule(static)
    for (std::int64_t p = 0; p < static_cast<std::int64_t>(plane); ++p) {
        const size_t px = static_cast<size_t>(p);
        T dot = T(0);
        for (int ch = 0; ch < c; ++ch) dot += d_prob[ch * plane + px] * output[ch * plane + px];
        for (int ch = 0; ch < c; ++ch)
            d_input[ch * plane + px] += output[ch * plane + px] * (d_prob[ch * plane + px] - dot);
    }
}

// ---------------------------------------------------------------------------
// elementwise ops. mul supports broadcasting a 1×H×W mask over C×H×W.
// ---------------------------------------------------------------------------

template <typename T>
void elementwise_add_forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& output) {
    detail::require(a.same_shape(b), "elementwise_add",
                    "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    if (!output.same_shape(a)) output = Tensor<T>(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) output[i] = a[i] + b[i];
}

template <typename T>
void elementwise_add_backward(const Tensor<T>& d_output, Tensor<T>& d_a, Tensor<T>& d_b) {
    for (size_t i = 0; i < d_output.numel(); ++i) {
        d_a[i] += d_output[i];
        d_b[i] += d_output[i];
    }
}

template <typename T>
void elementwise_mul_forward(const Tensor<T>& a, const Tensor<T>& b, Tensor<T>& output) {
    const bool broadcast = b.rank() == 3 && a.rank() == 3 && b.dim(0) == 1 &&
                           b.dim(1) == a.dim(1) && b.dim(2) == a.dim(2);
    detail::require(a.same_shape(b) || broadcast, "elementwise_mul",
                    "shape mismatch " + a.shape_str() + " vs " + b.shape_str());
    if (!output.same_shape(a)) output = Tensor<T>(a.shape());
    if (broadcast && !a.same_shape(b)) {
        const size_t plane = static_cast<size_t>(a.dim(1)) * a.dim(2);
        for (int c = 0; c < a.dim(0); ++c)
            for (size_t p = 0; p < plane; ++p)
                output[c * plane + p] = a[c * plane + p] * b[p];
    } else {
        for (size_t i = 0; i < a.numel(); ++i) output[i] = a[i] * b[i];
    }
}

template <typename T>
void elementwise_mul_backward(const Tensor<T>& a, const Tensor<T>& b, const Tensor<T>& d_output,
                              Tensor<T>& d_a, Tensor<T>& d_b) {
    const bool broadcast = !a.same_shape(b);
    if (broadcast) {
        const size_t plane = static_cast<size_t>(a.dim(1)) * a.dim(2);
        for (int c = 0; c < a.dim(0); ++c) {
            for (size_t p = 0; p < plane; ++p) {
                d_a[c * plane + p] += d_output[c * plane + p] * b[p];
                d_b[p] += d_output[c * plane + p] * a[c * plane + p];
            }
        }
    } else {
        for (size_t i = 0; i < a.numel(); ++i) {
            d_a[i] += d_output[i] * b[i];
            d_b[i] += d_output[i] * a[i];
        }
    }
}

// ---------------------------------------------------------------------------
// initialization and optimizer
// ---------------------------------------------------------------------------

/// Uniform Xavier/Glorot: variance 2/(fan_in+fan_out). Fans are derived
/// from the shape: Co×Ci×k×k weights use k²-scaled fans, matrices use
/// their two dims, vectors (biases) use dim 0 for both.
template <typename T>
Tensor<T> xavier_init(const std::vector<int>& shape, Rng& rng) {
    double fan_in = 1.0, fan_out = 1.0;
    if (shape.size() == 4) {
        fan_in = static_cast<double>(shape[1]) * shape[2] * shape[3];
        fan_out = static_cast<double>(shape[0]) * shape[2] * shape[3];
    } else if (shape.size() == 2) {
        fan_in = shape[1];
        fan_out = shape[0];
    } else if (shape.size() == 1) {
        fan_in = fan_out = shape[0];
    }
    const double a = std::sqrt(6.0 / (fan_in + fan_out));
    Tensor<T> t(shape);
    for (size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-a, a));
    return t;
}

template <typename T>
struct OptimizerState {
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.99;
    double epsilon = 1e-8;
    std::int64_t step = 0;
    std::vector<std::vector<T>> m;  // first moments, one buffer per parameter
    std::vector<std::vector<T>> v;  // second moments

    void reset(const std::vector<Tensor<T>*>& params) {
        step = 0;
        m.clear();
        v.clear();
        for (const auto* p : params) {
            m.emplace_back(p->numel(), T(0));
            v.emplace_back(p->numel(), T(0));
        }
    }
};

/// One bias-corrected Adam update using each parameter's grad buffer.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params, OptimizerState<T>& state) {
    if (state.m.size() != params.size()) state.reset(params);
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<T>& p = *params[pi];
        detail::require(state.m[pi].size() == p.numel(), "adam_step",
                        "moment buffer does not match parameter " + std::to_string(pi));
        const Tensor<T>& g = p.grad();
        auto& m = state.m[pi];
        auto& v = state.v[pi];
        for (size_t i = 0; i < p.numel(); ++i) {
            const double gi = static_cast<double>(g[i]);
            const double mi = state.beta1 * static_cast<double>(m[i]) + (1.0 - state.beta1) * gi;
            const double vi = state.beta2 * static_cast<double>(v[i]) + (1.0 - state.beta2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double mhat = mi / bc1;
            const double vhat = vi / bc2;
            p[i] -= static_cast<T>(state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon));
        }
    }
}

}  // namespace boxcal::nn
