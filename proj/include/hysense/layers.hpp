#pragma once

// Differentiable layer primitives with hand-derived backward passes.
//
// All functions are pure with respect to their inputs except the training
// mode batch normalisation, which updates the running statistics it is given.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hysense/errors.hpp"
#include "hysense/tensor.hpp"

namespace hysense {

enum class Mode { training, inference };

namespace fault {
// Test fixture only: when set, conv2d_backward returns deliberately wrong
// gradients so the gradient checker can be shown to catch them.
inline thread_local bool corrupt_conv_backward = false;
}  // namespace fault

struct ConvGeometry {
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t dilation = 1;
};

/// Output extent of a convolution or pooling window along one axis:
/// floor((in + 2p - d(k-1) - 1) / s) + 1.
inline std::size_t conv_output_extent(std::size_t in_extent, std::size_t k, std::size_t s,
                                      std::size_t p, std::size_t d) {
  if (k == 0 || s == 0 || d == 0)
    throw ShapeError("kernel, stride and dilation must be positive");
  const std::size_t span = d * (k - 1) + 1;
  if (in_extent + 2 * p < span)
    throw ShapeError("kernel exceeds padded input: extent " + std::to_string(in_extent) +
                     " + 2*" + std::to_string(p) + " < " + std::to_string(span));
  return (in_extent + 2 * p - span) / s + 1;
}

inline std::size_t conv_output_extent(std::size_t in_extent, const ConvGeometry& g) {
  return conv_output_extent(in_extent, g.kernel, g.stride, g.padding, g.dilation);
}

template <typename T>
struct ConvParams {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  ConvGeometry geometry;
  Tensor<T> weight;  // (out, in, k, k)
  Tensor<T> bias;    // (out) or empty
};

template <typename T>
struct ConvGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_weight;
  Tensor<T> grad_bias;  // empty when the convolution has no bias
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

struct ConvDims {
  std::size_t channels, height, width, out_height, out_width;
};

// Unfolds one image (C, H, W) into a (C*k*k, Ho*Wo) row-major matrix.
template <typename T>
void im2col(const T* image, const ConvDims& dm, const ConvGeometry& g, T* col) {
  const std::size_t k = g.kernel;
  const std::size_t hw = dm.out_height * dm.out_width;
  for (std::size_t c = 0; c < dm.channels; ++c) {
    const T* plane = image + c * dm.height * dm.width;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        T* row = col + ((c * k + a) * k + b) * hw;
        for (std::size_t i = 0; i < dm.out_height; ++i) {
          const auto ih = static_cast<std::ptrdiff_t>(i * g.stride + a * g.dilation) -
                          static_cast<std::ptrdiff_t>(g.padding);
          T* out = row + i * dm.out_width;
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(dm.height)) {
            std::fill(out, out + dm.out_width, T{0});
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * dm.width;
          for (std::size_t j = 0; j < dm.out_width; ++j) {
            const auto iw = static_cast<std::ptrdiff_t>(j * g.stride + b * g.dilation) -
                            static_cast<std::ptrdiff_t>(g.padding);
            out[j] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(dm.width))
                         ? T{0}
                         : src[static_cast<std::size_t>(iw)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds a column matrix back into an image.
template <typename T>
void col2im_add(const T* col, const ConvDims& dm, const ConvGeometry& g, T* image) {
  const std::size_t k = g.kernel;
  const std::size_t hw = dm.out_height * dm.out_width;
  for (std::size_t c = 0; c < dm.channels; ++c) {
    T* plane = image + c * dm.height * dm.width;
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) {
        const T* row = col + ((c * k + a) * k + b) * hw;
        for (std::size_t i = 0; i < dm.out_height; ++i) {
          const auto ih = static_cast<std::ptrdiff_t>(i * g.stride + a * g.dilation) -
                          static_cast<std::ptrdiff_t>(g.padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(dm.height)) continue;
          T* dst = plane + static_cast<std::size_t>(ih) * dm.width;
          const T* in = row + i * dm.out_width;
          for (std::size_t j = 0; j < dm.out_width; ++j) {
            const auto iw = static_cast<std::ptrdiff_t>(j * g.stride + b * g.dilation) -
                            static_cast<std::ptrdiff_t>(g.padding);
            if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(dm.width))
              dst[static_cast<std::size_t>(iw)] += in[j];
          }
        }
      }
    }
  }
}

template <typename T>
ConvDims conv_dims(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                   const ConvGeometry& g) {
  require_rank(input, 4, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  if (weight.dim(2) != g.kernel || weight.dim(3) != g.kernel)
    throw ShapeError("conv2d: weight shape " + to_string(weight.shape()) +
                     " inconsistent with kernel " + std::to_string(g.kernel));
  if (input.dim(1) != weight.dim(1))
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(1)) +
                     " channels, layer expects " + std::to_string(weight.dim(1)));
  if (bias && !bias->empty() && bias->shape() != Shape{weight.dim(0)})
    throw ShapeError("conv2d: bias shape " + to_string(bias->shape()));
  return ConvDims{input.dim(1), input.dim(2), input.dim(3), conv_output_extent(input.dim(2), g),
                  conv_output_extent(input.dim(3), g)};
}

template <typename T>
void check_conv_params(const ConvParams<T>& params) {
  const auto& g = params.geometry;
  const Shape expected{params.out_channels, params.in_channels, g.kernel, g.kernel};
  if (params.weight.shape() != expected)
    throw ShapeError("conv2d: weight shape " + to_string(params.weight.shape()) +
                     " inconsistent with " + to_string(expected));
}

}  // namespace detail

/// Cross-correlation with zero padding:
/// out(n,o,i,j) = bias(o) + sum_{c,a,b} in(n, c, i*s + a*d - p, j*s + b*d - p) * w(o,c,a,b).
/// `bias` may be null or empty.
template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>* bias,
                         const ConvGeometry& geometry) {
  const auto dm = detail::conv_dims(input, weight, bias, geometry);
  require_finite(input, "conv2d input");
  require_finite(weight, "conv2d weight");
  const bool has_bias = bias && !bias->empty();
  const std::size_t n_batch = input.dim(0), out_ch = weight.dim(0);
  const std::size_t ckk = weight.dim(1) * geometry.kernel * geometry.kernel;
  const std::size_t hw = dm.out_height * dm.out_width;
  Tensor<T> out({n_batch, out_ch, dm.out_height, dm.out_width});
  std::vector<T> col(ckk * hw);
  detail::ConstMatMap<T> w(weight.raw(), out_ch, ckk);
  for (std::size_t n = 0; n < n_batch; ++n) {
    detail::im2col(input.raw() + n * dm.channels * dm.height * dm.width, dm, geometry, col.data());
    detail::MatMap<T> y(out.raw() + n * out_ch * hw, out_ch, hw);
    y.noalias() = w * detail::ConstMatMap<T>(col.data(), ckk, hw);
    if (has_bias)
      for (std::size_t o = 0; o < out_ch; ++o) y.row(o).array() += (*bias)[o];
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const Tensor<T>& weight, std::nullptr_t,
                         const ConvGeometry& geometry) {
  return conv2d_forward(input, weight, static_cast<const Tensor<T>*>(nullptr), geometry);
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& input, const ConvParams<T>& params) {
  detail::check_conv_params(params);
  return conv2d_forward(input, params.weight, &params.bias, params.geometry);
}

/// Exact gradients of sum(grad_out * conv2d_forward(input, weight, bias)).
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weight, const Tensor<T>* bias,
                             const ConvGeometry& geometry) {
  const auto dm = detail::conv_dims(input, weight, bias, geometry);
  const bool has_bias = bias && !bias->empty();
  const std::size_t n_batch = input.dim(0), out_ch = weight.dim(0);
  const Shape out_shape{n_batch, out_ch, dm.out_height, dm.out_width};
  if (grad_out.shape() != out_shape)
    throw ShapeError("conv2d backward: grad_out " + to_string(grad_out.shape()) +
                     " does not match forward output " + to_string(out_shape));
  const std::size_t ckk = weight.dim(1) * geometry.kernel * geometry.kernel;
  const std::size_t hw = dm.out_height * dm.out_width;

  ConvGrads<T> grads;
  grads.grad_input = Tensor<T>(input.shape());
  grads.grad_weight = Tensor<T>(weight.shape());
  if (has_bias) grads.grad_bias = Tensor<T>(bias->shape());

  std::vector<T> col(ckk * hw);
  detail::ConstMatMap<T> w(weight.raw(), out_ch, ckk);
  detail::MatMap<T> gw(grads.grad_weight.raw(), out_ch, ckk);
  for (std::size_t n = 0; n < n_batch; ++n) {
    detail::ConstMatMap<T> gy(grad_out.raw() + n * out_ch * hw, out_ch, hw);
    detail::im2col(input.raw() + n * dm.channels * dm.height * dm.width, dm, geometry, col.data());
    detail::MatMap<T> cm(col.data(), ckk, hw);
    gw.noalias() += gy * cm.transpose();
    if (has_bias)
      for (std::size_t o = 0; o < out_ch; ++o) grads.grad_bias[o] += gy.row(o).sum();
    cm.noalias() = w.transpose() * gy;
    detail::col2im_add(col.data(), dm, geometry,
                       grads.grad_input.raw() + n * dm.channels * dm.height * dm.width);
  }
  if (fault::corrupt_conv_backward) {
    for (auto& v : grads.grad_weight.data()) v *= T(1.05);
    for (auto& v : grads.grad_input.data()) v *= T(1.05);
  }
  return grads;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const Tensor<T>& weight, std::nullptr_t, const ConvGeometry& geometry) {
  return conv2d_backward(grad_out, input, weight, static_cast<const Tensor<T>*>(nullptr), geometry);
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor<T>& grad_out, const Tensor<T>& input,
                             const ConvParams<T>& params) {
  detail::check_conv_params(params);
  return conv2d_backward(grad_out, input, params.weight, &params.bias, params.geometry);
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <typename T>
struct BatchNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double epsilon = 1e-5;
  double momentum = 0.1;

  static BatchNormParams identity(std::size_t channels) {
    BatchNormParams p;
    p.gamma = Tensor<T>({channels}, T{1});
    p.beta = Tensor<T>({channels}, T{0});
    p.running_mean = Tensor<T>({channels}, T{0});
    p.running_var = Tensor<T>({channels}, T{1});
    return p;
  }
};

// State captured by the forward pass and consumed by backward.
template <typename T>
struct BatchNormCache {
  Tensor<T> normalized;        // x_hat
  std::vector<double> inv_std;  // per channel
  Mode mode = Mode::inference;
};

template <typename T>
struct BatchNormGrads {
  Tensor<T> grad_input;
  Tensor<T> grad_gamma;
  Tensor<T> grad_beta;
};

/// Per-channel normalisation over (N, H, W). Training mode uses biased batch
/// statistics and folds them into the running estimates (the variance
/// estimate is unbiased, M/(M-1)); inference mode uses the running estimates.
template <typename T>
Tensor<T> batchnorm2d_forward(const Tensor<T>& input, BatchNormParams<T>& params, Mode mode,
                              BatchNormCache<T>* cache = nullptr) {
  require_rank(input, 4, "batchnorm input");
  const std::size_t n_batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3);
  const std::size_t count = n_batch * plane;
  for (const Tensor<T>* t : {&params.gamma, &params.beta, &params.running_mean, &params.running_var})
    if (t->shape() != Shape{channels})
      throw ShapeError("batchnorm: parameter length does not match channel count " +
                       std::to_string(channels));
  if (mode == Mode::training && count < 2)
    throw NumericError("batchnorm: degenerate variance, training mode needs >= 2 values per channel");

  Tensor<T> out(input.shape());
  Tensor<T> xhat(input.shape());
  std::vector<double> inv_std(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    double mean, var;
    if (mode == Mode::training) {
      double sum = 0.0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* p = input.raw() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      mean = sum / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t n = 0; n < n_batch; ++n) {
        const T* p = input.raw() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(count);
      const double m = params.momentum;
      const double unbiased = var * static_cast<double>(count) / static_cast<double>(count - 1);
      params.running_mean[c] = static_cast<T>((1.0 - m) * params.running_mean[c] + m * mean);
      params.running_var[c] = static_cast<T>((1.0 - m) * params.running_var[c] + m * unbiased);
    } else {
      mean = params.running_mean[c];
      var = params.running_var[c];
    }
    const double istd = 1.0 / std::sqrt(var + params.epsilon);
    inv_std[c] = istd;
    const double g = params.gamma[c], b = params.beta[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (input[off + i] - mean) * istd;
        xhat[off + i] = static_cast<T>(xh);
        out[off + i] = static_cast<T>(g * xh + b);
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(xhat);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  return out;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const Tensor<T>& grad_out, const BatchNormParams<T>& params,
                                       const BatchNormCache<T>& cache) {
  if (cache.normalized.empty()) throw StateError("batchnorm backward without cached forward");
  if (grad_out.shape() != cache.normalized.shape())
    throw ShapeError("batchnorm backward: grad shape " + to_string(grad_out.shape()));
  const std::size_t n_batch = grad_out.dim(0), channels = grad_out.dim(1);
  const std::size_t plane = grad_out.dim(2) * grad_out.dim(3);
  const double count = static_cast<double>(n_batch * plane);

  BatchNormGrads<T> grads{Tensor<T>(grad_out.shape()), Tensor<T>({channels}),
                          Tensor<T>({channels})};
  for (std::size_t c = 0; c < channels; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xhat += static_cast<double>(grad_out[off + i]) * cache.normalized[off + i];
      }
    }
    grads.grad_beta[c] = static_cast<T>(sum_dy);
    grads.grad_gamma[c] = static_cast<T>(sum_dy_xhat);
    const double scale = params.gamma[c] * cache.inv_std[c];
    for (std::size_t n = 0; n < n_batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        double dx;
        if (cache.mode == Mode::training)
          dx = scale / count *
               (count * grad_out[off + i] - sum_dy - cache.normalized[off + i] * sum_dy_xhat);
        else
          dx = scale * grad_out[off + i];
        grads.grad_input[off + i] = static_cast<T>(dx);
      }
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

// Subgradient at exactly 0 is 0.
template <typename T>
Tensor<T> relu_backward(const Tensor<T>& grad_out, const Tensor<T>& input) {
  if (grad_out.shape() != input.shape()) throw ShapeError("relu backward: shape mismatch");
  Tensor<T> g(input.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = input[i] > T{0} ? grad_out[i] : T{0};
  return g;
}

template <typename T>
Tensor<T> residual_add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("residual_add: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

// The sum routes its gradient unchanged to both operands.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> residual_add_backward(const Tensor<T>& grad_out) {
  return {grad_out, grad_out};
}

// ---------------------------------------------------------------------------
// Pooling

namespace detail {
inline std::size_t bin_begin(std::size_t i, std::size_t in, std::size_t out) { return i * in / out; }
inline std::size_t bin_end(std::size_t i, std::size_t in, std::size_t out) {
  return (i + 1) * in / out;
}
}  // namespace detail

/// Partitions each spatial axis into `out_h` x `out_w` contiguous bins with
/// boundaries floor(i*H/h) and averages each bin.
template <typename T>
Tensor<T> adaptive_avgpool2d_forward(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  require_rank(input, 4, "adaptive_avgpool2d input");
  const std::size_t H = input.dim(2), W = input.dim(3);
  if (out_h == 0 || out_w == 0 || out_h > H || out_w > W)
    throw ShapeError("adaptive_avgpool2d: target (" + std::to_string(out_h) + "," +
                     std::to_string(out_w) + ") invalid for input " + to_string(input.shape()));
  const std::size_t N = input.dim(0), C = input.dim(1);
  Tensor<T> out({N, C, out_h, out_w});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < out_h; ++i) {
        const std::size_t h0 = detail::bin_begin(i, H, out_h), h1 = detail::bin_end(i, H, out_h);
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t w0 = detail::bin_begin(j, W, out_w), w1 = detail::bin_end(j, W, out_w);
          double s = 0.0;
          for (std::size_t h = h0; h < h1; ++h)
            for (std::size_t w = w0; w < w1; ++w) s += input.at(n, c, h, w);
          out.at(n, c, i, j) = static_cast<T>(s / static_cast<double>((h1 - h0) * (w1 - w0)));
        }
      }
  return out;
}

template <typename T>
Tensor<T> adaptive_avgpool2d_backward(const Tensor<T>& grad_out, const Shape& input_shape) {
  require_rank(grad_out, 4, "adaptive_avgpool2d grad");
  const std::size_t N = input_shape.at(0), C = input_shape.at(1);
  const std::size_t H = input_shape.at(2), W = input_shape.at(3);
  const std::size_t out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  if (grad_out.dim(0) != N || grad_out.dim(1) != C || out_h > H || out_w > W)
    throw ShapeError("adaptive_avgpool2d backward: shape mismatch");
  Tensor<T> g(input_shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < out_h; ++i) {
        const std::size_t h0 = detail::bin_begin(i, H, out_h), h1 = detail::bin_end(i, H, out_h);
        for (std::size_t j = 0; j < out_w; ++j) {
          const std::size_t w0 = detail::bin_begin(j, W, out_w), w1 = detail::bin_end(j, W, out_w);
          const T share =
              grad_out.at(n, c, i, j) / static_cast<T>((h1 - h0) * (w1 - w0));
          for (std::size_t h = h0; h < h1; ++h)
            for (std::size_t w = w0; w < w1; ++w) g.at(n, c, h, w) += share;
        }
      }
  return g;
}

/// Fixed-window average pooling with zero padding; the divisor is always k*k.
template <typename T>
Tensor<T> avgpool2d_forward(const Tensor<T>& input, const ConvGeometry& g) {
  require_rank(input, 4, "avgpool2d input");
  const std::size_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::size_t Ho = conv_output_extent(H, g), Wo = conv_output_extent(W, g);
  const T norm = T{1} / static_cast<T>(g.kernel * g.kernel);
  Tensor<T> out({N, C, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          T s{0};
          for (std::size_t a = 0; a < g.kernel; ++a) {
            const auto h = static_cast<std::ptrdiff_t>(i * g.stride + a * g.dilation) -
                           static_cast<std::ptrdiff_t>(g.padding);
            if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t b = 0; b < g.kernel; ++b) {
              const auto w = static_cast<std::ptrdiff_t>(j * g.stride + b * g.dilation) -
                             static_cast<std::ptrdiff_t>(g.padding);
              if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
              s += input.at(n, c, static_cast<std::size_t>(h), static_cast<std::size_t>(w));
            }
          }
          out.at(n, c, i, j) = s * norm;
        }
  return out;
}

template <typename T>
Tensor<T> avgpool2d_backward(const Tensor<T>& grad_out, const Shape& input_shape,
                             const ConvGeometry& g) {
  const std::size_t N = input_shape.at(0), C = input_shape.at(1);
  const std::size_t H = input_shape.at(2), W = input_shape.at(3);
  const std::size_t Ho = conv_output_extent(H, g), Wo = conv_output_extent(W, g);
  if (grad_out.shape() != Shape{N, C, Ho, Wo}) throw ShapeError("avgpool2d backward: shape mismatch");
  const T norm = T{1} / static_cast<T>(g.kernel * g.kernel);
  Tensor<T> gin(input_shape);
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          const T share = grad_out.at(n, c, i, j) * norm;
          for (std::size_t a = 0; a < g.kernel; ++a) {
            const auto h = static_cast<std::ptrdiff_t>(i * g.stride + a * g.dilation) -
                           static_cast<std::ptrdiff_t>(g.padding);
            if (h < 0 || h >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t b = 0; b < g.kernel; ++b) {
              const auto w = static_cast<std::ptrdiff_t>(j * g.stride + b * g.dilation) -
                             static_cast<std::ptrdiff_t>(g.padding);
              if (w < 0 || w >= static_cast<std::ptrdiff_t>(W)) continue;
              gin.at(n, c, static_cast<std::size_t>(h), static_cast<std::size_t>(w)) += share;
            }
          }
        }
  return gin;
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossResult {
  double loss = 0.0;
  Tensor<T> grad_logits;
};

/// Row-wise softmax of an (N, C) tensor, computed with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  require_rank(logits, 2, "softmax logits");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  Tensor<T> p(logits.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = logits.raw() + n * C;
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < C; ++c) p[n * C + c] = static_cast<T>(std::exp(row[c] - mx) / z);
  }
  return p;
}

/// Mean cross-entropy over the batch and its gradient (softmax - onehot) / N.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_rank(logits, 2, "cross-entropy logits");
  const std::size_t N = logits.dim(0), C = logits.dim(1);
  if (labels.size() != N) throw ShapeError("cross-entropy: label count does not match batch");
  LossResult<T> r{0.0, Tensor<T>(logits.shape())};
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= C)
      throw DataError("cross-entropy: label " + std::to_string(y) + " outside [0, " +
                      std::to_string(C) + ")");
    const T* row = logits.raw() + n * C;
    double mx = row[0];
    for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, row[c]);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double log_z = std::log(z) + mx;
    r.loss += log_z - row[y];
    for (std::size_t c = 0; c < C; ++c) {
      const double p = std::exp(row[c] - log_z);
      r.grad_logits[n * C + c] =
          static_cast<T>((p - (static_cast<std::size_t>(y) == c ? 1.0 : 0.0)) / static_cast<double>(N));
    }
  }
  r.loss /= static_cast<double>(N);
  return r;
}

}  // namespace hysense
