#pragma once

// Forward kernels for the layer vocabulary. Every kernel is a template over
// the storage type so the same definition serves float inference and the
// double-precision finite-difference oracle. Reductions run in ascending
// index order and accumulate in double.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "metta/errors.hpp"
#include "metta/tensor.hpp"

namespace metta {

struct ConvGeometry {
  std::size_t in_channels = 0, in_height = 0, in_width = 0;
  std::size_t out_channels = 0, kernel_height = 0, kernel_width = 0;
  std::size_t stride = 1, pad = 0;
  std::size_t out_height = 0, out_width = 0;

  std::size_t patch_size() const { return in_channels * kernel_height * kernel_width; }
  std::size_t positions() const { return out_height * out_width; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, long stride, long pad) {
  if (input.size() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + to_string(input));
  if (kernel.size() != 4) throw ShapeError("conv2d: kernel must be [Co,Ci,kH,kW], got " + to_string(kernel));
  if (input[0] != kernel[1]) {
    throw ShapeError("conv2d: input has " + std::to_string(input[0]) + " channels, kernel expects " +
                     std::to_string(kernel[1]));
  }
  if (stride < 1) throw GeometryError("conv2d: stride must be >= 1");
  if (pad < 0) throw GeometryError("conv2d: padding must be >= 0");
  ConvGeometry g;
  g.in_channels = input[0];
  g.in_height = input[1];
  g.in_width = input[2];
  g.out_channels = kernel[0];
  g.kernel_height = kernel[2];
  g.kernel_width = kernel[3];
  g.stride = static_cast<std::size_t>(stride);
  g.pad = static_cast<std::size_t>(pad);
  const std::size_t padded_h = g.in_height + 2 * g.pad;
  const std::size_t padded_w = g.in_width + 2 * g.pad;
  if (g.kernel_height > padded_h || g.kernel_width > padded_w) {
    throw GeometryError("conv2d: kernel " + std::to_string(g.kernel_height) + "x" +
                        std::to_string(g.kernel_width) + " exceeds padded input " +
                        std::to_string(padded_h) + "x" + std::to_string(padded_w));
  }
  g.out_height = (padded_h - g.kernel_height) / g.stride + 1;
  g.out_width = (padded_w - g.kernel_width) / g.stride + 1;
  return g;
}

/// Unfolds the zero-padded input into a [patch_size, positions] matrix so that
/// convolution becomes kernel[Co, patch] x columns[patch, positions].
template <std::floating_point T>
std::vector<T> im2col(const BasicTensor<T>& input, const ConvGeometry& g) {
  const std::size_t positions = g.positions();
  std::vector<T> cols(g.patch_size() * positions, T{0});
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    for (std::size_t kh = 0; kh < g.kernel_height; ++kh) {
      for (std::size_t kw = 0; kw < g.kernel_width; ++kw, ++row) {
        T* dst = cols.data() + row * positions;
        for (std::size_t oh = 0; oh < g.out_height; ++oh) {
          const long ih = static_cast<long>(oh * g.stride + kh) - static_cast<long>(g.pad);
          if (ih < 0 || ih >= static_cast<long>(g.in_height)) continue;
          for (std::size_t ow = 0; ow < g.out_width; ++ow) {
            const long iw = static_cast<long>(ow * g.stride + kw) - static_cast<long>(g.pad);
            if (iw < 0 || iw >= static_cast<long>(g.in_width)) continue;
            dst[oh * g.out_width + ow] = input.at(c, static_cast<std::size_t>(ih), static_cast<std::size_t>(iw));
          }
        }
      }
    }
  }
  return cols;
}

template <std::floating_point T>
BasicTensor<T> conv2d_from_columns(std::span<const T> cols, const BasicTensor<T>& kernel,
                                   const ConvGeometry& g) {
  const std::size_t patch = g.patch_size();
  const std::size_t positions = g.positions();
  BasicTensor<T> out({g.out_channels, g.out_height, g.out_width});
  std::vector<double> acc(positions);
  for (std::size_t co = 0; co < g.out_channels; ++co) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const T* w = kernel.data().data() + co * patch;
    for (std::size_t k = 0; k < patch; ++k) {
      const double wk = static_cast<double>(w[k]);
      const T* src = cols.data() + k * positions;
      for (std::size_t p = 0; p < positions; ++p) acc[p] += wk * static_cast<double>(src[p]);
    }
    T* dst = out.data().data() + co * positions;
    for (std::size_t p = 0; p < positions; ++p) dst[p] = static_cast<T>(acc[p]);
  }
  return out;
}

/// Cross-correlation (no kernel flip) with symmetric zero padding and floor geometry.
template <std::floating_point T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicTensor<T>& kernel, long stride, long pad) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, pad);
  const std::vector<T> cols = im2col(input, g);
  return conv2d_from_columns<T>(cols, kernel, g);
}

template <std::floating_point T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out = input;
  for (T& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

struct PoolGeometry {
  std::size_t channels = 0, in_height = 0, in_width = 0;
  std::size_t window = 0, stride = 0, out_height = 0, out_width = 0;
};

inline PoolGeometry pool_geometry(const Shape& input, long window, long stride) {
  if (input.size() != 3) throw ShapeError("maxpool2d: input must be [C,H,W], got " + to_string(input));
  if (window < 1 || stride < 1) throw GeometryError("maxpool2d: window and stride must be >= 1");
  PoolGeometry g{input[0], input[1], input[2], static_cast<std::size_t>(window),
                 static_cast<std::size_t>(stride), 0, 0};
  if (g.window > g.in_height || g.window > g.in_width) {
    throw GeometryError("maxpool2d: window " + std::to_string(window) + " exceeds input " +
                        to_string(input));
  }
  g.out_height = (g.in_height - g.window) / g.stride + 1;
  g.out_width = (g.in_width - g.window) / g.stride + 1;
  return g;
}

/// Window maximum. `argmax`, when given, receives the flat input index chosen
/// for every output element (first maximum in row-major window order).
template <std::floating_point T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& input, long window, long stride,
                         std::vector<std::size_t>* argmax = nullptr) {
  const PoolGeometry g = pool_geometry(input.shape(), window, stride);
  BasicTensor<T> out({g.channels, g.out_height, g.out_width});
  if (argmax) argmax->assign(out.size(), 0);
  std::size_t o = 0;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t oh = 0; oh < g.out_height; ++oh) {
      for (std::size_t ow = 0; ow < g.out_width; ++ow, ++o) {
        std::size_t best = (c * g.in_height + oh * g.stride) * g.in_width + ow * g.stride;
        for (std::size_t kh = 0; kh < g.window; ++kh) {
          for (std::size_t kw = 0; kw < g.window; ++kw) {
            const std::size_t idx = (c * g.in_height + oh * g.stride + kh) * g.in_width + ow * g.stride + kw;
            if (input[idx] > input[best]) best = idx;
          }
        }
        out[o] = input[best];
        if (argmax) (*argmax)[o] = best;
      }
    }
  }
  return out;
}

template <std::floating_point T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& input) {
  if (input.rank() != 3) throw ShapeError("global_avg_pool: input must be [C,H,W], got " + to_string(input.shape()));
  const std::size_t channels = input.dim(0);
  const std::size_t area = input.dim(1) * input.dim(2);
  BasicTensor<T> out({channels});
  for (std::size_t c = 0; c < channels; ++c) {
    double sum = 0.0;
    const T* src = input.data().data() + c * area;
    for (std::size_t i = 0; i < area; ++i) sum += static_cast<double>(src[i]);
    out[c] = static_cast<T>(sum / static_cast<double>(area));
  }
  return out;
}

/// weight . input + bias
template <std::floating_point T>
BasicTensor<T> dense(const BasicTensor<T>& input, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  if (input.rank() != 1) throw ShapeError("dense: input must be a vector, got " + to_string(input.shape()));
  if (weight.rank() != 2 || weight.dim(1) != input.dim(0)) {
    throw ShapeError("dense: weight " + to_string(weight.shape()) + " incompatible with input " +
                     to_string(input.shape()));
  }
  if (bias.rank() != 1 || bias.dim(0) != weight.dim(0)) {
    throw ShapeError("dense: bias " + to_string(bias.shape()) + " incompatible with weight " +
                     to_string(weight.shape()));
  }
  const std::size_t rows = weight.dim(0), cols = weight.dim(1);
  BasicTensor<T> out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double sum = 0.0;
    const T* w = weight.data().data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) sum += static_cast<double>(w[c]) * static_cast<double>(input[c]);
    out[r] = static_cast<T>(sum + static_cast<double>(bias[r]));
  }
  return out;
}

template <std::floating_point T>
double log_sum_exp(std::span<const T> logits) {
  if (logits.empty()) throw ShapeError("log_sum_exp: empty input");
  double peak = -std::numeric_limits<double>::infinity();
  for (T v : logits) peak = std::max(peak, static_cast<double>(v));
  double sum = 0.0;
  for (T v : logits) sum += std::exp(static_cast<double>(v) - peak);
  return peak + std::log(sum);
}

/// Max-subtracted softmax over a vector.
template <std::floating_point T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 1) throw ShapeError("softmax: input must be a vector, got " + to_string(logits.shape()));
  double peak = -std::numeric_limits<double>::infinity();
  for (T v : logits.data()) peak = std::max(peak, static_cast<double>(v));
  std::vector<double> e(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    e[i] = std::exp(static_cast<double>(logits[i]) - peak);
    sum += e[i];
  }
  BasicTensor<T> out(logits.shape());
  for (std::size_t i = 0; i < e.size(); ++i) out[i] = static_cast<T>(e[i] / sum);
  return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

inline void check_label(std::size_t label, std::size_t classes, const char* what) {
  if (label >= classes) {
    throw ValueError(std::string(what) + ": label " + std::to_string(label) + " out of range for " +
                     std::to_string(classes) + " classes");
  }
}

/// -log(probs[label]) with the probability clamped at 1e-12.
template <std::floating_point T>
double cross_entropy(const BasicTensor<T>& probs, std::size_t label) {
  if (probs.rank() != 1) throw ShapeError("cross_entropy: probs must be a vector");
  check_label(label, probs.size(), "cross_entropy");
  return -std::log(std::max(static_cast<double>(probs[label]), kProbabilityFloor));
}

/// -log softmax(logits)[label] evaluated as log_sum_exp(logits) - logits[label].
template <std::floating_point T>
double nll_from_logits(const BasicTensor<T>& logits, std::size_t label) {
  check_label(label, logits.size(), "nll_from_logits");
  return log_sum_exp<T>(logits.data()) - static_cast<double>(logits[label]);
}

/// Index of the largest element; ties go to the lowest index.
template <std::floating_point T>
std::size_t argmax(std::span<const T> values) {
  if (values.empty()) throw ShapeError("argmax: empty input");
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

template <std::floating_point T>
std::size_t argmax(const BasicTensor<T>& values) {
  return argmax(std::span<const T>(values.data()));
}

}  // namespace metta
