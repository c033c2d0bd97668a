#pragma once
// Dense and convolutional layer primitives shared by the backbone and heads.
// All tensors are flat row-major buffers; inner loops go through the SIMD
// kernels in kernels.hpp.

#include <cstddef>
#include <span>
#include <vector>

#include "clsa/errors.hpp"
#include "clsa/kernels.hpp"

namespace clsa::nn {

// y = W x + b with W stored [out x in].
template <typename T>
void linear_forward(std::span<const T> weight, std::span<const T> bias, std::span<const T> x,
                    std::span<T> y) {
  const std::size_t out = y.size();
  const std::size_t in = x.size();
  if (weight.size() != out * in || bias.size() != out) {
    throw ContractError("linear_forward: parameter shape mismatch");
  }
  for (std::size_t o = 0; o < out; ++o) {
    y[o] = simd::dot(weight.subspan(o * in, in), x) + bias[o];
  }
}

// Accumulates dW += dy x^T, db += dy and (when dx is non-empty) dx += W^T dy.
template <typename T>
void linear_backward(std::span<const T> weight, std::span<const T> x, std::span<const T> dy,
                     std::span<T> dweight, std::span<T> dbias, std::span<T> dx) {
  const std::size_t out = dy.size();
  const std::size_t in = x.size();
  for (std::size_t o = 0; o < out; ++o) {
    if (dy[o] == T(0)) continue;
    if (!dweight.empty()) simd::axpy(dy[o], x, dweight.subspan(o * in, in));
    if (!dbias.empty()) dbias[o] += dy[o];
    if (!dx.empty()) simd::axpy(dy[o], weight.subspan(o * in, in), dx);
  }
}

struct ConvShape {
  int in_channels = 0;
  int in_height = 0;
  int in_width = 0;
  int out_channels = 0;
  int stride = 1;  // 3x3 kernel, padding 1

  int out_height() const { return (in_height + 2 - 3) / stride + 1; }
  int out_width() const { return (in_width + 2 - 3) / stride + 1; }
  std::size_t patch_size() const { return static_cast<std::size_t>(in_channels) * 9; }
  std::size_t out_positions() const {
    return static_cast<std::size_t>(out_height()) * out_width();
  }
  std::size_t input_size() const {
    return static_cast<std::size_t>(in_channels) * in_height * in_width;
  }
  std::size_t output_size() const { return out_positions() * out_channels; }
  std::size_t weight_size() const { return patch_size() * out_channels; }
};

// Gathers each output position's 3x3xC receptive field into one row of
// `patches` ([positions x C*9]), zero padded.
template <typename T>
void im2row(const ConvShape& s, std::span<const T> input, std::span<T> patches) {
  const int oh = s.out_height();
  const int ow = s.out_width();
  const std::size_t row = s.patch_size();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* dst = patches.data() + (static_cast<std::size_t>(oy) * ow + ox) * row;
      for (int c = 0; c < s.in_channels; ++c) {
        const T* plane = input.data() + static_cast<std::size_t>(c) * s.in_height * s.in_width;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * s.stride + ky - 1;
          for (int kx = 0; kx < 3; ++kx) {
            const int ix = ox * s.stride + kx - 1;
            const bool inside = iy >= 0 && iy < s.in_height && ix >= 0 && ix < s.in_width;
            *dst++ = inside ? plane[iy * s.in_width + ix] : T(0);
          }
        }
      }
    }
  }
}

// Scatter-add inverse of im2row.
template <typename T>
void row2im_add(const ConvShape& s, std::span<const T> patches, std::span<T> input_grad) {
  const int oh = s.out_height();
  const int ow = s.out_width();
  const std::size_t row = s.patch_size();
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const T* src = patches.data() + (static_cast<std::size_t>(oy) * ow + ox) * row;
      for (int c = 0; c < s.in_channels; ++c) {
        T* plane = input_grad.data() + static_cast<std::size_t>(c) * s.in_height * s.in_width;
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = oy * s.stride + ky - 1;
          for (int kx = 0; kx < 3; ++kx, ++src) {
            const int ix = ox * s.stride + kx - 1;
            if (iy >= 0 && iy < s.in_height && ix >= 0 && ix < s.in_width) {
              plane[iy * s.in_width + ix] += *src;
            }
          }
        }
      }
    }
  }
}

// out[co, p] = <W[co], patch[p]> + b[co]. `scratch` is resized as needed.
template <typename T>
void conv3x3_forward(const ConvShape& s, std::span<const T> weight, std::span<const T> bias,
                     std::span<const T> input, std::span<T> output, std::vector<T>& scratch) {
  if (weight.size() != s.weight_size() || bias.size() != static_cast<std::size_t>(s.out_channels) ||
      input.size() != s.input_size() || output.size() != s.output_size()) {
    throw ContractError("conv3x3_forward: shape mismatch");
  }
  const std::size_t positions = s.out_positions();
  const std::size_t row = s.patch_size();
  scratch.resize(positions * row);
  std::span<T> patches(scratch);
  im2row<T>(s, input, patches);
  for (int co = 0; co < s.out_channels; ++co) {
    const auto w = weight.subspan(co * row, row);
    T* out = output.data() + co * positions;
    for (std::size_t p = 0; p < positions; ++p) {
      out[p] = simd::dot(w, std::span<const T>(patches.subspan(p * row, row))) + bias[co];
    }
  }
}

// Accumulates parameter gradients and, when input_grad is non-empty, the
// input gradient for one sample.
template <typename T>
void conv3x3_backward(const ConvShape& s, std::span<const T> weight, std::span<const T> input,
                      std::span<const T> output_grad, std::span<T> weight_grad,
                      std::span<T> bias_grad, std::span<T> input_grad, std::vector<T>& scratch,
                      std::vector<T>& scratch_grad) {
  const std::size_t positions = s.out_positions();
  const std::size_t row = s.patch_size();
  scratch.resize(positions * row);
  std::span<T> patches(scratch);
  im2row<T>(s, input, patches);
  const bool want_input = !input_grad.empty();
  if (want_input) scratch_grad.assign(positions * row, T(0));
  for (int co = 0; co < s.out_channels; ++co) {
    const T* g = output_grad.data() + co * positions;
    const auto w = weight.subspan(co * row, row);
    auto dw = weight_grad.subspan(co * row, row);
    for (std::size_t p = 0; p < positions; ++p) {
      if (g[p] == T(0)) continue;
      simd::axpy(g[p], std::span<const T>(patches.subspan(p * row, row)), dw);
      if (want_input) simd::axpy(g[p], w, std::span<T>(scratch_grad).subspan(p * row, row));
    }
    bias_grad[co] += simd::sum(std::span<const T>(g, positions));
  }
  if (want_input) row2im_add<T>(s, std::span<const T>(scratch_grad), input_grad);
}

}  // namespace clsa::nn
