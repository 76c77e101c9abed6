#pragma once

// Differentiable tensor operations.
//
// Binary elementwise ops broadcast by trailing-dimension alignment. Every op
// returns a fresh tensor; the result records a backward closure whenever any
// operand requires a gradient.

#include <cstddef>
#include <memory>
#include <optional>
#include <vector>

#include "tabl/tensor.hpp"

namespace tabl {

Shape broadcast_shapes(const Shape& a, const Shape& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }

Tensor relu(const Tensor& x);
Tensor leaky_relu(const Tensor& x, double negative_slope = 0.01);
// Exact (erf) form.
Tensor gelu(const Tensor& x);
Tensor exp(const Tensor& x);
// Requires strictly positive input.
Tensor log(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::size_t axis, bool keepdim = false);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& order);
// Swaps the last two axes.
Tensor transpose(const Tensor& x);
// out.flat[i] = x.flat[index[i]]; repeated indices accumulate in backward.
Tensor gather(const Tensor& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);

// [..., M, K] x [..., K, N] -> [..., M, N] with broadcast batch axes.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

// Zero mean, unit variance over the last axis (biased variance, eps inside sqrt).
Tensor normalize_last(const Tensor& x, double eps = 1e-5);
// normalize_last followed by per-feature gain and bias of shape [last].
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Per-channel normalization over the spatial axes of a [C, S...] map; gain and bias are [C].
Tensor instance_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Input [C_in, S...] with 2 or 3 spatial axes; kernel [C_out, C_in, k...].
// Output extent per axis: floor((S + 2*pad - k) / stride) + 1.
Tensor conv_nd(const Tensor& input, const Tensor& kernel, const std::optional<Tensor>& bias,
               const std::vector<std::size_t>& stride, const std::vector<std::size_t>& padding);

// Transposed convolution with kernel 2 and stride 2 on every spatial axis.
// Input [C_in, S...], kernel [C_in, C_out, 2...], bias [C_out] -> [C_out, 2S...].
Tensor conv_transpose_2x(const Tensor& input, const Tensor& kernel, const Tensor& bias);

}  // namespace tabl
