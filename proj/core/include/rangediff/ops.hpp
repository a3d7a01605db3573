#pragma once

#include <vector>

#include "rangediff/tensor.hpp"

// Differentiable tensor operations. Every function records its backward rule
// when any input requires a gradient.
namespace rangediff::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real value);

// Broadcast a length-C vector along the last axis of x[..., C].
Tensor add_lastdim(const Tensor& x, const Tensor& v);
Tensor mul_lastdim(const Tensor& x, const Tensor& v);

// Broadcast per-sample channel values v[B, C] over the trailing axes of x[B, C, ...].
Tensor add_channels(const Tensor& x, const Tensor& v);
Tensor mul_channels(const Tensor& x, const Tensor& v);

Tensor exp(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor square(const Tensor& x);
Tensor clamp(const Tensor& x, Real lo, Real hi);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean of squared differences over all elements.
Tensor mse(const Tensor& prediction, const Tensor& target);

/// a[m, k] · b[k, n].
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched a[B, m, k] · b[B, k, n].
Tensor bmm(const Tensor& a, const Tensor& b);
/// x[..., K] · w[K, M] (+ bias[M]); leading axes are flattened.
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});
/// Swaps the last two axes of a rank-3 tensor.
Tensor transpose_last2(const Tensor& x);

/// Max-subtracted softmax along `axis`. Throws NumericError on non-finite input.
Tensor softmax(const Tensor& x, std::size_t axis);
/// Normalizes the last axis to zero mean, unit variance, then applies gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps = 1e-5);

/// 2-D convolution of x[B, Cin, H, W] with weight[Cout, Cin, kh, kw].
/// Padding keeps the "same" extent: the column axis wraps around (azimuth is
/// periodic), the row axis is zero padded. Kernel extents must be odd.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {}, std::size_t stride = 1);
/// Nearest-neighbour 2x upsampling of x[B, C, H, W].
Tensor upsample_nearest2(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Selects rows of table[M, K] → [indices.size(), K].
Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& indices);

/// First-order linear recurrence along axis 1 of [B, L, C]:
/// h[s] = decay[s] ⊙ h[s-1] + input[s], h[-1] = 0.
Tensor linear_recurrence(const Tensor& decay, const Tensor& input);

}  // namespace rangediff::ops
