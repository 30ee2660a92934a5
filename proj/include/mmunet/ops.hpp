#pragma once

#include <vector>

#include "mmunet/tensor.hpp"

// Primitive differentiable operators. Every operator returns a fresh tensor
// (no views) and, when gradients are enabled and an input requires them,
// records the backward rule on the result.
namespace mmunet::ops {

template <class T>
TensorPtr<T> add(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <class T>
TensorPtr<T> mul(const TensorPtr<T>& a, const TensorPtr<T>& b);

template <class T>
TensorPtr<T> scale(const TensorPtr<T>& a, T factor);

template <class T>
TensorPtr<T> sum(const TensorPtr<T>& a);

// a[M x K] * b[K x N] -> [M x N]
template <class T>
TensorPtr<T> matmul(const TensorPtr<T>& a, const TensorPtr<T>& b);

// x[... x K] * w[K x N] (+ bias[N]) -> [... x N], applied along the last axis.
template <class T>
TensorPtr<T> linear(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias);

// Cross-correlation. x[B x C x H x W], w[O x C x KH x KW], bias[O] (optional).
template <class T>
TensorPtr<T> conv2d(const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& bias,
                    index_t stride = 1, index_t pad = 0);

// 2x2 window max, stride 2; ties go to the first element in row-major window
// order and the gradient follows the winner.
template <class T>
TensorPtr<T> maxpool2(const TensorPtr<T>& x);

// Doubles H and W; source coordinate of output i is (i + 0.5)/2 - 0.5 with
// edge clamping (align_corners = false).
template <class T>
TensorPtr<T> upsample_bilinear2(const TensorPtr<T>& x);

// Standardize over the last axis, then scale/shift by gamma/delta (length d).
template <class T>
TensorPtr<T> layernorm(const TensorPtr<T>& x, const TensorPtr<T>& gamma,
                       const TensorPtr<T>& delta, T eps = T(1e-5));

// tanh-approximation GELU: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3)))
template <class T>
TensorPtr<T> gelu(const TensorPtr<T>& x);

template <class T>
TensorPtr<T> relu(const TensorPtr<T>& x);

// Mean over all B*H*W pixels of -log softmax(logits)[target]. logits are
// [B x K x H x W], target [B x H x W] holds integral class ids in [0, K).
template <class T>
TensorPtr<T> softmax_ce(const TensorPtr<T>& logits, const TensorPtr<T>& target);

// Channel split/concat on [B x C x H x W]. Boundaries are strictly increasing
// interior cut points; split(x, {32, 48}) on C=64 gives parts of 32/16/16.
template <class T>
std::vector<TensorPtr<T>> split_channels(const TensorPtr<T>& x,
                                         const std::vector<index_t>& boundaries);

template <class T>
TensorPtr<T> concat_channels(const std::vector<TensorPtr<T>>& parts);

template <class T>
TensorPtr<T> reshape(const TensorPtr<T>& x, std::vector<index_t> new_shape);

// [... x A x B] -> [... x B x A]
template <class T>
TensorPtr<T> transpose_last2(const TensorPtr<T>& x);

// x[B x N x D], index list over the token axis: out[b, i, :] = x[b, idx[i], :].
template <class T>
TensorPtr<T> gather_tokens(const TensorPtr<T>& x, const std::vector<index_t>& idx);

// Non-overlapping s x s patch extraction. x[B x C x H x W] ->
// [B x (H/s)(W/s) x C*s*s]; tokens enumerate the patch grid row-major and
// features flatten row-major over (channel, dy, dx). merge_patches inverts it.
template <class T>
TensorPtr<T> extract_patches(const TensorPtr<T>& x, index_t s);

template <class T>
TensorPtr<T> merge_patches(const TensorPtr<T>& tokens, index_t channels, index_t height,
                           index_t width, index_t s);

// x[B x N x C] -> [B x C], mean over the token axis.
template <class T>
TensorPtr<T> mean_tokens(const TensorPtr<T>& x);

}  // namespace mmunet::ops
