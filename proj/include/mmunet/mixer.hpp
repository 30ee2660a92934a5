#pragma once

#include "mmunet/tensor.hpp"

// Patch embedding, channel-mixing and token-mixing MLPs, and the pooled
// classifier head. token_mix is also the reference the windowed variant in
// mmlp.hpp must reproduce exactly when its block count is 1.
namespace mmunet::mixer {

template <class T>
struct EmbeddingParams {
    index_t patch_size = 0;
    index_t in_channels = 0;
    index_t hidden_dim = 0;
    TensorPtr<T> weight;  // [in_channels * P^2 x hidden_dim]
    TensorPtr<T> bias;    // [hidden_dim]
};

template <class T>
struct MixerLayerParams {
    // channel mixing: per token, across the feature axis
    TensorPtr<T> ln1_gamma, ln1_delta;  // [C]
    TensorPtr<T> w1, b1;                // [C x rC], [rC]
    TensorPtr<T> w2, b2;                // [rC x C], [C]
    // token mixing: per feature lane, across the token axis
    TensorPtr<T> ln2_gamma, ln2_delta;  // [C]
    TensorPtr<T> w3, b3;                // [n x rn], [rn]
    TensorPtr<T> w4, b4;                // [rn x n], [n]
};

// Zero-filled parameter blocks with the right extents; callers fill them.
template <class T>
EmbeddingParams<T> alloc_embedding(index_t patch_size, index_t in_channels, index_t hidden_dim,
                                   bool requires_grad);

template <class T>
MixerLayerParams<T> alloc_mixer_layer(index_t channels, index_t tokens, index_t hidden_c,
                                      index_t hidden_n, bool requires_grad);

// image [B x C_in x H x W] -> tokens [B x HW/P^2 x hidden_dim]; patches
// enumerated row-major over the grid, flattened row-major over (c, dy, dx).
template <class T>
TensorPtr<T> patch_embed(const TensorPtr<T>& image, const EmbeddingParams<T>& p);

// x + W2 * gelu(W1 * layernorm(x)) along the feature axis
template <class T>
TensorPtr<T> channel_mix(const TensorPtr<T>& x, const MixerLayerParams<T>& p);

// x + gelu(layernorm(x)^T * W3) * W4 along the token axis, weights shared
// across feature lanes
template <class T>
TensorPtr<T> token_mix(const TensorPtr<T>& x, const MixerLayerParams<T>& p);

// channel_mix then token_mix
template <class T>
TensorPtr<T> mixer_layer(const TensorPtr<T>& x, const MixerLayerParams<T>& p);

// mean over tokens, then linear map to class scores
template <class T>
TensorPtr<T> classifier_head(const TensorPtr<T>& y, const TensorPtr<T>& w,
                             const TensorPtr<T>& bias);

}  // namespace mmunet::mixer
