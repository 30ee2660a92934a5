#pragma once

#include <vector>

#include "mmunet/tensor.hpp"

namespace mmunet::mmlp {

// One channel group of a block: C_g channels patchified at patch_size s, with
// the patch grid mixed inside block_count x block_count windows.
struct GroupSpec {
    index_t channels = 0;     // C_g
    index_t patch_size = 0;   // s
    index_t block_count = 0;  // n; 1 means one window over the whole grid
};

template <class T>
struct LTMParams {
    TensorPtr<T> gamma, delta;  // prenorm affine over d = C_g * s^2
    TensorPtr<T> w3, b3;        // [T x rT], [rT]  with T tokens per window
    TensorPtr<T> w4, b4;        // [rT x T], [T]
};

template <class T>
struct MMLPConfig {
    std::vector<GroupSpec> groups;
    std::vector<LTMParams<T>> params;  // one per group
};

// Zero-filled parameters with the right extents.
template <class T>
LTMParams<T> alloc_ltm(index_t lanes, index_t tokens_per_block, index_t hidden,
                       bool requires_grad);

// Tokens per window for a group applied to a map_size x map_size feature map.
index_t tokens_per_block(const GroupSpec& g, index_t map_size);

// Scalar parameter count of one group's LTM: affine pair over d plus the two
// token-mix maps with biases. ratio scales the hidden width (rT per window).
index_t ltm_param_count(const GroupSpec& g, index_t map_size, double ratio = 1.0);

// [B x C_g x R x R] -> [B x G^2 x C_g*s^2] with G = R/s; row-major grid
// enumeration, row-major (channel, dy, dx) feature flattening.
template <class T>
TensorPtr<T> patchify(const TensorPtr<T>& g, index_t s);

template <class T>
TensorPtr<T> unpatchify(const TensorPtr<T>& tokens, index_t channels, index_t map_size,
                        index_t s);

// Local token mixing: the G x G patch grid splits into n x n contiguous
// windows; tokens of each window are stacked row-major and run through
// u + gelu(layernorm(u)^T W3) W4 with weights shared across windows and
// lanes. With n=1 this is exactly mixer::token_mix over the whole grid.
template <class T>
TensorPtr<T> ltm(const TensorPtr<T>& tokens, const GroupSpec& spec, const LTMParams<T>& p);

// split by channel, per-group patchify/ltm/unpatchify, concat back
template <class T>
TensorPtr<T> mmlp_block(const TensorPtr<T>& x, const MMLPConfig<T>& config);

}  // namespace mmunet::mmlp
