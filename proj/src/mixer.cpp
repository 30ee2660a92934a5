#include "mmunet/mixer.hpp"

#include <string>

#include "mmunet/errors.hpp"
#include "mmunet/ops.hpp"

namespace mmunet::mixer {

template <class T>
EmbeddingParams<T> alloc_embedding(index_t patch_size, index_t in_channels, index_t hidden_dim,
                                   bool requires_grad) {
    EmbeddingParams<T> p;
    p.patch_size = patch_size;
    p.in_channels = in_channels;
    p.hidden_dim = hidden_dim;
    p.weight = Tensor<T>::create({in_channels * patch_size * patch_size, hidden_dim},
                                 requires_grad);
    p.bias = Tensor<T>::create({hidden_dim}, requires_grad);
    return p;
}

template <class T>
MixerLayerParams<T> alloc_mixer_layer(index_t channels, index_t tokens, index_t hidden_c,
                                      index_t hidden_n, bool requires_grad) {
    MixerLayerParams<T> p;
    p.ln1_gamma = Tensor<T>::full({channels}, T(1), requires_grad);
    p.ln1_delta = Tensor<T>::create({channels}, requires_grad);
    p.w1 = Tensor<T>::create({channels, hidden_c}, requires_grad);
    p.b1 = Tensor<T>::create({hidden_c}, requires_grad);
    p.w2 = Tensor<T>::create({hidden_c, channels}, requires_grad);
    p.b2 = Tensor<T>::create({channels}, requires_grad);
    p.ln2_gamma = Tensor<T>::full({channels}, T(1), requires_grad);
    p.ln2_delta = Tensor<T>::create({channels}, requires_grad);
    p.w3 = Tensor<T>::create({tokens, hidden_n}, requires_grad);
    p.b3 = Tensor<T>::create({hidden_n}, requires_grad);
    p.w4 = Tensor<T>::create({hidden_n, tokens}, requires_grad);
    p.b4 = Tensor<T>::create({tokens}, requires_grad);
    return p;
}

template <class T>
TensorPtr<T> patch_embed(const TensorPtr<T>& image, const EmbeddingParams<T>& p) {
    if (image->ndim() != 4 || image->dim(1) != p.in_channels) {
        throw ShapeError("patch_embed expects [B x " + std::to_string(p.in_channels) +
                         " x H x W], got " + shape_str(image->shape));
    }
    if (image->dim(2) % p.patch_size != 0 || image->dim(3) % p.patch_size != 0) {
        throw ConfigError("patch_embed size " + std::to_string(p.patch_size) +
                          " must divide spatial dims of " + shape_str(image->shape));
    }
    auto tokens = ops::extract_patches(image, p.patch_size);
    return ops::linear(tokens, p.weight, p.bias);
}

template <class T>
TensorPtr<T> channel_mix(const TensorPtr<T>& x, const MixerLayerParams<T>& p) {
    if (x->ndim() != 3) {
        throw ShapeError("channel_mix expects [batch x tokens x channels], got " +
                         shape_str(x->shape));
    }
    auto h = ops::layernorm(x, p.ln1_gamma, p.ln1_delta);
    h = ops::linear(h, p.w1, p.b1);
    h = ops::gelu(h);
    h = ops::linear(h, p.w2, p.b2);
    return ops::add(x, h);
}

template <class T>
TensorPtr<T> token_mix(const TensorPtr<T>& x, const MixerLayerParams<T>& p) {
    if (x->ndim() != 3) {
        throw ShapeError("token_mix expects [batch x tokens x channels], got " +
                         shape_str(x->shape));
    }
    auto h = ops::layernorm(x, p.ln2_gamma, p.ln2_delta);
    h = ops::transpose_last2(h);  // [B x C x n]
    h = ops::linear(h, p.w3, p.b3);
    h = ops::gelu(h);
    h = ops::linear(h, p.w4, p.b4);
    h = ops::transpose_last2(h);  // back to [B x n x C]
    return ops::add(x, h);
}

template <class T>
TensorPtr<T> mixer_layer(const TensorPtr<T>& x, const MixerLayerParams<T>& p) {
    return token_mix(channel_mix(x, p), p);
}

template <class T>
TensorPtr<T> classifier_head(const TensorPtr<T>& y, const TensorPtr<T>& w,
                             const TensorPtr<T>& bias) {
    return ops::linear(ops::mean_tokens(y), w, bias);
}

#define MMUNET_INSTANTIATE_MIXER(T)                                                           \
    template EmbeddingParams<T> alloc_embedding<T>(index_t, index_t, index_t, bool);          \
    template MixerLayerParams<T> alloc_mixer_layer<T>(index_t, index_t, index_t, index_t,     \
                                                      bool);                                  \
    template TensorPtr<T> patch_embed<T>(const TensorPtr<T>&, const EmbeddingParams<T>&);     \
    template TensorPtr<T> channel_mix<T>(const TensorPtr<T>&, const MixerLayerParams<T>&);    \
    template TensorPtr<T> token_mix<T>(const TensorPtr<T>&, const MixerLayerParams<T>&);      \
    template TensorPtr<T> mixer_layer<T>(const TensorPtr<T>&, const MixerLayerParams<T>&);    \
    template TensorPtr<T> classifier_head<T>(const TensorPtr<T>&, const TensorPtr<T>&,        \
                                             const TensorPtr<T>&);

MMUNET_INSTANTIATE_MIXER(float)
MMUNET_INSTANTIATE_MIXER(double)

}  // namespace mmunet::mixer
