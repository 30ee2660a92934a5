#include "mmunet/mmlp.hpp"

#include <cmath>
#include <string>

#include "mmunet/errors.hpp"
#include "mmunet/ops.hpp"

namespace mmunet::mmlp {
namespace {

void validate_group(const GroupSpec& g, index_t map_size, const std::string& where) {
    if (g.channels < 1 || g.patch_size < 1 || g.block_count < 1) {
        throw ConfigError(where + ": channels, patch_size and block_count must be positive");
    }
    if (map_size % g.patch_size != 0) {
        throw ConfigError(where + ": patch size " + std::to_string(g.patch_size) +
                          " does not divide map size " + std::to_string(map_size));
    }
    const index_t grid = map_size / g.patch_size;
    if (g.block_count > grid || grid % g.block_count != 0) {
        throw ConfigError(where + ": block count " + std::to_string(g.block_count) +
                          " does not divide patch grid " + std::to_string(grid));
    }
}

}  // namespace

template <class T>
LTMParams<T> alloc_ltm(index_t lanes, index_t tokens_per_block, index_t hidden,
                       bool requires_grad) {
    LTMParams<T> p;
    p.gamma = Tensor<T>::full({lanes}, T(1), requires_grad);
    p.delta = Tensor<T>::create({lanes}, requires_grad);
    p.w3 = Tensor<T>::create({tokens_per_block, hidden}, requires_grad);
    p.b3 = Tensor<T>::create({hidden}, requires_grad);
    p.w4 = Tensor<T>::create({hidden, tokens_per_block}, requires_grad);
    p.b4 = Tensor<T>::create({tokens_per_block}, requires_grad);
    return p;
}

index_t tokens_per_block(const GroupSpec& g, index_t map_size) {
    validate_group(g, map_size, "group");
    const index_t per_side = map_size / g.patch_size / g.block_count;
    return per_side * per_side;
}

index_t ltm_param_count(const GroupSpec& g, index_t map_size, double ratio) {
    const index_t t = tokens_per_block(g, map_size);
    const auto hidden = static_cast<index_t>(std::llround(ratio * static_cast<double>(t)));
    if (hidden < 1 || std::abs(ratio * static_cast<double>(t) - static_cast<double>(hidden)) >
                          1e-9) {
        throw ConfigError("ltm hidden width " + std::to_string(ratio) + " * " +
                          std::to_string(t) + " is not a positive integer");
    }
    const index_t d = g.channels * g.patch_size * g.patch_size;
    return 2 * d + t * hidden + hidden + hidden * t + t;
}

template <class T>
TensorPtr<T> patchify(const TensorPtr<T>& g, index_t s) {
    if (g->ndim() != 4 || g->dim(2) != g->dim(3)) {
        throw ConfigError("patchify expects a square [B x C x R x R] map, got " +
                          shape_str(g->shape));
    }
    return ops::extract_patches(g, s);
}

template <class T>
TensorPtr<T> unpatchify(const TensorPtr<T>& tokens, index_t channels, index_t map_size,
                        index_t s) {
    return ops::merge_patches(tokens, channels, map_size, map_size, s);
}

template <class T>
TensorPtr<T> ltm(const TensorPtr<T>& tokens, const GroupSpec& spec, const LTMParams<T>& p) {
    if (tokens->ndim() != 3) {
        throw ShapeError("ltm expects [batch x tokens x lanes], got " +
                         shape_str(tokens->shape));
    }
    const index_t b = tokens->dim(0);
    const index_t ntok = tokens->dim(1);
    const index_t d = tokens->dim(2);
    const auto grid = static_cast<index_t>(std::llround(std::sqrt(static_cast<double>(ntok))));
    if (grid * grid != ntok) {
        throw ShapeError("ltm token count " + std::to_string(ntok) + " is not a square grid");
    }
    const index_t n = spec.block_count;
    if (n < 1 || grid % n != 0) {
        throw ConfigError("ltm block count " + std::to_string(n) + " does not divide grid " +
                          std::to_string(grid));
    }
    const index_t side = grid / n;     // tokens per window side
    const index_t t = side * side;     // tokens per window

    // Window-major enumeration: windows row-major, tokens row-major inside.
    std::vector<index_t> perm(static_cast<std::size_t>(ntok));
    std::vector<index_t> inv(static_cast<std::size_t>(ntok));
    index_t k = 0;
    for (index_t by = 0; by < n; ++by) {
        for (index_t bx = 0; bx < n; ++bx) {
            for (index_t ty = 0; ty < side; ++ty) {
                for (index_t tx = 0; tx < side; ++tx) {
                    const index_t src = (by * side + ty) * grid + bx * side + tx;
                    perm[static_cast<std::size_t>(k)] = src;
                    inv[static_cast<std::size_t>(src)] = k;
                    ++k;
                }
            }
        }
    }

    auto h = ops::gather_tokens(tokens, perm);
    h = ops::reshape(h, {b * n * n, t, d});
    auto u = h;
    h = ops::layernorm(h, p.gamma, p.delta);
    h = ops::transpose_last2(h);  // [B*n^2 x d x T]
    h = ops::linear(h, p.w3, p.b3);
    h = ops::gelu(h);
    h = ops::linear(h, p.w4, p.b4);
    h = ops::transpose_last2(h);
    h = ops::add(u, h);
    h = ops::reshape(h, {b, ntok, d});
    return ops::gather_tokens(h, inv);
}

template <class T>
TensorPtr<T> mmlp_block(const TensorPtr<T>& x, const MMLPConfig<T>& config) {
    if (x->ndim() != 4 || x->dim(2) != x->dim(3)) {
        throw ConfigError("mmlp_block expects a square [B x C x R x R] map, got " +
                          shape_str(x->shape));
    }
    if (config.groups.empty() || config.groups.size() != config.params.size()) {
        throw ConfigError("mmlp_block needs matching group and parameter lists");
    }
    const index_t c = x->dim(1);
    const index_t r = x->dim(2);
    index_t total = 0;
    for (std::size_t i = 0; i < config.groups.size(); ++i) {
        validate_group(config.groups[i], r, "mmlp_block group " + std::to_string(i));
        total += config.groups[i].channels;
    }
    if (total != c) {
        throw ConfigError("mmlp_block group channels sum to " + std::to_string(total) +
                          " but input has " + std::to_string(c));
    }

    std::vector<index_t> boundaries;
    index_t acc = 0;
    for (std::size_t i = 0; i + 1 < config.groups.size(); ++i) {
        acc += config.groups[i].channels;
        boundaries.push_back(acc);
    }
    auto parts = config.groups.size() == 1 ? std::vector<TensorPtr<T>>{x}
                                           : ops::split_channels(x, boundaries);

    std::vector<TensorPtr<T>> mixed;
    for (std::size_t i = 0; i < config.groups.size(); ++i) {
        const GroupSpec& g = config.groups[i];
        auto tok = patchify(parts[i], g.patch_size);
        auto y = ltm(tok, g, config.params[i]);
        mixed.push_back(unpatchify(y, g.channels, r, g.patch_size));
    }
    return mixed.size() == 1 ? mixed[0] : ops::concat_channels(mixed);
}

#define MMUNET_INSTANTIATE_MMLP(T)                                                          \
    template LTMParams<T> alloc_ltm<T>(index_t, index_t, index_t, bool);                    \
    template TensorPtr<T> patchify<T>(const TensorPtr<T>&, index_t);                        \
    template TensorPtr<T> unpatchify<T>(const TensorPtr<T>&, index_t, index_t, index_t);    \
    template TensorPtr<T> ltm<T>(const TensorPtr<T>&, const GroupSpec&, const LTMParams<T>&); \
    template TensorPtr<T> mmlp_block<T>(const TensorPtr<T>&, const MMLPConfig<T>&);

MMUNET_INSTANTIATE_MMLP(float)
MMUNET_INSTANTIATE_MMLP(double)

}  // namespace mmunet::mmlp
