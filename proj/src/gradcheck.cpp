#include "mmunet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "mmunet/errors.hpp"
#include "mmunet/mixer.hpp"
#include "mmunet/mmlp.hpp"
#include "mmunet/ops.hpp"
#include "mmunet/rng.hpp"

namespace mmunet::gradcheck {
namespace {

using D = double;
using TP = TensorPtr<D>;

TP randt(std::vector<index_t> shape, std::mt19937_64& eng, bool requires_grad = true) {
    auto t = Tensor<D>::create(std::move(shape), requires_grad);
    std::normal_distribution<D> dist(0.0, 1.0);
    for (D& v : t->data) {
        v = dist(eng);
    }
    return t;
}

// Loss = sum(y * w) with a fixed random weighting, so every output element
// carries an independent coefficient and no gradient cancels structurally.
std::function<TP()> weighted(std::function<TP()> value, std::mt19937_64& eng,
                             const std::vector<index_t>& shape) {
    auto w = randt(shape, eng, /*requires_grad=*/false);
    return [value = std::move(value), w]() { return ops::sum(ops::mul(value(), w)); };
}

void fill_kink_free(const TP& t) {
    // Quantize to a 0.01 grid, then stagger by index so any two entries in a
    // small neighborhood differ by well over the finite-difference step.
    for (std::size_t i = 0; i < t->data.size(); ++i) {
        t->data[i] = std::round(t->data[i] * 100.0) / 100.0 +
                     static_cast<double>(i % 97) * 1e-4;
    }
}

void push_away_from_zero(const TP& t, double margin) {
    for (D& v : t->data) {
        v += v >= 0.0 ? margin : -margin;
    }
}

mixer::MixerLayerParams<D> random_mixer_params(index_t channels, index_t tokens,
                                               std::mt19937_64& eng) {
    auto p = mixer::alloc_mixer_layer<D>(channels, tokens, channels, tokens, true);
    std::normal_distribution<D> dist(0.0, 0.5);
    for (auto& t : {p.ln1_gamma, p.ln1_delta, p.w1, p.b1, p.w2, p.b2, p.ln2_gamma,
                    p.ln2_delta, p.w3, p.b3, p.w4, p.b4}) {
        for (D& v : t->data) {
            v = dist(eng);
        }
    }
    return p;
}

mmlp::LTMParams<D> random_ltm_params(index_t lanes, index_t tokens, std::mt19937_64& eng) {
    auto p = mmlp::alloc_ltm<D>(lanes, tokens, tokens, true);
    std::normal_distribution<D> dist(0.0, 0.5);
    for (auto& t : {p.gamma, p.delta, p.w3, p.b3, p.w4, p.b4}) {
        for (D& v : t->data) {
            v = dist(eng);
        }
    }
    return p;
}

}  // namespace

double max_rel_error(const Check& check, double step, index_t max_elems_per_leaf,
                     std::uint64_t sample_seed) {
    auto loss = check.loss();
    backward(loss);
    std::vector<std::vector<D>> analytic;
    for (const auto& leaf : check.leaves) {
        if (leaf->grad.size() == leaf->data.size()) {
            analytic.push_back(leaf->grad);
        } else {
            analytic.emplace_back(leaf->data.size(), 0.0);  // leaf unused by the loss
        }
    }

    auto eng = rng::engine(sample_seed);
    double worst = 0.0;
    NoGradGuard guard;
    for (std::size_t li = 0; li < check.leaves.size(); ++li) {
        const auto& leaf = check.leaves[li];
        const index_t n = leaf->numel();
        std::vector<index_t> picks;
        if (n <= max_elems_per_leaf) {
            picks.resize(static_cast<std::size_t>(n));
            std::iota(picks.begin(), picks.end(), index_t{0});
        } else {
            for (index_t i = 0; i < max_elems_per_leaf; ++i) {
                picks.push_back(static_cast<index_t>(eng() % static_cast<std::uint64_t>(n)));
            }
        }
        for (index_t idx : picks) {
            auto& slot = leaf->data[static_cast<std::size_t>(idx)];
            const D saved = slot;
            slot = saved + step;
            const D up = check.loss()->item();
            slot = saved - step;
            const D down = check.loss()->item();
            slot = saved;
            const D numeric = (up - down) / (2.0 * step);
            const D a = analytic[li][static_cast<std::size_t>(idx)];
            const D denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
            worst = std::max(worst, std::abs(a - numeric) / denom);
        }
    }
    return worst;
}

std::vector<Result> run_suite(std::uint64_t seed, const std::string& only_name) {
    std::vector<Check> checks;
    const auto make_eng = [&](const char* name) {
        return rng::engine(rng::substream(seed, name));
    };

    {
        auto eng = make_eng("add");
        auto a = randt({3, 4}, eng), b = randt({3, 4}, eng);
        checks.push_back({"add", 1e-4, {a, b},
                          weighted([a, b] { return ops::add(a, b); }, eng, {3, 4})});
    }
    {
        auto eng = make_eng("mul");
        auto a = randt({3, 4}, eng), b = randt({3, 4}, eng);
        checks.push_back({"mul", 1e-4, {a, b},
                          weighted([a, b] { return ops::mul(a, b); }, eng, {3, 4})});
    }
    {
        auto eng = make_eng("scale");
        auto a = randt({3, 4}, eng);
        checks.push_back({"scale", 1e-4, {a},
                          weighted([a] { return ops::scale(a, 1.7); }, eng, {3, 4})});
    }
    {
        auto eng = make_eng("sum");
        auto a = randt({4, 5}, eng);
        checks.push_back({"sum", 1e-4, {a}, [a] { return ops::sum(a); }});
    }
    {
        auto eng = make_eng("matmul");
        auto a = randt({4, 3}, eng), b = randt({3, 5}, eng);
        checks.push_back({"matmul", 1e-4, {a, b},
                          weighted([a, b] { return ops::matmul(a, b); }, eng, {4, 5})});
    }
    {
        auto eng = make_eng("linear");
        auto x = randt({2, 3, 4}, eng), w = randt({4, 5}, eng), b = randt({5}, eng);
        checks.push_back({"linear", 1e-4, {x, w, b},
                          weighted([x, w, b] { return ops::linear(x, w, b); }, eng, {2, 3, 5})});
    }
    {
        auto eng = make_eng("conv2d");
        auto x = randt({2, 3, 6, 6}, eng), w = randt({4, 3, 3, 3}, eng), b = randt({4}, eng);
        checks.push_back({"conv2d", 1e-4, {x, w, b},
                          weighted([x, w, b] { return ops::conv2d(x, w, b, 1, 1); }, eng,
                                   {2, 4, 6, 6})});
    }
    {
        auto eng = make_eng("conv2d_strided");
        auto x = randt({1, 2, 8, 8}, eng), w = randt({3, 2, 2, 2}, eng), b = randt({3}, eng);
        checks.push_back({"conv2d_strided", 1e-4, {x, w, b},
                          weighted([x, w, b] { return ops::conv2d(x, w, b, 2, 0); }, eng,
                                   {1, 3, 4, 4})});
    }
    {
        auto eng = make_eng("maxpool2");
        auto x = randt({2, 3, 6, 6}, eng);
        fill_kink_free(x);
        checks.push_back({"maxpool2", 1e-4, {x},
                          weighted([x] { return ops::maxpool2(x); }, eng, {2, 3, 3, 3})});
    }
    {
        auto eng = make_eng("upsample_bilinear2");
        auto x = randt({2, 2, 4, 4}, eng);
        checks.push_back({"upsample_bilinear2", 1e-4, {x},
                          weighted([x] { return ops::upsample_bilinear2(x); }, eng,
                                   {2, 2, 8, 8})});
    }
    {
        auto eng = make_eng("layernorm");
        auto x = randt({3, 5, 8}, eng), g = randt({8}, eng), d = randt({8}, eng);
        checks.push_back({"layernorm", 1e-4, {x, g, d},
                          weighted([x, g, d] { return ops::layernorm(x, g, d); }, eng,
                                   {3, 5, 8})});
    }
    {
        auto eng = make_eng("gelu");
        auto x = randt({3, 4}, eng);
        checks.push_back({"gelu", 1e-4, {x},
                          weighted([x] { return ops::gelu(x); }, eng, {3, 4})});
    }
    {
        auto eng = make_eng("relu");
        auto x = randt({3, 4}, eng);
        push_away_from_zero(x, 0.05);
        checks.push_back({"relu", 1e-4, {x},
                          weighted([x] { return ops::relu(x); }, eng, {3, 4})});
    }
    {
        auto eng = make_eng("softmax_ce");
        auto logits = randt({2, 4, 3, 3}, eng);
        auto target = Tensor<D>::create({2, 3, 3});
        for (D& v : target->data) {
            v = static_cast<D>(eng() % 4);
        }
        checks.push_back({"softmax_ce", 1e-4, {logits},
                          [logits, target] { return ops::softmax_ce(logits, target); }});
    }
    {
        auto eng = make_eng("split_concat");
        auto x = randt({2, 6, 4, 4}, eng);
        checks.push_back({"split_concat", 1e-4, {x},
                          weighted(
                              [x] {
                                  auto parts = ops::split_channels(x, {2, 3});
                                  return ops::concat_channels<D>(
                                      {parts[2], parts[0], parts[1]});
                              },
                              eng, {2, 6, 4, 4})});
    }
    {
        auto eng = make_eng("reshape");
        auto x = randt({2, 3, 4}, eng);
        checks.push_back({"reshape", 1e-4, {x},
                          weighted([x] { return ops::reshape(x, {4, 6}); }, eng, {4, 6})});
    }
    {
        auto eng = make_eng("transpose_last2");
        auto x = randt({2, 3, 4}, eng);
        checks.push_back({"transpose_last2", 1e-4, {x},
                          weighted([x] { return ops::transpose_last2(x); }, eng, {2, 4, 3})});
    }
    {
        auto eng = make_eng("gather_tokens");
        auto x = randt({2, 5, 3}, eng);
        const std::vector<index_t> idx = {4, 0, 2, 2, 1};  // includes a repeat
        checks.push_back({"gather_tokens", 1e-4, {x},
                          weighted([x, idx] { return ops::gather_tokens(x, idx); }, eng,
                                   {2, 5, 3})});
    }
    {
        auto eng = make_eng("extract_patches");
        auto x = randt({2, 3, 4, 4}, eng);
        checks.push_back({"extract_patches", 1e-4, {x},
                          weighted([x] { return ops::extract_patches(x, 2); }, eng,
                                   {2, 4, 12})});
    }
    {
        auto eng = make_eng("merge_patches");
        auto x = randt({2, 4, 12}, eng);
        checks.push_back({"merge_patches", 1e-4, {x},
                          weighted([x] { return ops::merge_patches(x, 3, 4, 4, 2); }, eng,
                                   {2, 3, 4, 4})});
    }
    {
        auto eng = make_eng("mean_tokens");
        auto x = randt({2, 5, 3}, eng);
        checks.push_back({"mean_tokens", 1e-4, {x},
                          weighted([x] { return ops::mean_tokens(x); }, eng, {2, 3})});
    }
    {
        auto eng = make_eng("patch_embed");
        auto p = mixer::alloc_embedding<D>(2, 3, 5, true);
        std::normal_distribution<D> dist(0.0, 0.5);
        for (D& v : p.weight->data) {
            v = dist(eng);
        }
        for (D& v : p.bias->data) {
            v = dist(eng);
        }
        auto img = randt({1, 3, 4, 4}, eng);
        checks.push_back({"patch_embed", 1e-4, {img, p.weight, p.bias},
                          weighted([img, p] { return mixer::patch_embed(img, p); }, eng,
                                   {1, 4, 5})});
    }
    {
        auto eng = make_eng("channel_mix");
        auto p = random_mixer_params(6, 4, eng);
        auto x = randt({2, 4, 6}, eng);
        checks.push_back({"channel_mix", 1e-4,
                          {x, p.ln1_gamma, p.ln1_delta, p.w1, p.b1, p.w2, p.b2},
                          weighted([x, p] { return mixer::channel_mix(x, p); }, eng,
                                   {2, 4, 6})});
    }
    {
        auto eng = make_eng("token_mix");
        auto p = random_mixer_params(6, 4, eng);
        auto x = randt({2, 4, 6}, eng);
        checks.push_back({"token_mix", 1e-4,
                          {x, p.ln2_gamma, p.ln2_delta, p.w3, p.b3, p.w4, p.b4},
                          weighted([x, p] { return mixer::token_mix(x, p); }, eng, {2, 4, 6})});
    }
    {
        auto eng = make_eng("mixer_layer");
        auto p = random_mixer_params(6, 4, eng);
        auto x = randt({2, 4, 6}, eng);
        checks.push_back({"mixer_layer", 1e-4,
                          {x, p.ln1_gamma, p.ln1_delta, p.w1, p.b1, p.w2, p.b2, p.ln2_gamma,
                           p.ln2_delta, p.w3, p.b3, p.w4, p.b4},
                          weighted([x, p] { return mixer::mixer_layer(x, p); }, eng,
                                   {2, 4, 6})});
    }
    {
        auto eng = make_eng("classifier_head");
        auto y = randt({2, 5, 3}, eng), w = randt({3, 4}, eng), b = randt({4}, eng);
        checks.push_back({"classifier_head", 1e-4, {y, w, b},
                          weighted([y, w, b] { return mixer::classifier_head(y, w, b); }, eng,
                                   {2, 4})});
    }
    {
        auto eng = make_eng("ltm");
        const mmlp::GroupSpec spec{2, 2, 2};  // d = 8, grid 4x4, windows of 4 tokens
        auto p = random_ltm_params(8, 4, eng);
        auto x = randt({1, 16, 8}, eng);
        checks.push_back({"ltm", 1e-4, {x, p.gamma, p.delta, p.w3, p.b3, p.w4, p.b4},
                          weighted([x, spec, p] { return mmlp::ltm(x, spec, p); }, eng,
                                   {1, 16, 8})});
    }
    {
        auto eng = make_eng("mmlp_block");
        mmlp::MMLPConfig<D> cfg;
        cfg.groups = {{4, 2, 2}, {2, 2, 1}, {2, 2, 4}};  // grid 4x4; T = 4, 16, 1
        std::vector<TP> leaves;
        auto x = randt({1, 8, 8, 8}, eng);
        leaves.push_back(x);
        for (const auto& g : cfg.groups) {
            const index_t d = g.channels * g.patch_size * g.patch_size;
            const index_t grid = 8 / g.patch_size;
            const index_t side = grid / g.block_count;
            auto p = random_ltm_params(d, side * side, eng);
            for (const auto& t : {p.gamma, p.delta, p.w3, p.b3, p.w4, p.b4}) {
                leaves.push_back(t);
            }
            cfg.params.push_back(std::move(p));
        }
        checks.push_back({"mmlp_block", 1e-3, std::move(leaves),
                          weighted([x, cfg] { return mmlp::mmlp_block(x, cfg); }, eng,
                                   {1, 8, 8, 8})});
    }

    std::vector<Result> results;
    bool matched = false;
    for (const Check& c : checks) {
        if (!only_name.empty() && c.name != only_name) {
            continue;
        }
        matched = true;
        const double err = max_rel_error(c, 1e-5, 64, rng::substream(seed, "fd-sample"));
        results.push_back({c.name, err, c.threshold, err < c.threshold});
    }
    if (!only_name.empty() && !matched) {
        std::string names;
        for (const Check& c : checks) {
            names += names.empty() ? c.name : ", " + c.name;
        }
        throw UsageError("unknown gradient check '" + only_name + "' (have: " + names + ")");
    }
    return results;
}

}  // namespace mmunet::gradcheck
