#include "mmunet/models.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <stdexcept>

#include "mmunet/errors.hpp"
#include "mmunet/ops.hpp"
#include "mmunet/rng.hpp"

namespace mmunet::models {
namespace {

constexpr index_t kPatchSize = 4;
constexpr index_t kWindowSchedule[kLevels][3] = {
    {32, 16, 8}, {16, 8, 4}, {8, 4, 2}, {8, 4, 2}, {4, 2, 1},
};

index_t mixing_hidden(index_t tokens, double ratio) {
    const auto hidden = static_cast<index_t>(std::llround(ratio * static_cast<double>(tokens)));
    if (hidden < 1 ||
        std::abs(ratio * static_cast<double>(tokens) - static_cast<double>(hidden)) > 1e-9) {
        throw ConfigError("ltm_expansion " + std::to_string(ratio) + " times " +
                          std::to_string(tokens) + " tokens is not a positive integer");
    }
    return hidden;
}

std::string level_name(const char* side, int level) {
    return std::string(side) + std::to_string(level);
}

void conv_descs(std::vector<ParamDesc>& out, const std::string& prefix, index_t in_c,
                index_t out_c, index_t k) {
    out.push_back({prefix + "/weight", {out_c, in_c, k, k}, Init::he_uniform, in_c * k * k,
                   false});
    out.push_back({prefix + "/bias", {out_c}, Init::zeros, 0, false});
}

}  // namespace

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::unet: return "unet";
        case Variant::mm_unet: return "mm-unet";
        case Variant::mm_unet_global: return "mm-unet-global";
    }
    throw UsageError("unknown variant value");
}

Variant parse_variant(const std::string& name) {
    std::string s = name;
    std::replace(s.begin(), s.end(), '_', '-');
    if (s == "unet") {
        return Variant::unet;
    }
    if (s == "mm-unet") {
        return Variant::mm_unet;
    }
    if (s == "mm-unet-global") {
        return Variant::mm_unet_global;
    }
    throw ConfigError("unknown variant '" + name +
                      "' (expected unet, mm-unet or mm-unet-global)");
}

std::vector<LevelGeometry> level_geometry(const ModelSpec& spec) {
    if (spec.base_width < 1) {
        throw ConfigError("base_width must be positive");
    }
    if (spec.num_classes < 1) {
        throw ConfigError("num_classes must be positive");
    }
    if (spec.input_size < 16 || spec.input_size % 16 != 0) {
        throw ConfigError("input_size must be a positive multiple of 16, got " +
                          std::to_string(spec.input_size));
    }
    const bool mixed = spec.variant != Variant::unet;
    if (mixed && spec.base_width % 4 != 0) {
        throw ConfigError("base_width must be a multiple of 4 for mixing variants, got " +
                          std::to_string(spec.base_width));
    }
    std::vector<LevelGeometry> levels(kLevels);
    for (int l = 0; l < kLevels; ++l) {
        LevelGeometry& lv = levels[static_cast<std::size_t>(l)];
        lv.channels = spec.base_width << l;
        lv.map_size = spec.input_size >> l;
        if (!mixed) {
            continue;
        }
        const index_t parts[3] = {lv.channels / 2, lv.channels / 4, lv.channels / 4};
        const index_t s = std::min(kPatchSize, lv.map_size);
        if (lv.map_size % s != 0) {
            throw ConfigError("level " + std::to_string(l + 1) + ": patch size " +
                              std::to_string(s) + " does not divide map size " +
                              std::to_string(lv.map_size));
        }
        const index_t grid = lv.map_size / s;
        for (int gi = 0; gi < 3; ++gi) {
            index_t n = spec.variant == Variant::mm_unet_global
                            ? 1
                            : std::min(kWindowSchedule[l][gi], grid);
            if (grid % n != 0) {
                throw ConfigError("level " + std::to_string(l + 1) + " group " +
                                  std::to_string(gi) + ": window count " + std::to_string(n) +
                                  " does not divide grid " + std::to_string(grid));
            }
            lv.groups.push_back({parts[gi], s, n});
        }
    }
    return levels;
}

std::vector<ParamDesc> param_layout(const ModelSpec& spec) {
    const auto levels = level_geometry(spec);
    std::vector<ParamDesc> out;
    for (int l = 0; l < kLevels; ++l) {
        const LevelGeometry& lv = levels[static_cast<std::size_t>(l)];
        const index_t in_c = l == 0 ? 3 : levels[static_cast<std::size_t>(l - 1)].channels;
        const std::string base = level_name("enc", l + 1);
        conv_descs(out, base + "/conv1", in_c, lv.channels, 3);
        conv_descs(out, base + "/conv2", lv.channels, lv.channels, 3);
        for (std::size_t gi = 0; gi < lv.groups.size(); ++gi) {
            const mmlp::GroupSpec& g = lv.groups[gi];
            const index_t d = g.channels * g.patch_size * g.patch_size;
            const index_t t = mmlp::tokens_per_block(g, lv.map_size);
            const index_t hidden = mixing_hidden(t, spec.ltm_expansion);
            const std::string gp = base + "/mmlp/group" + std::to_string(gi);
            out.push_back({gp + "/gamma", {d}, Init::ones, 0, true});
            out.push_back({gp + "/delta", {d}, Init::zeros, 0, true});
            out.push_back({gp + "/w3", {t, hidden}, Init::he_uniform, t, true});
            out.push_back({gp + "/b3", {hidden}, Init::zeros, 0, true});
            out.push_back({gp + "/w4", {hidden, t}, Init::he_uniform, hidden, true});
            out.push_back({gp + "/b4", {t}, Init::zeros, 0, true});
        }
    }
    for (int l = kLevels - 2; l >= 0; --l) {
        const LevelGeometry& lv = levels[static_cast<std::size_t>(l)];
        const index_t below = levels[static_cast<std::size_t>(l + 1)].channels;
        const std::string base = level_name("dec", l + 1);
        conv_descs(out, base + "/conv1", below + lv.channels, lv.channels, 3);
        conv_descs(out, base + "/conv2", lv.channels, lv.channels, 3);
    }
    conv_descs(out, "head", levels[0].channels, spec.num_classes, 1);
    return out;
}

ParamReport count_params(const ModelSpec& spec) {
    ParamReport report;
    std::vector<std::string> order;
    std::map<std::string, index_t> sums;
    for (const ParamDesc& d : param_layout(spec)) {
        const index_t n = shape_numel(d.shape);
        report.total += n;
        if (d.mixing) {
            report.mixing_overhead += n;
        }
        const auto first = d.name.find('/');
        std::string key = d.name.substr(0, first);
        if (d.name.compare(first + 1, 5, "mmlp/") == 0) {
            key += "/mmlp";
        }
        if (sums.find(key) == sums.end()) {
            order.push_back(key);
        }
        sums[key] += n;
    }
    for (const std::string& key : order) {
        report.breakdown.emplace_back(key, sums[key]);
    }
    return report;
}

namespace {

template <class T>
TensorPtr<T> find_param(const Model<T>& m, const std::string& name) {
    for (const auto& [n, t] : m.manifest) {
        if (n == name) {
            return t;
        }
    }
    throw UsageError("parameter '" + name + "' missing from manifest");
}

}  // namespace

template <class T>
Model<T> build(const ModelSpec& spec, std::uint64_t seed) {
    const auto levels = level_geometry(spec);
    Model<T> m;
    m.spec = spec;

    auto rng = rng::engine(rng::substream(seed, "model-init"));
    for (const ParamDesc& d : param_layout(spec)) {
        auto t = Tensor<T>::create(d.shape, /*requires_grad=*/true);
        switch (d.init) {
            case Init::zeros:
                break;
            case Init::ones:
                std::fill(t->data.begin(), t->data.end(), T(1));
                break;
            case Init::he_uniform: {
                const double bound = std::sqrt(6.0 / static_cast<double>(d.fan_in));
                std::uniform_real_distribution<double> dist(-bound, bound);
                for (T& v : t->data) {
                    v = static_cast<T>(dist(rng));
                }
                break;
            }
        }
        m.manifest.emplace_back(d.name, std::move(t));
    }

    for (int l = 0; l < kLevels; ++l) {
        const std::string base = level_name("enc", l + 1);
        LevelParams<T> lp;
        lp.conv1 = {find_param(m, base + "/conv1/weight"), find_param(m, base + "/conv1/bias")};
        lp.conv2 = {find_param(m, base + "/conv2/weight"), find_param(m, base + "/conv2/bias")};
        const LevelGeometry& lv = levels[static_cast<std::size_t>(l)];
        for (std::size_t gi = 0; gi < lv.groups.size(); ++gi) {
            const std::string gp = base + "/mmlp/group" + std::to_string(gi);
            mmlp::LTMParams<T> p;
            p.gamma = find_param(m, gp + "/gamma");
            p.delta = find_param(m, gp + "/delta");
            p.w3 = find_param(m, gp + "/w3");
            p.b3 = find_param(m, gp + "/b3");
            p.w4 = find_param(m, gp + "/w4");
            p.b4 = find_param(m, gp + "/b4");
            lp.mixer.groups.push_back(lv.groups[gi]);
            lp.mixer.params.push_back(std::move(p));
        }
        m.enc.push_back(std::move(lp));
    }
    for (int l = kLevels - 2; l >= 0; --l) {
        const std::string base = level_name("dec", l + 1);
        LevelParams<T> lp;
        lp.conv1 = {find_param(m, base + "/conv1/weight"), find_param(m, base + "/conv1/bias")};
        lp.conv2 = {find_param(m, base + "/conv2/weight"), find_param(m, base + "/conv2/bias")};
        m.dec.push_back(std::move(lp));
    }
    m.head = {find_param(m, "head/weight"), find_param(m, "head/bias")};
    return m;
}

template <class T>
TensorPtr<T> forward(const Model<T>& m, const TensorPtr<T>& batch) {
    if (batch->ndim() != 4 || batch->dim(1) != 3 || batch->dim(2) != m.spec.input_size ||
        batch->dim(3) != m.spec.input_size) {
        throw ShapeError("forward expects [B x 3 x " + std::to_string(m.spec.input_size) +
                         " x " + std::to_string(m.spec.input_size) + "], got " +
                         shape_str(batch->shape));
    }
    std::vector<TensorPtr<T>> skips;
    auto h = batch;
    for (int l = 0; l < kLevels; ++l) {
        const LevelParams<T>& lp = m.enc[static_cast<std::size_t>(l)];
        h = ops::relu(ops::conv2d(h, lp.conv1.weight, lp.conv1.bias, 1, 1));
        h = ops::relu(ops::conv2d(h, lp.conv2.weight, lp.conv2.bias, 1, 1));
        if (!lp.mixer.groups.empty()) {
            h = mmlp::mmlp_block(h, lp.mixer);
        }
        if (l + 1 < kLevels) {
            skips.push_back(h);
            h = ops::maxpool2(h);
        }
    }
    for (std::size_t i = 0; i < m.dec.size(); ++i) {
        const LevelParams<T>& lp = m.dec[i];
        h = ops::upsample_bilinear2(h);
        h = ops::concat_channels<T>({h, skips[skips.size() - 1 - i]});
        h = ops::relu(ops::conv2d(h, lp.conv1.weight, lp.conv1.bias, 1, 1));
        h = ops::relu(ops::conv2d(h, lp.conv2.weight, lp.conv2.bias, 1, 1));
    }
    return ops::conv2d(h, m.head.weight, m.head.bias, 1, 0);
}

template Model<float> build<float>(const ModelSpec&, std::uint64_t);
template Model<double> build<double>(const ModelSpec&, std::uint64_t);
template TensorPtr<float> forward<float>(const Model<float>&, const TensorPtr<float>&);
template TensorPtr<double> forward<double>(const Model<double>&, const TensorPtr<double>&);

}  // namespace mmunet::models
