#include <cmath>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "mmunet/errors.hpp"
#include "mmunet/kernels.hpp"
#include "mmunet/mmlp.hpp"
#include "mmunet/models.hpp"
#include "mmunet/ops.hpp"
#include "mmunet/rng.hpp"
#include "mmunet/tensor.hpp"

using namespace mmunet;

namespace {

template <class T>
TensorPtr<T> random_input(std::vector<index_t> shape, std::uint64_t seed) {
    auto eng = rng::engine(rng::substream(seed, "model-input"));
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    auto t = Tensor<T>::create(std::move(shape));
    for (auto& v : t->data) {
        v = static_cast<T>(dist(eng));
    }
    return t;
}

template <class T>
const TensorPtr<T>& by_name(const models::Model<T>& m, const std::string& name) {
    for (const auto& [n, t] : m.manifest) {
        if (n == name) {
            return t;
        }
    }
    throw std::runtime_error("missing " + name);
}

}  // namespace

TEST_CASE("variant names parse and print") {
    CHECK(models::variant_name(models::Variant::unet) == "unet");
    CHECK(models::variant_name(models::Variant::mm_unet) == "mm-unet");
    CHECK(models::variant_name(models::Variant::mm_unet_global) == "mm-unet-global");
    CHECK(models::parse_variant("mm_unet") == models::Variant::mm_unet);
    CHECK(models::parse_variant("mm-unet-global") == models::Variant::mm_unet_global);
    CHECK_THROWS_AS(models::parse_variant("resnet"), ConfigError);
}

TEST_CASE("level geometry of the default configuration") {
    models::ModelSpec spec;  // mm-unet, width 64, input 256
    const auto levels = models::level_geometry(spec);
    REQUIRE(levels.size() == 5);

    const index_t want_channels[5] = {64, 128, 256, 512, 1024};
    const index_t want_size[5] = {256, 128, 64, 32, 16};
    const index_t want_n[5][3] = {
        {32, 16, 8}, {16, 8, 4}, {8, 4, 2}, {8, 4, 2}, {4, 2, 1}};
    for (int l = 0; l < 5; ++l) {
        CHECK(levels[l].channels == want_channels[l]);
        CHECK(levels[l].map_size == want_size[l]);
        REQUIRE(levels[l].groups.size() == 3);
        CHECK(levels[l].groups[0].channels == want_channels[l] / 2);
        CHECK(levels[l].groups[1].channels == want_channels[l] / 4);
        CHECK(levels[l].groups[2].channels == want_channels[l] / 4);
        for (int g = 0; g < 3; ++g) {
            CHECK(levels[l].groups[g].patch_size == 4);
            CHECK(levels[l].groups[g].block_count == want_n[l][g]);
            const index_t grid = levels[l].map_size / 4;
            CHECK(grid % levels[l].groups[g].block_count == 0);
        }
    }
}

TEST_CASE("baseline has no groups, global variant has single windows") {
    models::ModelSpec spec;
    spec.variant = models::Variant::unet;
    for (const auto& lv : models::level_geometry(spec)) {
        CHECK(lv.groups.empty());
    }
    spec.variant = models::Variant::mm_unet_global;
    for (const auto& lv : models::level_geometry(spec)) {
        for (const auto& g : lv.groups) {
            CHECK(g.block_count == 1);
        }
    }
}

TEST_CASE("model spec validation") {
    models::ModelSpec spec;
    spec.input_size = 100;  // not a multiple of 16
    CHECK_THROWS_AS(models::level_geometry(spec), ConfigError);
    spec.input_size = 8;
    CHECK_THROWS_AS(models::level_geometry(spec), ConfigError);
    spec = {};
    spec.base_width = 6;  // groups of c/2, c/4, c/4 need a multiple of 4
    CHECK_THROWS_AS(models::level_geometry(spec), ConfigError);
    spec.variant = models::Variant::unet;
    CHECK_NOTHROW(models::level_geometry(spec));
    spec = {};
    spec.num_classes = 0;
    CHECK_THROWS_AS(models::level_geometry(spec), ConfigError);
}

TEST_CASE("parameter layout names are unique and counts add up") {
    models::ModelSpec spec;
    spec.base_width = 16;
    spec.input_size = 64;
    const auto layout = models::param_layout(spec);
    std::set<std::string> names;
    index_t total = 0;
    for (const auto& d : layout) {
        CHECK(names.insert(d.name).second);
        index_t n = 1;
        for (index_t e : d.shape) {
            n *= e;
        }
        total += n;
        if (d.init == models::Init::he_uniform) {
            CHECK(d.fan_in > 0);
        }
    }
    CHECK(models::count_params(spec).total == total);
}

TEST_CASE("mixing parameters account for the whole variant gap") {
    for (index_t width : {16, 64}) {
        for (index_t size : {64, 256}) {
            models::ModelSpec mm;
            mm.base_width = width;
            mm.input_size = size;
            models::ModelSpec un = mm;
            un.variant = models::Variant::unet;

            index_t formula = 0;
            for (const auto& lv : models::level_geometry(mm)) {
                for (const auto& g : lv.groups) {
                    formula += mmlp::ltm_param_count(g, lv.map_size, mm.ltm_expansion);
                }
            }
            const auto mm_report = models::count_params(mm);
            const auto un_report = models::count_params(un);
            CHECK(mm_report.total - un_report.total == formula);
            CHECK(mm_report.mixing_overhead == formula);
            CHECK(un_report.mixing_overhead == 0);
        }
    }
}

TEST_CASE("parameter counts order baseline, windowed, global") {
    models::ModelSpec spec;
    const index_t mm = models::count_params(spec).total;
    spec.variant = models::Variant::unet;
    const index_t un = models::count_params(spec).total;
    spec.variant = models::Variant::mm_unet_global;
    const index_t gl = models::count_params(spec).total;
    CHECK(un < mm);
    CHECK(mm < gl);
    // the windowed schedule stays cheap next to the convolutional trunk
    CHECK(static_cast<double>(mm - un) / static_cast<double>(un) < 0.025);
}

TEST_CASE("build fills the manifest per the layout, deterministically") {
    models::ModelSpec spec;
    spec.base_width = 8;
    spec.input_size = 32;
    const auto layout = models::param_layout(spec);
    auto m1 = models::build<float>(spec, 9);
    auto m2 = models::build<float>(spec, 9);
    auto m3 = models::build<float>(spec, 10);

    REQUIRE(m1.manifest.size() == layout.size());
    for (std::size_t i = 0; i < layout.size(); ++i) {
        CHECK(m1.manifest[i].first == layout[i].name);
        CHECK(m1.manifest[i].second->shape == layout[i].shape);
        CHECK(m1.manifest[i].second->data == m2.manifest[i].second->data);
        CHECK(m1.manifest[i].second->requires_grad);
        switch (layout[i].init) {
            case models::Init::zeros:
                for (float v : m1.manifest[i].second->data) {
                    CHECK(v == 0.0f);
                }
                break;
            case models::Init::ones:
                for (float v : m1.manifest[i].second->data) {
                    CHECK(v == 1.0f);
                }
                break;
            case models::Init::he_uniform: {
                const float bound =
                    std::sqrt(6.0f / static_cast<float>(layout[i].fan_in));
                bool nonconstant = false;
                for (float v : m1.manifest[i].second->data) {
                    CHECK(std::fabs(v) <= bound);
                    nonconstant = nonconstant || v != m1.manifest[i].second->data[0];
                }
                if (m1.manifest[i].second->numel() > 4) {
                    CHECK(nonconstant);
                }
                break;
            }
        }
    }
    CHECK(by_name(m1, "enc1/conv1/weight")->data != by_name(m3, "enc1/conv1/weight")->data);
    // structured accessors alias the manifest tensors
    CHECK(m1.enc[0].conv1.weight.get() == by_name(m1, "enc1/conv1/weight").get());
    CHECK(m1.head.bias.get() == by_name(m1, "head/bias").get());
}

TEST_CASE("forward maps image batches to class logit maps") {
    models::ModelSpec spec;
    spec.base_width = 8;
    spec.input_size = 32;
    auto m = models::build<float>(spec, 123);
    auto x = random_input<float>({2, 3, 32, 32}, 77);
    NoGradGuard quiet;
    auto y = models::forward(m, x);
    CHECK(y->shape == std::vector<index_t>{2, 4, 32, 32});
    for (float v : y->data) {
        CHECK(std::isfinite(v));
    }
    auto zero = Tensor<float>::create({1, 3, 32, 32});
    for (float v : models::forward(m, zero)->data) {
        CHECK(std::isfinite(v));
    }
    CHECK_THROWS_AS(models::forward(m, Tensor<float>::create({1, 1, 32, 32})), ShapeError);
    CHECK_THROWS_AS(models::forward(m, Tensor<float>::create({1, 3, 16, 16})), ShapeError);
}

TEST_CASE("forward is reproducible and thread-count independent") {
    models::ModelSpec spec;
    spec.base_width = 8;
    spec.input_size = 32;
    auto m = models::build<float>(spec, 5);
    auto x = random_input<float>({2, 3, 32, 32}, 6);
    NoGradGuard quiet;
    kernels::set_parallel(false);
    auto serial = models::forward(m, x);
    kernels::set_parallel(true);
    auto parallel = models::forward(m, x);
    CHECK(serial->data == parallel->data);
    CHECK(models::forward(m, x)->data == parallel->data);
}

TEST_CASE("zeroed mixing blocks reduce to the plain baseline") {
    models::ModelSpec mm;
    mm.base_width = 16;
    mm.input_size = 64;
    models::ModelSpec un = mm;
    un.variant = models::Variant::unet;

    auto m_mm = models::build<float>(mm, 31);
    auto m_un = models::build<float>(un, 32);
    // share the convolutional weights, silence the mixing blocks
    for (auto& [name, t] : m_mm.manifest) {
        if (name.find("/mmlp/") != std::string::npos) {
            std::fill(t->data.begin(), t->data.end(), 0.0f);
        } else {
            t->data = by_name(m_un, name)->data;
        }
    }
    auto x = random_input<float>({2, 3, 64, 64}, 8);
    NoGradGuard quiet;
    CHECK(models::forward(m_mm, x)->data == models::forward(m_un, x)->data);
}

TEST_CASE("analytic gradients through a mid-level mixing weight") {
    models::ModelSpec spec;
    spec.base_width = 8;
    spec.input_size = 32;
    auto m = models::build<double>(spec, 55);
    auto x = random_input<double>({1, 3, 32, 32}, 56);

    auto target = by_name(m, "enc3/mmlp/group0/w3");
    auto weights = random_input<double>({1, 4, 32, 32}, 57);
    auto loss_of = [&]() {
        return ops::sum(ops::mul(models::forward(m, x), weights));
    };

    for (auto& [name, t] : m.manifest) {
        t->zero_grad();
    }
    backward(loss_of());
    REQUIRE(target->grad.size() == target->data.size());

    auto eng = rng::engine(rng::substream(58, "fd-pick"));
    const double h = 1e-5;
    NoGradGuard quiet;
    for (int pick = 0; pick < 5; ++pick) {
        const auto i = static_cast<std::size_t>(eng() % target->data.size());
        const double saved = target->data[i];
        target->data[i] = saved + h;
        const double up = loss_of()->item();
        target->data[i] = saved - h;
        const double down = loss_of()->item();
        target->data[i] = saved;
        const double numeric = (up - down) / (2 * h);
        const double analytic = target->grad[i];
        const double rel = std::fabs(analytic - numeric) /
                           std::max({std::fabs(analytic), std::fabs(numeric), 1e-6});
        CHECK(rel < 1e-3);
    }
}
