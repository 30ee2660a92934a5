// Acceptance suite: one line per criterion, exit code = number of failures.
// Criterion 9 trains the full desk-scale model twice, so this binary takes
// tens of minutes; everything else finishes in seconds.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "mmunet/data_io.hpp"
#include "mmunet/errors.hpp"
#include "mmunet/gradcheck.hpp"
#include "mmunet/mixer.hpp"
#include "mmunet/mmlp.hpp"
#include "mmunet/models.hpp"
#include "mmunet/ops.hpp"
#include "mmunet/rng.hpp"
#include "mmunet/tensor.hpp"
#include "mmunet/training.hpp"

using namespace mmunet;

namespace {

// ---- desk-scale training recipe (criterion 9) -----------------------------

constexpr index_t kRunEpochs = 30;
constexpr double kRunBaseLr = 0.009;
constexpr double kRunMomentum = 0.9;
constexpr index_t kRunDropStart = 26;
constexpr index_t kRunDropEvery = 2;
constexpr double kRunDropFactor = 5.0;
constexpr std::uint64_t kRunSeed = 1;

// ---- harness --------------------------------------------------------------

int g_failures = 0;

void report(int criterion, bool pass, const std::string& detail) {
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", criterion,
                detail.c_str());
    std::fflush(stdout);
    if (!pass) {
        ++g_failures;
    }
}

void run(int criterion, const std::function<std::pair<bool, std::string>()>& body) {
    try {
        const auto [pass, detail] = body();
        report(criterion, pass, detail);
    } catch (const std::exception& e) {
        report(criterion, false, std::string("threw: ") + e.what());
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

long peak_rss_mib() {
    std::ifstream f("/proc/self/status");
    std::string line;
    while (std::getline(f, line)) {
        if (line.rfind("VmHWM:", 0) == 0) {
            long kb = 0;
            std::sscanf(line.c_str(), "VmHWM: %ld", &kb);
            return kb / 1024;
        }
    }
    return -1;
}

TensorPtr<double> random_tensor(const std::vector<index_t>& shape, std::mt19937_64& eng,
                                double lo = -1.0, double hi = 1.0) {
    auto t = Tensor<double>::create(shape);
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t->data) {
        v = d(eng);
    }
    return t;
}

void fill_random(const TensorPtr<double>& t, std::mt19937_64& eng, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    for (auto& v : t->data) {
        v = d(eng);
    }
}

std::string fmt(const char* format, ...) {
    char buf[512];
    va_list args;
    va_start(args, format);
    std::vsnprintf(buf, sizeof(buf), format, args);
    va_end(args);
    return buf;
}

// ---- criterion bodies -----------------------------------------------------

std::pair<bool, std::string> c1_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst = 0.0;
    int checks = 0, failed = 0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        for (const auto& r : gradcheck::run_suite(seed)) {
            worst = std::max(worst, r.max_rel_err);
            ++checks;
            failed += !r.pass;
        }
    }
    const double dt = seconds_since(t0);
    const bool pass = failed == 0 && dt < 120.0;
    return {pass, fmt("finite-difference gradients: %d checks over 5 seeds, %d failed, "
                      "worst rel err %.2e, %.2f s",
                      checks, failed, worst, dt)};
}

std::pair<bool, std::string> c2_single_window_equivalence() {
    auto eng = rng::engine(rng::substream(1002, "acc-global"));
    bool all = true;
    for (index_t grid : {2, 4, 8}) {
        const index_t d = 10;
        const index_t t = grid * grid;
        auto tokens = random_tensor({2, t, d}, eng);
        auto p = mmlp::alloc_ltm<double>(d, t, t, false);
        fill_random(p.gamma, eng, 0.5, 1.5);
        fill_random(p.delta, eng, -0.2, 0.2);
        fill_random(p.w3, eng, -0.3, 0.3);
        fill_random(p.b3, eng, -0.3, 0.3);
        fill_random(p.w4, eng, -0.3, 0.3);
        fill_random(p.b4, eng, -0.3, 0.3);
        auto windowed = mmlp::ltm(tokens, {1, 1, 1}, p);

        mixer::MixerLayerParams<double> m;
        m.ln2_gamma = p.gamma;
        m.ln2_delta = p.delta;
        m.w3 = p.w3;
        m.b3 = p.b3;
        m.w4 = p.w4;
        m.b4 = p.b4;
        auto global = mixer::token_mix(tokens, m);
        all = all && windowed->data == global->data;
    }
    return {all, "single-window mixing is bit-identical to global token mixing on "
                 "grids 2, 4, 8 with shared weights"};
}

std::pair<bool, std::string> c3_locality() {
    auto eng = rng::engine(rng::substream(1003, "acc-local"));
    bool all = true;
    long perturbations = 0;
    for (index_t grid : {4, 8}) {
        for (index_t n : {index_t{2}, index_t{4}}) {
            if (grid % n != 0) {
                continue;
            }
            const index_t side = grid / n;
            const index_t t_per = side * side;
            const index_t d = 5;
            auto tokens = random_tensor({1, grid * grid, d}, eng);
            auto p = mmlp::alloc_ltm<double>(d, t_per, t_per, false);
            fill_random(p.gamma, eng, 0.5, 1.5);
            fill_random(p.delta, eng, -0.2, 0.2);
            fill_random(p.w3, eng, -0.4, 0.4);
            fill_random(p.b3, eng, -0.4, 0.4);
            fill_random(p.w4, eng, -0.4, 0.4);
            fill_random(p.b4, eng, -0.4, 0.4);
            const mmlp::GroupSpec spec{1, 2, n};
            auto base = mmlp::ltm(tokens, spec, p);

            for (index_t ty = 0; ty < grid; ++ty) {
                for (index_t tx = 0; tx < grid; ++tx) {
                    auto bumped = Tensor<double>::create(tokens->shape);
                    bumped->data = tokens->data;
                    bumped->data[(ty * grid + tx) * d] += 1.0;
                    auto out = mmlp::ltm(bumped, spec, p);
                    ++perturbations;
                    const index_t hot = (ty / side) * n + tx / side;
                    for (index_t qy = 0; qy < grid; ++qy) {
                        for (index_t qx = 0; qx < grid; ++qx) {
                            if ((qy / side) * n + qx / side == hot) {
                                continue;
                            }
                            for (index_t j = 0; j < d; ++j) {
                                all = all && out->data[(qy * grid + qx) * d + j] ==
                                                 base->data[(qy * grid + qx) * d + j];
                            }
                        }
                    }
                }
            }
        }
    }
    return {all, fmt("windowed mixing leaves out-of-window tokens bit-unchanged under "
                     "%ld single-token perturbations (n in {2,4}, grids 4 and 8)",
                     perturbations)};
}

std::pair<bool, std::string> c4_level_schedule() {
    models::ModelSpec spec;  // defaults: windowed variant, width 64, input 256
    const auto levels = models::level_geometry(spec);
    bool ok = levels.size() == 5;

    const index_t want_channels[5] = {64, 128, 256, 512, 1024};
    const index_t want_sizes[5] = {256, 128, 64, 32, 16};
    const index_t want_windows[5][3] = {
        {32, 16, 8}, {16, 8, 4}, {8, 4, 2}, {8, 4, 2}, {4, 2, 1}};

    for (int l = 0; ok && l < 5; ++l) {
        const auto& lv = levels[static_cast<std::size_t>(l)];
        ok = ok && lv.channels == want_channels[l] && lv.map_size == want_sizes[l];
        ok = ok && lv.groups.size() == 3;
        const index_t c = lv.channels;
        const index_t want_group_c[3] = {c / 2, c / 4, c / 4};
        index_t sum = 0;
        for (int g = 0; ok && g < 3; ++g) {
            const auto& gs = lv.groups[static_cast<std::size_t>(g)];
            ok = ok && gs.channels == want_group_c[g];
            ok = ok && gs.patch_size == 4;
            ok = ok && gs.block_count == want_windows[l][g];
            // divisibility: patches tile the map, windows tile the patch grid
            ok = ok && lv.map_size % gs.patch_size == 0;
            const index_t grid = lv.map_size / gs.patch_size;
            ok = ok && grid % gs.block_count == 0;
            sum += gs.channels;
        }
        ok = ok && sum == c;
    }
    return {ok, "default layer schedule at input 256: channels 64..1024, halved maps, "
                "groups [c/2, c/4, c/4], patch size 4, window counts "
                "{32,16,8}/{16,8,4}/{8,4,2}/{8,4,2}/{4,2,1}, all divisibility "
                "constraints hold"};
}

std::pair<bool, std::string> c5_param_accounting() {
    models::ModelSpec mm;  // default windowed variant
    models::ModelSpec un = mm;
    un.variant = models::Variant::unet;
    models::ModelSpec gl = mm;
    gl.variant = models::Variant::mm_unet_global;

    const auto rm = models::count_params(mm);
    const auto ru = models::count_params(un);
    const auto rg = models::count_params(gl);

    index_t closed_form = 0;
    for (const auto& lv : models::level_geometry(mm)) {
        for (const auto& g : lv.groups) {
            closed_form += mmlp::ltm_param_count(g, lv.map_size, mm.ltm_expansion);
        }
    }

    const bool gap_exact = rm.total - ru.total == closed_form &&
                           rm.mixing_overhead == closed_form;
    const double overhead = static_cast<double>(rm.mixing_overhead) /
                            static_cast<double>(rm.total - rm.mixing_overhead);
    const bool small_overhead = overhead < 0.025;
    const bool ordering = rg.total > rm.total && rm.total > ru.total;

    return {gap_exact && small_overhead && ordering,
            fmt("parameter budget: windowed %lld = plain %lld + closed-form %lld "
                "(gap exact: %s), mixing overhead %.4f%% < 2.5%%, whole-grid variant "
                "%lld largest",
                static_cast<long long>(rm.total), static_cast<long long>(ru.total),
                static_cast<long long>(closed_form), gap_exact ? "yes" : "no",
                overhead * 100.0, static_cast<long long>(rg.total))};
}

std::pair<bool, std::string> c6_zero_weight_reduction() {
    models::ModelSpec mm;
    mm.base_width = 16;
    mm.input_size = 64;
    models::ModelSpec un = mm;
    un.variant = models::Variant::unet;

    auto m_mm = models::build<float>(mm, 2024);
    auto m_un = models::build<float>(un, 1);
    // same conv/head weights on both; mixing weights zeroed out
    for (auto& [name, t] : m_mm.manifest) {
        if (name.find("/mmlp/") != std::string::npos) {
            std::fill(t->data.begin(), t->data.end(), 0.0f);
        }
    }
    for (auto& [name, t] : m_un.manifest) {
        for (auto& [mname, mt] : m_mm.manifest) {
            if (mname == name) {
                t->data = mt->data;
            }
        }
    }

    auto eng = rng::engine(rng::substream(1006, "acc-zero"));
    auto x = Tensor<float>::create({2, 3, 64, 64});
    std::uniform_real_distribution<double> d(0.0, 1.0);
    for (auto& v : x->data) {
        v = static_cast<float>(d(eng));
    }
    NoGradGuard quiet;
    auto y_mm = models::forward(m_mm, x);
    auto y_un = models::forward(m_un, x);
    const bool same = y_mm->data == y_un->data;
    return {same, "zeroed mixing weights reduce the windowed model to the plain "
                  "baseline bit-for-bit on random input (width 16, input 64)"};
}

std::pair<bool, std::string> c7_metric_oracle() {
    auto eng = rng::engine(rng::substream(1007, "acc-metrics"));
    bool all = true;
    for (int round = 0; round < 200; ++round) {
        const int k = 2 + static_cast<int>(eng() % 4);
        const int h = 1 + static_cast<int>(eng() % 8);
        const int w = 1 + static_cast<int>(eng() % 8);
        std::vector<int> pred(static_cast<std::size_t>(h * w));
        std::vector<int> gt(static_cast<std::size_t>(h * w));
        training::ConfusionMatrix cm(k);
        for (auto i = 0u; i < pred.size(); ++i) {
            pred[i] = static_cast<int>(eng() % static_cast<std::uint64_t>(k));
            gt[i] = static_cast<int>(eng() % static_cast<std::uint64_t>(k));
            cm.add(pred[i], gt[i]);
        }
        const auto got = training::metrics_from(cm);

        // brute force from set definitions
        std::size_t correct = 0;
        for (auto i = 0u; i < pred.size(); ++i) {
            correct += pred[i] == gt[i];
        }
        double iou_sum = 0.0;
        int used = 0;
        std::vector<double> ious;
        for (int c = 0; c < k; ++c) {
            std::int64_t inter = 0, uni = 0;
            for (auto i = 0u; i < pred.size(); ++i) {
                inter += pred[i] == c && gt[i] == c;
                uni += pred[i] == c || gt[i] == c;
            }
            if (uni == 0) {
                continue;
            }
            ious.push_back(static_cast<double>(inter) / static_cast<double>(uni));
            iou_sum += ious.back();
            ++used;
        }
        all = all && got.accuracy == static_cast<double>(correct) /
                                         static_cast<double>(pred.size());
        all = all && got.per_class_iou == ious;
        all = all && got.miou == (used ? iou_sum / used : 0.0);
    }

    training::ConfusionMatrix hand(2);
    hand.add(0, 0);
    hand.add(1, 0);
    hand.add(1, 1);
    hand.add(1, 1);
    const auto hm = training::metrics_from(hand);
    const bool hand_ok = hm.per_class_iou.size() == 2 &&
                         hm.per_class_iou[0] == 0.5 &&
                         std::abs(hm.per_class_iou[1] - 2.0 / 3.0) < 1e-15 &&
                         std::abs(hm.miou - 7.0 / 12.0) < 1e-15;
    all = all && hand_ok;
    return {all, "metrics equal brute-force set computations on 200 random mask pairs "
                 "(up to 8x8, up to 5 classes); hand case IoU (1/2, 2/3), mean 7/12"};
}

std::pair<bool, std::string> c8_schedule() {
    training::TrainConfig cfg;  // defaults: 0.015 base, drop /10 every 10 after 100
    cfg.epochs = 150;
    bool ok = true;
    for (index_t e = 1; e <= 100; ++e) {
        ok = ok && training::lr_at(e, cfg) == 0.015;
    }
    for (index_t e = 101; e <= 110; ++e) {
        ok = ok && std::abs(training::lr_at(e, cfg) - 0.0015) < 1e-15;
    }
    for (index_t e = 111; e <= 120; ++e) {
        ok = ok && std::abs(training::lr_at(e, cfg) - 0.00015) < 1e-16;
    }
    return {ok, "stair schedule: 0.015 through epoch 100, 0.0015 for 101-110, "
                "0.00015 for 111-120"};
}

// nearest-intensity per-pixel classifier, scored with its own counting code
double threshold_oracle_miou(const std::vector<data::Sample<float>>& ds) {
    const double centers[4] = {0.1, 0.9, 0.45, 0.7};
    std::int64_t inter[4] = {0, 0, 0, 0};
    std::int64_t pred_n[4] = {0, 0, 0, 0};
    std::int64_t gt_n[4] = {0, 0, 0, 0};
    for (const auto& s : ds) {
        const index_t hw = s.mask->dim(0) * s.mask->dim(1);
        for (index_t p = 0; p < hw; ++p) {
            const double v = static_cast<double>(s.image->data[p]);  // grey channels
            int best = 0;
            double bd = std::abs(v - centers[0]);
            for (int c = 1; c < 4; ++c) {
                const double dc = std::abs(v - centers[c]);
                if (dc < bd) {
                    bd = dc;
                    best = c;
                }
            }
            const int actual = static_cast<int>(s.mask->data[p]);
            inter[best] += best == actual;
            ++pred_n[best];
            ++gt_n[actual];
        }
    }
    double sum = 0.0;
    int used = 0;
    for (int c = 0; c < 4; ++c) {
        const std::int64_t uni = pred_n[c] + gt_n[c] - inter[c];
        if (uni == 0) {
            continue;
        }
        sum += static_cast<double>(inter[c]) / static_cast<double>(uni);
        ++used;
    }
    return used ? sum / used : 0.0;
}

std::optional<models::Model<float>> g_trained;  // shared with criterion 10

std::pair<bool, std::string> c9_end_to_end() {
    data::PhantomSpec pspec;
    pspec.count = 500;
    pspec.size = 64;
    pspec.seed = 1;
    const auto samples = data::gen_phantom<float>(pspec);
    const std::vector<data::Sample<float>> train_set(samples.begin(),
                                                     samples.begin() + 400);
    const std::vector<data::Sample<float>> val_set(samples.begin() + 400, samples.end());

    const double oracle = threshold_oracle_miou(val_set);

    models::ModelSpec mspec;
    mspec.base_width = 16;
    mspec.input_size = 64;
    training::TrainConfig tcfg;
    tcfg.epochs = kRunEpochs;
    tcfg.batch_size = 16;
    tcfg.base_lr = kRunBaseLr;
    tcfg.momentum = kRunMomentum;
    tcfg.lr_drop_start = kRunDropStart;
    tcfg.lr_drop_every = kRunDropEvery;
    tcfg.lr_drop_factor = kRunDropFactor;
    tcfg.seed = kRunSeed;
    tcfg.input_size = 64;

    const auto t0 = std::chrono::steady_clock::now();
    auto model = models::build<float>(mspec, kRunSeed);
    const auto first = training::train(model, train_set, val_set, tcfg);
    const double train_s = seconds_since(t0);

    auto again = models::build<float>(mspec, kRunSeed);
    const auto second = training::train(again, train_set, val_set, tcfg);
    const bool reproduced = first.log == second.log;

    const long rss = peak_rss_mib();
    const bool miou_ok = first.final_miou >= 0.85 && first.final_miou > oracle;
    const bool mem_ok = rss > 0 && rss < 2048;
    const bool pass = miou_ok && reproduced && mem_ok;
    g_trained = std::move(model);
    return {pass,
            fmt("desk-scale training (400/100 at 64 px, width 16, batch 16, %lld "
                "epochs): final val mIoU %.4f (floor 0.85, threshold oracle %.4f), "
                "rerun log %s, %.1f min, peak rss %ld MiB",
                static_cast<long long>(kRunEpochs), first.final_miou, oracle,
                reproduced ? "byte-identical" : "DIVERGED", train_s / 60.0, rss)};
}

std::pair<bool, std::string> c10_serialization() {
    const std::string dir = "acceptance_artifacts";
    std::filesystem::create_directories(dir);

    // checkpoint: the trained model when criterion 9 produced one
    models::Model<float>* m = nullptr;
    models::Model<float> fallback;
    if (g_trained) {
        m = &*g_trained;
    } else {
        models::ModelSpec spec;
        spec.base_width = 8;
        spec.input_size = 16;
        fallback = models::build<float>(spec, 5);
        m = &fallback;
    }
    const std::string ckpt = dir + "/model.bin";
    data::save_checkpoint(*m, ckpt);
    const auto loaded = data::load_checkpoint<float>(ckpt);
    bool ckpt_ok = loaded.manifest.size() == m->manifest.size();
    for (std::size_t i = 0; ckpt_ok && i < m->manifest.size(); ++i) {
        ckpt_ok = loaded.manifest[i].first == m->manifest[i].first &&
                  loaded.manifest[i].second->data == m->manifest[i].second->data;
    }

    data::PhantomSpec pspec;
    pspec.count = 2;
    pspec.size = 32;
    pspec.seed = 10;
    const auto ds = data::gen_phantom<float>(pspec);
    data::write_image(ds[0].image, dir + "/img.ppm");
    const auto img = data::read_image<float>(dir + "/img.ppm");
    bool img_ok = img->shape == ds[0].image->shape;
    for (std::size_t i = 0; img_ok && i < img->data.size(); ++i) {
        img_ok = std::abs(img->data[i] - ds[0].image->data[i]) <= 0.5f / 255.0f + 1e-6f;
    }
    // a second pass through the quantised image is byte-stable
    data::write_image(img, dir + "/img2.ppm");
    const auto img2 = data::read_image<float>(dir + "/img2.ppm");
    img_ok = img_ok && img2->data == img->data;

    data::write_mask(ds[0].mask, dir + "/msk.pgm");
    const auto msk = data::read_mask<float>(dir + "/msk.pgm");
    const bool msk_ok = msk->data == ds[0].mask->data;

    std::error_code ec;
    std::filesystem::remove_all(dir, ec);
    return {ckpt_ok && img_ok && msk_ok,
            fmt("serialization: checkpoint round trip bit-exact (%zu tensors%s), image "
                "within half a grey step and stable, mask exact",
                m->manifest.size(), g_trained ? ", trained weights" : "")};
}

}  // namespace

int main() {
    run(1, c1_gradients);
    run(2, c2_single_window_equivalence);
    run(3, c3_locality);
    run(4, c4_level_schedule);
    run(5, c5_param_accounting);
    run(6, c6_zero_weight_reduction);
    run(7, c7_metric_oracle);
    run(8, c8_schedule);
    run(9, c9_end_to_end);
    run(10, c10_serialization);
    std::printf("%d of 10 criteria passed\n", 10 - g_failures);
    return g_failures;
}
