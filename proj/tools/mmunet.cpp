// Command-line front end: dataset generation, training, evaluation,
// prediction, parameter accounting and the gradient-check suite.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mmunet/data_io.hpp"
#include "mmunet/errors.hpp"
#include "mmunet/gradcheck.hpp"
#include "mmunet/models.hpp"
#include "mmunet/run_config.hpp"
#include "mmunet/tensor.hpp"
#include "mmunet/training.hpp"

namespace fs = std::filesystem;
using namespace mmunet;

namespace {

int run_gen_data(const std::string& out_dir, index_t count, index_t size,
                 std::uint64_t seed, double noise_sigma) {
    data::PhantomSpec spec;
    spec.count = count;
    spec.size = size;
    spec.seed = seed;
    spec.noise_sigma = noise_sigma;
    const auto samples = data::gen_phantom<float>(spec);
    data::write_dataset(out_dir, samples, spec);
    std::printf("wrote %lld sample pairs to %s\n", static_cast<long long>(count),
                out_dir.c_str());
    return 0;
}

int run_train(const std::string& data_dir, const std::string& out_dir,
              const std::string& config_path) {
    runcfg::RunConfig cfg = config_path.empty() ? runcfg::default_config()
                                                : runcfg::parse_config_file(config_path);
    index_t num_classes = 0;
    auto samples = data::read_dataset<float>(data_dir, &num_classes);
    if (samples.empty()) {
        throw DataError("dataset '" + data_dir + "' holds no sample pairs");
    }
    // The dataset on disk decides the geometry; the config keeps the rest.
    cfg.model.num_classes = num_classes;
    cfg.model.input_size = samples[0].image->dim(1);
    cfg.train.input_size = cfg.model.input_size;
    cfg.phantom.size = cfg.model.input_size;
    cfg.phantom.num_classes = num_classes;
    cfg.phantom.count = static_cast<index_t>(samples.size());

    const auto splits = data::split(samples, cfg.train.seed);
    auto model = models::build<float>(cfg.model, cfg.train.seed);
    const auto result = training::train(model, splits.train, splits.val, cfg.train,
                                        [](const std::string& line) {
                                            std::cout << line << std::endl;
                                        });

    fs::create_directories(out_dir);
    data::save_checkpoint(model, (fs::path(out_dir) / "checkpoint.bin").string());
    {
        std::ofstream log_file(fs::path(out_dir) / "log.txt");
        for (const auto& line : result.log) {
            log_file << line << '\n';
        }
        if (!log_file) {
            throw IoError("cannot write log in '" + out_dir + "'");
        }
    }
    {
        std::ofstream cfg_file(fs::path(out_dir) / "config.txt");
        cfg_file << runcfg::dump_config(cfg);
        if (!cfg_file) {
            throw IoError("cannot write config echo in '" + out_dir + "'");
        }
    }
    return 0;
}

void print_metrics(const training::Metrics& m) {
    std::printf("acc=%.6f miou=%.6f iou=[", m.accuracy, m.miou);
    for (std::size_t i = 0; i < m.per_class_iou.size(); ++i) {
        std::printf(i ? ", %.6f" : "%.6f", m.per_class_iou[i]);
    }
    std::printf("]\n");
}

int run_eval(const std::string& checkpoint, const std::string& data_dir,
             index_t batch_size) {
    const auto model = data::load_checkpoint<float>(checkpoint);
    const auto ds = data::read_dataset<float>(data_dir);
    print_metrics(training::evaluate(model, ds, batch_size));
    return 0;
}

int run_predict(const std::string& checkpoint, const std::string& image_path,
                const std::string& out_path) {
    const auto model = data::load_checkpoint<float>(checkpoint);
    const auto image = data::read_image<float>(image_path);
    const index_t h = image->dim(1);
    const index_t w = image->dim(2);

    auto batch = Tensor<float>::create({1, 3, h, w});
    batch->data = image->data;
    NoGradGuard quiet;
    const auto logits = models::forward(model, batch);
    const index_t k = logits->dim(1);

    auto mask = Tensor<float>::create({h, w});
    for (index_t y = 0; y < h; ++y) {
        for (index_t x = 0; x < w; ++x) {
            index_t best = 0;
            float best_v = logits->data[(0 * k + 0) * h * w + y * w + x];
            for (index_t c = 1; c < k; ++c) {
                const float v = logits->data[c * h * w + y * w + x];
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            mask->data[y * w + x] = static_cast<float>(best);
        }
    }
    data::write_mask(mask, out_path);
    std::printf("wrote %s\n", out_path.c_str());
    return 0;
}

int run_count_params(const std::string& variant, index_t base_width, index_t input_size,
                     index_t num_classes, double ltm_expansion) {
    models::ModelSpec spec;
    spec.variant = models::parse_variant(variant);
    spec.base_width = base_width;
    spec.input_size = input_size;
    spec.num_classes = num_classes;
    spec.ltm_expansion = ltm_expansion;
    const auto report = models::count_params(spec);
    for (const auto& [name, count] : report.breakdown) {
        std::printf("%s=%lld\n", name.c_str(), static_cast<long long>(count));
    }
    const index_t base = report.total - report.mixing_overhead;
    const double ratio =
        base > 0 ? static_cast<double>(report.mixing_overhead) / static_cast<double>(base)
                 : 0.0;
    std::printf("total=%lld overhead=%.6f\n", static_cast<long long>(report.total), ratio);
    return 0;
}

int run_grad_check(std::uint64_t seed, const std::string& only) {
    const auto results = gradcheck::run_suite(seed, only);
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("op=%s max_rel_err=%.3e threshold=%.0e %s\n", r.name.c_str(),
                    r.max_rel_err, r.threshold, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    return all_pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"nested-ellipse segmentation workbench"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset directory");
    std::string gen_out;
    index_t gen_count = 0;
    index_t gen_size = 64;
    std::uint64_t gen_seed = 1;
    double gen_sigma = 0.05;
    gen->add_option("--out", gen_out, "output directory")->required();
    gen->add_option("--count", gen_count, "number of samples")->required();
    gen->add_option("--size", gen_size, "square image size")->capture_default_str();
    gen->add_option("--seed", gen_seed, "generator seed")->capture_default_str();
    gen->add_option("--noise-sigma", gen_sigma, "intensity noise sigma")
        ->capture_default_str();

    auto* tr = app.add_subcommand("train", "train on a dataset directory");
    std::string tr_data, tr_out, tr_config;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--out", tr_out, "run output directory")->required();
    tr->add_option("--config", tr_config, "key=value config file");

    auto* ev = app.add_subcommand("eval", "report metrics on a dataset directory");
    std::string ev_ckpt, ev_data;
    index_t ev_batch = 16;
    ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--batch-size", ev_batch, "evaluation batch size")
        ->capture_default_str();

    auto* pr = app.add_subcommand("predict", "segment one image");
    std::string pr_ckpt, pr_image, pr_out;
    pr->add_option("--checkpoint", pr_ckpt, "checkpoint file")->required();
    pr->add_option("--image", pr_image, "input image (PPM)")->required();
    pr->add_option("--out", pr_out, "output mask (PGM)")->required();

    auto* cp = app.add_subcommand("count-params", "print the parameter budget");
    std::string cp_variant = "mm-unet";
    index_t cp_width = 64;
    index_t cp_size = 256;
    index_t cp_classes = 4;
    double cp_expansion = 1.0;
    cp->add_option("--variant", cp_variant, "unet | mm-unet | mm-unet-global")
        ->capture_default_str();
    cp->add_option("--base-width", cp_width, "first-level channel count")
        ->capture_default_str();
    cp->add_option("--input-size", cp_size, "square input size")->capture_default_str();
    cp->add_option("--num-classes", cp_classes, "output classes")->capture_default_str();
    cp->add_option("--ltm-expansion", cp_expansion, "token-mixing hidden ratio")
        ->capture_default_str();

    auto* gc = app.add_subcommand("grad-check", "finite-difference gradient suite");
    std::uint64_t gc_seed = 7;
    std::string gc_only;
    gc->add_option("--seed", gc_seed, "suite seed")->capture_default_str();
    gc->add_option("--op", gc_only, "run a single named check");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            return run_gen_data(gen_out, gen_count, gen_size, gen_seed, gen_sigma);
        }
        if (tr->parsed()) {
            return run_train(tr_data, tr_out, tr_config);
        }
        if (ev->parsed()) {
            return run_eval(ev_ckpt, ev_data, ev_batch);
        }
        if (pr->parsed()) {
            return run_predict(pr_ckpt, pr_image, pr_out);
        }
        if (cp->parsed()) {
            return run_count_params(cp_variant, cp_width, cp_size, cp_classes,
                                    cp_expansion);
        }
        if (gc->parsed()) {
            return run_grad_check(gc_seed, gc_only);
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const FormatError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 5;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 6;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 7;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
