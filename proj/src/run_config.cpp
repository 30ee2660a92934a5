#include "mmunet/run_config.hpp"

#include <fstream>
#include <sstream>

#include "mmunet/errors.hpp"
#include "mmunet/text.hpp"

namespace mmunet::runcfg {
namespace {

index_t parse_int(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    long long v = 0;
    try {
        v = std::stoll(value, &used);
    } catch (const std::exception&) {
        throw ConfigError("bad integer for key '" + key + "': '" + value + "'");
    }
    if (used != value.size()) {
        throw ConfigError("bad integer for key '" + key + "': '" + value + "'");
    }
    return v;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &used);
    } catch (const std::exception&) {
        throw ConfigError("bad unsigned integer for key '" + key + "': '" + value + "'");
    }
    if (used != value.size()) {
        throw ConfigError("bad unsigned integer for key '" + key + "': '" + value + "'");
    }
    return v;
}

double parse_real(const std::string& key, const std::string& value) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception&) {
        throw ConfigError("bad number for key '" + key + "': '" + value + "'");
    }
    if (used != value.size()) {
        throw ConfigError("bad number for key '" + key + "': '" + value + "'");
    }
    return v;
}

void apply(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "variant") {
        cfg.model.variant = models::parse_variant(value);
    } else if (key == "base_width") {
        cfg.model.base_width = parse_int(key, value);
    } else if (key == "input_size") {
        cfg.model.input_size = parse_int(key, value);
        cfg.train.input_size = cfg.model.input_size;
    } else if (key == "num_classes") {
        cfg.model.num_classes = parse_int(key, value);
        cfg.phantom.num_classes = cfg.model.num_classes;
    } else if (key == "ltm_expansion") {
        cfg.model.ltm_expansion = parse_real(key, value);
    } else if (key == "epochs") {
        cfg.train.epochs = parse_int(key, value);
    } else if (key == "batch_size") {
        cfg.train.batch_size = parse_int(key, value);
    } else if (key == "base_lr") {
        cfg.train.base_lr = parse_real(key, value);
    } else if (key == "momentum") {
        cfg.train.momentum = parse_real(key, value);
    } else if (key == "weight_decay") {
        cfg.train.weight_decay = parse_real(key, value);
    } else if (key == "lr_drop_start") {
        cfg.train.lr_drop_start = parse_int(key, value);
    } else if (key == "lr_drop_every") {
        cfg.train.lr_drop_every = parse_int(key, value);
    } else if (key == "lr_drop_factor") {
        cfg.train.lr_drop_factor = parse_real(key, value);
    } else if (key == "seed") {
        cfg.train.seed = parse_u64(key, value);
        cfg.phantom.seed = cfg.train.seed;
    } else if (key == "count") {
        cfg.phantom.count = parse_int(key, value);
    } else if (key == "size") {
        cfg.phantom.size = parse_int(key, value);
    } else if (key == "noise_sigma") {
        cfg.phantom.noise_sigma = parse_real(key, value);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

}  // namespace

RunConfig default_config() {
    return RunConfig{};
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg = default_config();
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = text::trim(line);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(lineno) +
                              " is not key=value: '" + line + "'");
        }
        apply(cfg, text::trim(line.substr(0, eq)), text::trim(line.substr(eq + 1)));
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) {
        throw IoError("cannot open config '" + path + "'");
    }
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_config_text(buf.str());
}

std::string dump_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << "variant=" << models::variant_name(cfg.model.variant) << "\n";
    out << "base_width=" << cfg.model.base_width << "\n";
    out << "input_size=" << cfg.model.input_size << "\n";
    out << "num_classes=" << cfg.model.num_classes << "\n";
    out << "ltm_expansion=" << text::format_double(cfg.model.ltm_expansion) << "\n";
    out << "epochs=" << cfg.train.epochs << "\n";
    out << "batch_size=" << cfg.train.batch_size << "\n";
    out << "base_lr=" << text::format_double(cfg.train.base_lr) << "\n";
    out << "momentum=" << text::format_double(cfg.train.momentum) << "\n";
    out << "weight_decay=" << text::format_double(cfg.train.weight_decay) << "\n";
    out << "lr_drop_start=" << cfg.train.lr_drop_start << "\n";
    out << "lr_drop_every=" << cfg.train.lr_drop_every << "\n";
    out << "lr_drop_factor=" << text::format_double(cfg.train.lr_drop_factor) << "\n";
    out << "seed=" << cfg.train.seed << "\n";
    out << "count=" << cfg.phantom.count << "\n";
    out << "size=" << cfg.phantom.size << "\n";
    out << "noise_sigma=" << text::format_double(cfg.phantom.noise_sigma) << "\n";
    return out.str();
}

}  // namespace mmunet::runcfg
