#include "mmunet/data_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include "mmunet/errors.hpp"
#include "mmunet/rng.hpp"
#include "mmunet/text.hpp"

namespace mmunet::data {
namespace {

namespace fs = std::filesystem;

constexpr double kClassIntensity[4] = {0.1, 0.9, 0.45, 0.7};  // bg, capsule, cortex, nucleus

std::string pad5(index_t i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%05lld", static_cast<long long>(i));
    return buf;
}

// ---- little-endian binary streams ----------------------------------------

class Writer {
public:
    explicit Writer(const std::string& path) : path_(path), f_(path, std::ios::binary) {
        if (!f_) {
            throw IoError("cannot open '" + path + "' for writing");
        }
    }
    void raw(const void* src, std::size_t n) {
        f_.write(static_cast<const char*>(src), static_cast<std::streamsize>(n));
        if (!f_) {
            throw IoError("write failed on '" + path_ + "'");
        }
    }
    void u8(std::uint8_t v) { raw(&v, 1); }
    void u16(std::uint16_t v) { raw(&v, 2); }
    void u32(std::uint32_t v) { raw(&v, 4); }
    void u64(std::uint64_t v) { raw(&v, 8); }

private:
    std::string path_;
    std::ofstream f_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : path_(path), f_(path, std::ios::binary) {
        if (!f_) {
            throw IoError("cannot open '" + path + "' for reading");
        }
    }
    void raw(void* dst, std::size_t n) {
        f_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(f_.gcount()) != n) {
            throw FormatError("'" + path_ + "' truncated at offset " + std::to_string(pos_));
        }
        pos_ += n;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, 1);
        return v;
    }
    std::uint16_t u16() {
        std::uint16_t v;
        raw(&v, 2);
        return v;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        raw(&v, 4);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, 8);
        return v;
    }
    std::uint64_t pos() const { return pos_; }
    bool at_eof() {
        return f_.peek() == std::ifstream::traits_type::eof();
    }

private:
    std::string path_;
    std::ifstream f_;
    std::uint64_t pos_ = 0;
};

template <class T>
constexpr std::uint8_t dtype_tag() {
    return std::is_same_v<T, float> ? 0 : 1;
}

// ---- PPM/PGM helpers ------------------------------------------------------

void write_pnm(const std::string& path, const char* magic, index_t w, index_t h,
               const std::vector<std::uint8_t>& payload) {
    Writer out(path);
    const std::string header = std::string(magic) + " " + std::to_string(w) + " " +
                               std::to_string(h) + " 255\n";
    out.raw(header.data(), header.size());
    out.raw(payload.data(), payload.size());
}

struct PnmFile {
    index_t width = 0, height = 0;
    std::vector<std::uint8_t> payload;
};

PnmFile read_pnm(const std::string& path, const char* magic) {
    std::ifstream f(path, std::ios::binary);
    if (!f) {
        throw IoError("cannot open '" + path + "' for reading");
    }
    std::string m;
    long long w = 0, h = 0, maxval = 0;
    if (!(f >> m >> w >> h >> maxval) || m != magic || w < 1 || h < 1) {
        throw FormatError("'" + path + "' has a malformed " + magic + " header");
    }
    if (maxval != 255) {
        throw FormatError("'" + path + "' maxval " + std::to_string(maxval) +
                          " unsupported (need 255)");
    }
    f.get();  // single whitespace byte separating header and payload
    const std::size_t channels = std::string(magic) == "P6" ? 3 : 1;
    PnmFile out;
    out.width = w;
    out.height = h;
    out.payload.resize(static_cast<std::size_t>(w * h) * channels);
    f.read(reinterpret_cast<char*>(out.payload.data()),
           static_cast<std::streamsize>(out.payload.size()));
    if (static_cast<std::size_t>(f.gcount()) != out.payload.size()) {
        throw FormatError("'" + path + "' payload truncated");
    }
    return out;
}

}  // namespace

template <class T>
std::vector<Sample<T>> gen_phantom(const PhantomSpec& spec) {
    if (spec.count < 0 || spec.size < 8) {
        throw ConfigError("phantom spec needs count >= 0 and size >= 8");
    }
    if (spec.num_classes != 4) {
        throw ConfigError("phantom generator renders exactly 4 classes, got " +
                          std::to_string(spec.num_classes));
    }
    if (spec.noise_sigma < 0.0) {
        throw ConfigError("noise_sigma must be non-negative");
    }
    const index_t s = spec.size;
    const auto size = static_cast<double>(s);
    std::vector<Sample<T>> out;
    out.reserve(static_cast<std::size_t>(spec.count));
    for (index_t i = 0; i < spec.count; ++i) {
        auto eng = rng::engine(rng::substream(spec.seed, "phantom",
                                              static_cast<std::uint64_t>(i)));
        std::uniform_real_distribution<double> jitter(0.4, 0.6);
        std::uniform_real_distribution<double> axis(0.30, 0.45);
        std::uniform_real_distribution<double> angle(-20.0, 20.0);
        std::uniform_real_distribution<double> capsule_t(0.04, 0.08);
        std::uniform_real_distribution<double> cortex_t(0.15, 0.25);
        const double cx = jitter(eng) * size;
        const double cy = jitter(eng) * size;
        const double a0 = axis(eng) * size;
        const double b0 = axis(eng) * size;
        const double theta = angle(eng) * std::numbers::pi / 180.0;
        const double tc = capsule_t(eng);
        const double tx = cortex_t(eng);
        const double a1 = a0 * (1.0 - tc), b1 = b0 * (1.0 - tc);
        const double a2 = a1 * (1.0 - tx), b2 = b1 * (1.0 - tx);
        const double ct = std::cos(theta), st = std::sin(theta);

        Sample<T> smp;
        smp.image = Tensor<T>::create({3, s, s});
        smp.mask = Tensor<T>::create({s, s});
        std::normal_distribution<double> noise(0.0, spec.noise_sigma > 0.0 ? spec.noise_sigma
                                                                           : 1.0);
        for (index_t y = 0; y < s; ++y) {
            for (index_t x = 0; x < s; ++x) {
                const double px = static_cast<double>(x) + 0.5 - cx;
                const double py = static_cast<double>(y) + 0.5 - cy;
                const double u = ct * px + st * py;
                const double v = -st * px + ct * py;
                const auto inside = [&](double a, double b) {
                    return (u / a) * (u / a) + (v / b) * (v / b) <= 1.0;
                };
                int cls = 0;
                if (inside(a2, b2)) {
                    cls = 3;
                } else if (inside(a1, b1)) {
                    cls = 2;
                } else if (inside(a0, b0)) {
                    cls = 1;
                }
                smp.mask->data[static_cast<std::size_t>(y * s + x)] = static_cast<T>(cls);
                const double dn = spec.noise_sigma > 0.0 ? noise(eng) : 0.0;
                const double val = std::clamp(kClassIntensity[cls] + dn, 0.0, 1.0);
                for (index_t c = 0; c < 3; ++c) {
                    smp.image->data[static_cast<std::size_t>((c * s + y) * s + x)] =
                        static_cast<T>(val);
                }
            }
        }
        out.push_back(std::move(smp));
    }
    return out;
}

template <class T>
Splits<T> split(const std::vector<Sample<T>>& samples, std::uint64_t seed) {
    const auto n = static_cast<index_t>(samples.size());
    if (n < 10) {
        throw UsageError("split needs at least 10 samples, got " + std::to_string(n));
    }
    auto eng = rng::engine(rng::substream(seed, "split"));
    const auto order = rng::shuffled_indices(n, eng);
    const index_t n_train = n * 6 / 10;
    const index_t n_val = n * 2 / 10;
    Splits<T> out;
    for (index_t i = 0; i < n; ++i) {
        const Sample<T>& smp = samples[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
        if (i < n_train) {
            out.train.push_back(smp);
        } else if (i < n_train + n_val) {
            out.val.push_back(smp);
        } else {
            out.test.push_back(smp);
        }
    }
    return out;
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'M', 'U', 'N'};
constexpr std::uint32_t kVersion = 1;
const std::string kMetaName = "meta/spec";

template <class T>
void write_tensor(Writer& out, const std::string& name, const std::vector<index_t>& shape,
                  const T* data, index_t numel) {
    out.u16(static_cast<std::uint16_t>(name.size()));
    out.raw(name.data(), name.size());
    out.u8(static_cast<std::uint8_t>(shape.size()));
    for (index_t e : shape) {
        out.u64(static_cast<std::uint64_t>(e));
    }
    out.u8(dtype_tag<T>());
    out.raw(data, static_cast<std::size_t>(numel) * sizeof(T));
}

struct LoadedTensor {
    std::vector<index_t> shape;
    std::uint8_t dtype = 0;
    std::vector<std::uint8_t> payload;
    std::uint64_t offset = 0;  // where the record started
};

std::map<std::string, LoadedTensor> read_all_tensors(Reader& in) {
    char magic[4];
    in.raw(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad checkpoint magic at offset 0");
    }
    const std::uint32_t version = in.u32();
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) +
                          " at offset 4");
    }
    const std::uint32_t count = in.u32();
    std::map<std::string, LoadedTensor> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint64_t start = in.pos();
        const std::uint16_t name_len = in.u16();
        std::string name(name_len, '\0');
        in.raw(name.data(), name_len);
        LoadedTensor t;
        t.offset = start;
        const std::uint8_t ndim = in.u8();
        index_t numel = 1;
        for (std::uint8_t d = 0; d < ndim; ++d) {
            const auto e = static_cast<index_t>(in.u64());
            if (e < 1) {
                throw FormatError("non-positive extent in tensor '" + name + "' at offset " +
                                  std::to_string(start));
            }
            t.shape.push_back(e);
            numel *= e;
        }
        t.dtype = in.u8();
        if (t.dtype > 1) {
            throw FormatError("unknown dtype tag " + std::to_string(t.dtype) +
                              " in tensor '" + name + "' at offset " + std::to_string(start));
        }
        const std::size_t elem = t.dtype == 0 ? 4 : 8;
        t.payload.resize(static_cast<std::size_t>(numel) * elem);
        in.raw(t.payload.data(), t.payload.size());
        if (!out.emplace(name, std::move(t)).second) {
            throw FormatError("duplicate tensor '" + name + "' at offset " +
                              std::to_string(start));
        }
    }
    if (!in.at_eof()) {
        throw FormatError("trailing bytes after tensor table at offset " +
                          std::to_string(in.pos()));
    }
    return out;
}

}  // namespace

template <class T>
void save_checkpoint(const models::Model<T>& m, const std::string& path) {
    Writer out(path);
    out.raw(kMagic, 4);
    out.u32(kVersion);
    out.u32(static_cast<std::uint32_t>(m.manifest.size() + 1));
    const float meta[5] = {static_cast<float>(static_cast<int>(m.spec.variant)),
                           static_cast<float>(m.spec.base_width),
                           static_cast<float>(m.spec.input_size),
                           static_cast<float>(m.spec.num_classes),
                           static_cast<float>(m.spec.ltm_expansion)};
    write_tensor(out, kMetaName, {5}, meta, 5);
    for (const auto& [name, t] : m.manifest) {
        write_tensor(out, name, t->shape, t->data.data(), t->numel());
    }
}

template <class T>
models::Model<T> load_checkpoint(const std::string& path) {
    Reader in(path);
    auto tensors = read_all_tensors(in);

    const auto meta_it = tensors.find(kMetaName);
    if (meta_it == tensors.end()) {
        throw FormatError("checkpoint lacks the '" + kMetaName + "' descriptor");
    }
    const LoadedTensor& meta = meta_it->second;
    if (meta.shape != std::vector<index_t>{5} || meta.dtype != 0) {
        throw FormatError("malformed '" + kMetaName + "' descriptor at offset " +
                          std::to_string(meta.offset));
    }
    float fields[5];
    std::memcpy(fields, meta.payload.data(), sizeof(fields));
    const int variant_id = static_cast<int>(std::llround(fields[0]));
    if (variant_id < 0 || variant_id > 2) {
        throw FormatError("unknown variant id " + std::to_string(variant_id) +
                          " in checkpoint descriptor");
    }
    models::ModelSpec spec;
    spec.variant = static_cast<models::Variant>(variant_id);
    spec.base_width = static_cast<index_t>(std::llround(fields[1]));
    spec.input_size = static_cast<index_t>(std::llround(fields[2]));
    spec.num_classes = static_cast<index_t>(std::llround(fields[3]));
    spec.ltm_expansion = static_cast<double>(fields[4]);

    auto model = models::build<T>(spec, 0);
    if (tensors.size() != model.manifest.size() + 1) {
        throw FormatError("checkpoint holds " + std::to_string(tensors.size() - 1) +
                          " tensors but the model needs " +
                          std::to_string(model.manifest.size()));
    }
    for (auto& [name, t] : model.manifest) {
        const auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw FormatError("checkpoint lacks tensor '" + name + "'");
        }
        const LoadedTensor& lt = it->second;
        if (lt.shape != t->shape) {
            throw FormatError("tensor '" + name + "' has shape " + shape_str(lt.shape) +
                              ", expected " + shape_str(t->shape) + ", at offset " +
                              std::to_string(lt.offset));
        }
        if (lt.dtype != dtype_tag<T>()) {
            throw FormatError("tensor '" + name + "' has dtype tag " +
                              std::to_string(lt.dtype) + ", expected " +
                              std::to_string(dtype_tag<T>()) + ", at offset " +
                              std::to_string(lt.offset));
        }
        std::memcpy(t->data.data(), lt.payload.data(), lt.payload.size());
    }
    return model;
}

// ---- images and masks -----------------------------------------------------

template <class T>
void write_image(const TensorPtr<T>& image, const std::string& path) {
    if (image->ndim() != 3 || image->dim(0) != 3) {
        throw ShapeError("write_image expects [3 x H x W], got " + shape_str(image->shape));
    }
    const index_t h = image->dim(1), w = image->dim(2);
    std::vector<std::uint8_t> payload(static_cast<std::size_t>(3 * h * w));
    const T* px = image->data.data();
    for (index_t y = 0; y < h; ++y) {
        for (index_t x = 0; x < w; ++x) {
            for (index_t c = 0; c < 3; ++c) {
                const double v = static_cast<double>(px[(c * h + y) * w + x]);
                const double scaled = std::clamp(std::round(v * 255.0), 0.0, 255.0);
                payload[static_cast<std::size_t>((y * w + x) * 3 + c)] =
                    static_cast<std::uint8_t>(scaled);
            }
        }
    }
    write_pnm(path, "P6", w, h, payload);
}

template <class T>
TensorPtr<T> read_image(const std::string& path) {
    const PnmFile f = read_pnm(path, "P6");
    auto out = Tensor<T>::create({3, f.height, f.width});
    for (index_t y = 0; y < f.height; ++y) {
        for (index_t x = 0; x < f.width; ++x) {
            for (index_t c = 0; c < 3; ++c) {
                const std::uint8_t byte = f.payload[static_cast<std::size_t>((y * f.width + x) * 3 + c)];
                out->data[static_cast<std::size_t>((c * f.height + y) * f.width + x)] =
                    static_cast<T>(byte) / T(255);
            }
        }
    }
    return out;
}

template <class T>
void write_mask(const TensorPtr<T>& mask, const std::string& path) {
    if (mask->ndim() != 2) {
        throw ShapeError("write_mask expects [H x W], got " + shape_str(mask->shape));
    }
    const index_t h = mask->dim(0), w = mask->dim(1);
    std::vector<std::uint8_t> payload(static_cast<std::size_t>(h * w));
    for (index_t i = 0; i < h * w; ++i) {
        const auto id = std::llround(static_cast<double>(mask->data[static_cast<std::size_t>(i)]));
        if (id < 0 || id > 255) {
            throw DataError("mask id " + std::to_string(id) + " does not fit a byte");
        }
        payload[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(id);
    }
    write_pnm(path, "P5", w, h, payload);
}

template <class T>
TensorPtr<T> read_mask(const std::string& path) {
    const PnmFile f = read_pnm(path, "P5");
    auto out = Tensor<T>::create({f.height, f.width});
    for (std::size_t i = 0; i < f.payload.size(); ++i) {
        out->data[i] = static_cast<T>(f.payload[i]);
    }
    return out;
}

// ---- dataset directories --------------------------------------------------

template <class T>
void write_dataset(const std::string& dir, const std::vector<Sample<T>>& samples,
                   const PhantomSpec& spec) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) {
        throw IoError("cannot create directory '" + dir + "': " + ec.message());
    }
    std::ostringstream manifest;
    manifest << "count=" << samples.size() << "\n";
    manifest << "size=" << spec.size << "\n";
    manifest << "num_classes=" << spec.num_classes << "\n";
    manifest << "seed=" << spec.seed << "\n";
    manifest << "noise_sigma=" << text::format_double(spec.noise_sigma) << "\n";
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string img = "img_" + pad5(static_cast<index_t>(i)) + ".ppm";
        const std::string msk = "msk_" + pad5(static_cast<index_t>(i)) + ".pgm";
        write_image(samples[i].image, (fs::path(dir) / img).string());
        write_mask(samples[i].mask, (fs::path(dir) / msk).string());
        manifest << img << " " << msk << "\n";
    }
    std::ofstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) {
        throw IoError("cannot write manifest in '" + dir + "'");
    }
    mf << manifest.str();
    if (!mf.flush()) {
        throw IoError("write failed on manifest in '" + dir + "'");
    }
}

template <class T>
std::vector<Sample<T>> read_dataset(const std::string& dir, index_t* num_classes_out) {
    std::ifstream mf(fs::path(dir) / "manifest.txt");
    if (!mf) {
        throw IoError("cannot open manifest in '" + dir + "'");
    }
    index_t num_classes = 4;
    std::vector<std::pair<std::string, std::string>> pairs;
    std::string line;
    while (std::getline(mf, line)) {
        line = text::trim(line);
        if (line.empty() || line[0] == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq != std::string::npos && line.find(' ') == std::string::npos) {
            if (line.compare(0, eq, "num_classes") == 0) {
                try {
                    num_classes = std::stoll(line.substr(eq + 1));
                } catch (const std::exception&) {
                    throw FormatError("bad num_classes value in manifest of '" + dir + "'");
                }
            }
            continue;  // other generator settings are informational
        }
        std::istringstream ls(line);
        std::string img, msk;
        if (!(ls >> img >> msk)) {
            throw FormatError("malformed manifest line '" + line + "' in '" + dir + "'");
        }
        pairs.emplace_back(img, msk);
    }
    if (num_classes_out) {
        *num_classes_out = num_classes;
    }
    std::vector<Sample<T>> out;
    out.reserve(pairs.size());
    for (const auto& [img, msk] : pairs) {
        Sample<T> smp;
        smp.image = read_image<T>((fs::path(dir) / img).string());
        smp.mask = read_mask<T>((fs::path(dir) / msk).string());
        if (smp.mask->shape !=
            std::vector<index_t>{smp.image->dim(1), smp.image->dim(2)}) {
            throw DataError("mask '" + msk + "' shape " + shape_str(smp.mask->shape) +
                            " does not match image " + shape_str(smp.image->shape));
        }
        for (T v : smp.mask->data) {
            if (v < T(0) || v >= static_cast<T>(num_classes)) {
                throw DataError("mask '" + msk + "' holds class id outside [0, " +
                                std::to_string(num_classes) + ")");
            }
        }
        out.push_back(std::move(smp));
    }
    return out;
}

#define MMUNET_INSTANTIATE_DATA(T)                                                           \
    template std::vector<Sample<T>> gen_phantom<T>(const PhantomSpec&);                      \
    template Splits<T> split<T>(const std::vector<Sample<T>>&, std::uint64_t);               \
    template void save_checkpoint<T>(const models::Model<T>&, const std::string&);           \
    template models::Model<T> load_checkpoint<T>(const std::string&);                        \
    template void write_image<T>(const TensorPtr<T>&, const std::string&);                   \
    template TensorPtr<T> read_image<T>(const std::string&);                                 \
    template void write_mask<T>(const TensorPtr<T>&, const std::string&);                    \
    template TensorPtr<T> read_mask<T>(const std::string&);                                  \
    template void write_dataset<T>(const std::string&, const std::vector<Sample<T>>&,        \
                                   const PhantomSpec&);                                      \
    template std::vector<Sample<T>> read_dataset<T>(const std::string&, index_t*);

MMUNET_INSTANTIATE_DATA(float)
MMUNET_INSTANTIATE_DATA(double)

}  // namespace mmunet::data
