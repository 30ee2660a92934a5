#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mmunet/models.hpp"
#include "mmunet/tensor.hpp"

// Synthetic nested-ellipse dataset, PPM/PGM image files, dataset directories,
// and binary checkpoints.
namespace mmunet::data {

struct PhantomSpec {
    index_t count = 0;
    index_t size = 64;
    index_t num_classes = 4;  // background, capsule, cortex, nucleus
    std::uint64_t seed = 0;
    double noise_sigma = 0.05;
};

template <class T>
struct Sample {
    TensorPtr<T> image;  // [3 x S x S], values in [0, 1]
    TensorPtr<T> mask;   // [S x S], integral class ids
};

// Deterministic from spec.seed; sample i draws from sub-stream (seed,
// "phantom", i). Images are noisy renders, masks the noiseless class maps.
template <class T>
std::vector<Sample<T>> gen_phantom(const PhantomSpec& spec);

template <class T>
struct Splits {
    std::vector<Sample<T>> train, val, test;
};

// Seeded shuffle, then a contiguous 6:2:2 partition.
template <class T>
Splits<T> split(const std::vector<Sample<T>>& samples, std::uint64_t seed);

// Binary checkpoint: magic "MMUN", u32 version 1, u32 tensor count, then per
// tensor u16 name length + name, u8 ndim, u64 extents, u8 dtype tag (0=f32,
// 1=f64), little-endian payload. A leading "meta/spec" tensor records the
// ModelSpec so a checkpoint rebuilds its own model; it is not a parameter.
template <class T>
void save_checkpoint(const models::Model<T>& m, const std::string& path);

template <class T>
models::Model<T> load_checkpoint(const std::string& path);

template <class T>
void write_image(const TensorPtr<T>& image, const std::string& path);  // PPM P6

template <class T>
TensorPtr<T> read_image(const std::string& path);

template <class T>
void write_mask(const TensorPtr<T>& mask, const std::string& path);  // PGM P5

template <class T>
TensorPtr<T> read_mask(const std::string& path);

// Directory of img_%05d.ppm / msk_%05d.pgm pairs plus manifest.txt holding
// the generator settings and the pair list.
template <class T>
void write_dataset(const std::string& dir, const std::vector<Sample<T>>& samples,
                   const PhantomSpec& spec);

template <class T>
std::vector<Sample<T>> read_dataset(const std::string& dir, index_t* num_classes_out = nullptr);

}  // namespace mmunet::data
