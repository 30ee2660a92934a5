#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mmunet/mmlp.hpp"
#include "mmunet/tensor.hpp"

// Five-level encoder-decoder segmentation nets: the plain baseline, the
// variant with windowed token mixing on every encoder level, and the ablation
// where every window spans the whole grid.
namespace mmunet::models {

enum class Variant { unet, mm_unet, mm_unet_global };

std::string variant_name(Variant v);
Variant parse_variant(const std::string& name);

struct ModelSpec {
    Variant variant = Variant::mm_unet;
    index_t base_width = 64;
    index_t input_size = 256;
    index_t num_classes = 4;
    double ltm_expansion = 1.0;
};

inline constexpr int kLevels = 5;

struct LevelGeometry {
    index_t channels = 0;  // base_width * 2^(level-1)
    index_t map_size = 0;  // input_size / 2^(level-1)
    std::vector<mmlp::GroupSpec> groups;  // empty for the baseline
};

// Validates the spec and lays out channels, resolutions and mixing groups per
// level. Group channels are [c/2, c/4, c/4]; patch size is 4 (shrunk to the
// map when the map is smaller) and window counts follow the per-level
// schedule {32,16,8} {16,8,4} {8,4,2} {8,4,2} {4,2,1}, capped at the grid
// size so smaller inputs stay valid.
std::vector<LevelGeometry> level_geometry(const ModelSpec& spec);

enum class Init { he_uniform, zeros, ones };

struct ParamDesc {
    std::string name;
    std::vector<index_t> shape;
    Init init = Init::zeros;
    index_t fan_in = 0;   // he_uniform bound = sqrt(6 / fan_in)
    bool mixing = false;  // belongs to a token-mixing block
};

// Every parameter of the network in a fixed order; build, count_params and
// the checkpoint format all derive from this single walk.
std::vector<ParamDesc> param_layout(const ModelSpec& spec);

struct ParamReport {
    index_t total = 0;
    std::vector<std::pair<std::string, index_t>> breakdown;
    index_t mixing_overhead = 0;
};

ParamReport count_params(const ModelSpec& spec);

template <class T>
struct ConvParams {
    TensorPtr<T> weight, bias;
};

template <class T>
struct LevelParams {
    ConvParams<T> conv1, conv2;
    mmlp::MMLPConfig<T> mixer;  // groups empty when absent
};

template <class T>
struct Model {
    ModelSpec spec;
    std::vector<LevelParams<T>> enc;  // kLevels entries
    std::vector<LevelParams<T>> dec;  // kLevels-1 entries, deepest first
    ConvParams<T> head;
    // name -> tensor in param_layout order
    std::vector<std::pair<std::string, TensorPtr<T>>> manifest;
};

template <class T>
Model<T> build(const ModelSpec& spec, std::uint64_t seed);

// batch [B x 3 x S x S] -> logits [B x K x S x S]
template <class T>
TensorPtr<T> forward(const Model<T>& m, const TensorPtr<T>& batch);

}  // namespace mmunet::models
