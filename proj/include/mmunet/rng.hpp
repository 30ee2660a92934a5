#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string_view>
#include <vector>

namespace mmunet::rng {

// splitmix64 finalizer; good avalanche, cheap.
inline std::uint64_t mix(std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t combine(std::uint64_t seed, std::uint64_t v) {
    return mix(seed ^ mix(v));
}

// Every source of randomness hangs off one user seed via a named sub-stream,
// so streams never alias across purposes ("model-init", "shuffle", "phantom", ...).
inline std::uint64_t substream(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ull;  // FNV-1a over the name
    for (unsigned char c : name) {
        h = (h ^ c) * 0x100000001b3ull;
    }
    return combine(seed, h);
}

inline std::uint64_t substream(std::uint64_t seed, std::string_view name, std::uint64_t index) {
    return combine(substream(seed, name), index);
}

inline std::mt19937_64 engine(std::uint64_t stream_seed) {
    return std::mt19937_64(stream_seed);
}

// Fisher-Yates with explicit draws, so the order does not depend on the
// standard library's shuffle internals.
inline std::vector<std::int64_t> shuffled_indices(std::int64_t n, std::mt19937_64& eng) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), std::int64_t{0});
    for (std::int64_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::int64_t>(eng() % static_cast<std::uint64_t>(i + 1));
        std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
    }
    return idx;
}

}  // namespace mmunet::rng
