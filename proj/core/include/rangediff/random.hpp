#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "rangediff/tensor.hpp"

namespace rangediff {

using Rng = std::mt19937_64;

/// FNV-1a over the bytes of `s`; stable across platforms and runs.
constexpr std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

/// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Key of an independent random stream derived from a seed and a label.
constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view label) {
    return mix64(seed ^ mix64(fnv1a64(label)));
}

constexpr std::uint64_t stream_key(std::uint64_t seed, std::string_view label, std::uint64_t counter) {
    return mix64(stream_key(seed, label) ^ mix64(counter + 0x632be59bd9b4e019ULL));
}

inline Rng make_rng(std::uint64_t key) { return Rng(key); }

inline std::vector<Real> normal_vector(std::size_t n, Rng& rng) {
    std::normal_distribution<Real> dist(0.0, 1.0);
    std::vector<Real> out(n);
    for (auto& v : out) v = dist(rng);
    return out;
}

inline Tensor normal_tensor(Shape shape, Rng& rng) {
    const auto n = shape_numel(shape);
    return Tensor::from(std::move(shape), normal_vector(n, rng));
}

}  // namespace rangediff
