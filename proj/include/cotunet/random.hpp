#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "cotunet/ops.hpp"

namespace cotunet {

using Rng = std::mt19937_64;

/// SplitMix64 finaliser; derives independent child seeds from (seed, stream).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

/// He (fan-in) normal initialisation, zero bias.
template <typename T>
void he_init(ConvParams3D<T>& p, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / double(p.fan_in())));
    for (auto& w : p.weight) w = T(dist(rng));
    std::fill(p.bias.begin(), p.bias.end(), T(0));
}

}  // namespace cotunet
