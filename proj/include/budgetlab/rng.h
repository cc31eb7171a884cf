// SPDX-License-Identifier: Apache-2.0
//
// Seed plumbing. One experiment seed fans out into named sub-streams
// ("model-init", "data-order", "init-method", ...) so that each component is
// reproducible on its own.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace budgetlab {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Combines two 64-bit words into a well-mixed seed.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
    return splitmix64(a ^ splitmix64(b + 0x632be59bd9b4e019ULL));
}

/// Seed of the sub-stream called `name` under `seed`.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (unsigned char c : name) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix_seed(seed, h);
}

/// Uniform double in [0, 1) from the top 53 bits of a hash word.
inline double unit_interval(std::uint64_t h) {
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

using Rng = std::mt19937_64;

}  // namespace budgetlab
