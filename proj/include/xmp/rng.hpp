#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "xmp/dense.hpp"

namespace xmp {

using Rng = std::mt19937_64;

/// Derives an independent seed for a named sub-stream (stage, layer, ...)
/// from a parent seed. FNV-1a over the name, mixed with splitmix64.
inline std::uint64_t derive_seed(std::uint64_t parent, std::string_view name)
{
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::uint64_t z = parent + 0x9e3779b97f4a7c15ull + h;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t index)
{
    return derive_seed(parent, std::to_string(index));
}

/// Uniform double in [0, 1) built from raw engine output, so results do not
/// depend on the standard library's distribution implementations.
inline double uniform01(Rng& rng)
{
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline std::size_t uniform_index(Rng& rng, std::size_t n)
{
    return static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
}

/// Standard normal via Box-Muller.
inline double normal01(Rng& rng)
{
    double u1 = uniform01(rng);
    double u2 = uniform01(rng);
    if (u1 < 1e-300)
        u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
}

template <typename Scalar>
void fill_normal(Mat<Scalar>& m, Rng& rng, double stddev)
{
    for (Eigen::Index j = 0; j < m.cols(); ++j)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            m(i, j) = static_cast<Scalar>(normal01(rng) * stddev);
}

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng)
{
    for (std::size_t i = v.size(); i > 1; --i)
        std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace xmp
