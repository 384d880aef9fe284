#pragma once

// Central finite-difference oracle for analytic gradients. Independent of any
// backward pass: it only evaluates the scalar loss.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xmp/dense.hpp"
#include "xmp/rng.hpp"

namespace xmp::test {

struct GradSample {
    std::string tensor;
    Eigen::Index row = 0, col = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckResult {
    std::vector<GradSample> samples;
    double max_rel_error = 0.0;
};

inline double relative_error(double a, double b)
{
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

/// Samples `count` parameter entries (uniformly over tensors, then entries)
/// and compares `grads` against (L(p+h) - L(p-h)) / 2h.
inline GradCheckResult check_gradients(const TensorList<double>& params, const TensorList<double>& grads,
                                       const std::function<double()>& loss, int count, std::uint64_t seed,
                                       double h = 1e-5)
{
    Rng rng(seed);
    GradCheckResult res;
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < params.size(); ++i)
        if (params[i].second->size() > 0)
            candidates.push_back(i);
    for (int s = 0; s < count; ++s) {
        std::size_t ti = candidates[uniform_index(rng, candidates.size())];
        auto& p = *params[ti].second;
        Eigen::Index r = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(p.rows())));
        Eigen::Index c = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(p.cols())));
        const double orig = p(r, c);
        p(r, c) = orig + h;
        const double lp = loss();
        p(r, c) = orig - h;
        const double lm = loss();
        p(r, c) = orig;
        GradSample g{params[ti].first, r, c, (*grads[ti].second)(r, c), (lp - lm) / (2 * h), 0.0};
        g.rel_error = relative_error(g.analytic, g.numeric);
        res.max_rel_error = std::max(res.max_rel_error, g.rel_error);
        res.samples.push_back(g);
    }
    return res;
}

}  // namespace xmp::test
