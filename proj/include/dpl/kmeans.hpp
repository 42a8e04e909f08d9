#pragma once

#include <cstdint>
#include <vector>

#include "dpl/embedding.hpp"

namespace dpl::user {

struct KmeansResult {
    std::vector<int> assignments;  // per-point cluster index in [0, k)
    std::vector<Vec> centroids;
    int iterations = 0;
    double inertia = 0.0;
    std::vector<double> inertia_history;  // one entry per iteration
};

/// Lloyd iterations with k-means++ initialization driven by a seeded
/// PRNG. Empty clusters are re-seeded with the point farthest from its
/// centroid before the next iteration, so every cluster ends non-empty.
/// Throws when points.size() < k or k < 1.
KmeansResult kmeans(const std::vector<Vec>& points, int k, std::uint64_t seed,
                    int max_iter = 100, double tol = 1e-6);

}  // namespace dpl::user
