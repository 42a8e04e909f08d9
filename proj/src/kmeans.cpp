#include "dpl/kmeans.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "dpl/error.hpp"

namespace dpl::user {
namespace {

// Uniform helpers on top of mt19937_64 raw output. std::*_distribution is
// implementation-defined, and seeded runs must reproduce bit-for-bit.
double next_unit(std::mt19937_64& gen) {
    return double(gen() >> 11) * 0x1.0p-53;
}

std::size_t next_index(std::mt19937_64& gen, std::size_t bound) {
    return std::size_t(gen() % bound);
}

}  // namespace

KmeansResult kmeans(const std::vector<Vec>& points, int k, std::uint64_t seed,
                    int max_iter, double tol) {
    const std::size_t n = points.size();
    if (k < 1) throw Error("kmeans: k must be >= 1");
    if (n < std::size_t(k))
        throw Error("kmeans: " + std::to_string(n) + " points for k = " +
                    std::to_string(k));

    std::mt19937_64 gen(seed);
    std::vector<Vec> centroids;
    centroids.reserve(k);

    // k-means++ seeding.
    centroids.push_back(points[next_index(gen, n)]);
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i)
        d2[i] = (points[i] - centroids[0]).squaredNorm();
    while (int(centroids.size()) < k) {
        double total = 0.0;
        for (double v : d2) total += v;
        std::size_t chosen = 0;
        if (total <= 0.0) {
            // All remaining mass sits on already-chosen positions
            // (duplicate points); fall back to a uniform draw.
            chosen = next_index(gen, n);
        } else {
            double r = next_unit(gen) * total;
            double acc = 0.0;
            chosen = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= r) {
                    chosen = i;
                    break;
                }
            }
        }
        centroids.push_back(points[chosen]);
        for (std::size_t i = 0; i < n; ++i)
            d2[i] = std::min(d2[i], (points[i] - centroids.back()).squaredNorm());
    }

    KmeansResult result;
    result.assignments.assign(n, 0);
    std::vector<std::size_t> cluster_size(k, 0);

    for (int iter = 0; iter < max_iter; ++iter) {
        result.iterations = iter + 1;

        // Assignment; ties go to the lowest cluster index.
        std::fill(cluster_size.begin(), cluster_size.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            int best = 0;
            double best_d = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double d = (points[i] - centroids[c]).squaredNorm();
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            result.assignments[i] = best;
            ++cluster_size[best];
        }

        // Re-seed empty clusters with the point farthest from its
        // centroid, excluding singleton clusters.
        for (int c = 0; c < k; ++c) {
            if (cluster_size[c] > 0) continue;
            std::size_t far = n;
            double far_d = -1.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (cluster_size[result.assignments[i]] < 2) continue;
                double d =
                    (points[i] - centroids[result.assignments[i]]).squaredNorm();
                if (d > far_d) {
                    far_d = d;
                    far = i;
                }
            }
            if (far == n) throw Error("kmeans: cannot repopulate empty cluster");
            --cluster_size[result.assignments[far]];
            result.assignments[far] = c;
            ++cluster_size[c];
            centroids[c] = points[far];
        }

        // Centroid update.
        double shift = 0.0;
        std::vector<Vec> updated(k, Vec::Zero(points[0].size()));
        for (std::size_t i = 0; i < n; ++i)
            updated[result.assignments[i]] += points[i];
        for (int c = 0; c < k; ++c) {
            updated[c] /= double(cluster_size[c]);
            shift = std::max(shift, (updated[c] - centroids[c]).norm());
            centroids[c] = std::move(updated[c]);
        }

        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            inertia += (points[i] - centroids[result.assignments[i]]).squaredNorm();
        result.inertia = inertia;
        result.inertia_history.push_back(inertia);

        if (shift < tol) break;
    }

    result.centroids = std::move(centroids);
    return result;
}

}  // namespace dpl::user
