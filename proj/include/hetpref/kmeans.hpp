#pragma once

// Lloyd's k-means with k-means++ seeding. Shared by EM initialization and
// the Cluster-DPO baseline.

#include "hetpref/core.hpp"
#include "hetpref/random.hpp"

#include <limits>
#include <vector>

namespace hetpref {

struct KMeansResult {
    std::vector<std::size_t> labels;
    std::vector<Vector> centroids;
    double inertia = 0.0;  // within-cluster sum of squares
    std::size_t iterations = 0;
};

namespace detail {

// Nearest centroid; the lowest index wins ties.
inline std::pair<std::size_t, double> nearest(const Vector& p, const std::vector<Vector>& centroids) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.size(); ++c) {
        const double d = (p - centroids[c]).squaredNorm();
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return {best, best_d};
}

}  // namespace detail

inline KMeansResult kmeans(const std::vector<Vector>& points, std::size_t K, Rng& rng,
                           std::size_t max_iters = 100) {
    const std::size_t n = points.size();
    if (K == 0) throw ConfigError("k-means needs K >= 1");
    if (n < K) throw DataError("k-means needs at least K points");

    // k-means++ seeding. When every remaining point coincides with a chosen
    // centroid the lowest-index unchosen point is taken.
    KMeansResult out;
    std::vector<bool> chosen(n, false);
    const std::size_t first = rng.below(n);
    out.centroids.push_back(points[first]);
    chosen[first] = true;
    std::vector<double> d2(n);
    for (std::size_t i = 0; i < n; ++i) d2[i] = (points[i] - points[first]).squaredNorm();
    while (out.centroids.size() < K) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += chosen[i] ? 0.0 : d2[i];
        std::size_t pick = n;
        if (total > 0.0) {
            const double u = rng.uniform() * total;
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                if (chosen[i] || d2[i] == 0.0) continue;
                acc += d2[i];
                pick = i;
                if (u < acc) break;
            }
        } else {
            for (std::size_t i = 0; i < n && pick == n; ++i)
                if (!chosen[i]) pick = i;
        }
        chosen[pick] = true;
        out.centroids.push_back(points[pick]);
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], (points[i] - points[pick]).squaredNorm());
    }

    out.labels.assign(n, 0);
    for (std::size_t i = 0; i < n; ++i) out.labels[i] = detail::nearest(points[i], out.centroids).first;
    for (out.iterations = 0; out.iterations < max_iters; ++out.iterations) {
        // Update; an empty cluster keeps its centroid.
        std::vector<Vector> sums(K, Vector::Zero(points.front().size()));
        std::vector<std::size_t> counts(K, 0);
        for (std::size_t i = 0; i < n; ++i) {
            sums[out.labels[i]] += points[i];
            ++counts[out.labels[i]];
        }
        for (std::size_t c = 0; c < K; ++c)
            if (counts[c] > 0) out.centroids[c] = sums[c] / static_cast<double>(counts[c]);
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = detail::nearest(points[i], out.centroids).first;
            if (c != out.labels[i]) {
                out.labels[i] = c;
                changed = true;
            }
        }
        if (!changed) break;
    }
    out.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) out.inertia += (points[i] - out.centroids[out.labels[i]]).squaredNorm();
    return out;
}

}  // namespace hetpref
