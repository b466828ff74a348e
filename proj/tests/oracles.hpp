#pragma once

// Independent reference computations used as test oracles. Deliberately
// naive: direct exponentials, exhaustive enumeration, dense solves.

#include "hetpref/core.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

namespace oracle {

using hetpref::Matrix;
using hetpref::Vector;

/// Tilted policy probabilities by direct exponentiation.
inline Vector tilted_probs(const Matrix& features, const Vector& sft, const Vector& theta) {
    Vector w(sft.size());
    for (Eigen::Index i = 0; i < sft.size(); ++i) w(i) = sft(i) * std::exp(features.row(i).dot(theta));
    return w / w.sum();
}

/// E_{p}[log q / sft] on a single prompt.
inline double expected_log_ratio(const Vector& p, const Vector& q, const Vector& sft) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i) s += p(i) * std::log(q(i) / sft(i));
    return s;
}

/// Value of min_{w in simplex} max_k (R w)_k by vertex enumeration of the LP
///   min v  s.t.  R w <= v 1,  1^T w = 1,  w >= 0.
/// Variables (w, v) in R^{K+1}; a vertex makes K of the M + K inequalities
/// tight together with the equality.
inline double game_value(const Matrix& R) {
    const int M = static_cast<int>(R.rows());
    const int K = static_cast<int>(R.cols());
    const int n_ineq = M + K;
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> pick(static_cast<std::size_t>(K));
    std::function<void(int, int)> rec = [&](int start, int depth) {
        if (depth == K) {
            Matrix A = Matrix::Zero(K + 1, K + 1);
            Vector b = Vector::Zero(K + 1);
            for (int r = 0; r < K; ++r) {
                const int c = pick[static_cast<std::size_t>(r)];
                if (c < M) {
                    A.row(r).head(K) = R.row(c);
                    A(r, K) = -1.0;
                } else {
                    A(r, c - M) = 1.0;
                }
            }
            A.row(K).head(K).setOnes();
            b(K) = 1.0;
            Eigen::FullPivLU<Matrix> lu(A);
            if (lu.rank() < K + 1) return;
            const Vector x = lu.solve(b);
            const Vector w = x.head(K);
            if ((w.array() < -1e-12).any()) return;
            if (((R * w).array() > x(K) + 1e-10).any()) return;
            best = std::min(best, x(K));
            return;
        }
        for (int c = start; c < n_ineq; ++c) {
            pick[static_cast<std::size_t>(depth)] = c;
            rec(c + 1, depth + 1);
        }
    };
    rec(0, 0);
    return best;
}

/// Minimum within-cluster SSE over all 2-partitions (both parts nonempty).
/// Returns the labels of the best partition with point 0 in cluster 0.
inline std::vector<std::size_t> best_two_partition(const std::vector<Vector>& pts) {
    const std::size_t n = pts.size();
    double best = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> labels(n);
    for (unsigned long mask = 1; mask < (1UL << n) - 1; ++mask) {
        if (mask & 1UL) continue;
        double sse = 0.0;
        for (unsigned bit = 0; bit < 2; ++bit) {
            Vector c = Vector::Zero(pts[0].size());
            double cnt = 0;
            for (std::size_t i = 0; i < n; ++i)
                if (((mask >> i) & 1UL) == bit) c += pts[i], ++cnt;
            c /= cnt;
            for (std::size_t i = 0; i < n; ++i)
                if (((mask >> i) & 1UL) == bit) sse += (pts[i] - c).squaredNorm();
        }
        if (sse < best) {
            best = sse;
            for (std::size_t i = 0; i < n; ++i) labels[i] = (mask >> i) & 1UL;
        }
    }
    return labels;
}

/// Central differences of a scalar function.
inline Vector central_diff(const std::function<double(const Vector&)>& f, const Vector& x, double h = 1e-5) {
    Vector g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        Vector a = x, b = x;
        a(i) += h;
        b(i) -= h;
        g(i) = (f(a) - f(b)) / (2.0 * h);
    }
    return g;
}

}  // namespace oracle
