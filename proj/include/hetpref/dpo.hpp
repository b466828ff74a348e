#pragma once

// Weighted multi-item DPO for linear policies.
//
// For a record with choice set C = {winner} u rejected the preference
// probability is the softmax over C of beta * log(pi_theta / pi_ref). The
// per-prompt normalizer A_theta(x) is common to every item of C and cancels,
// leaving softmax_C(beta * theta . psi). The loss is convex in theta.

#include "hetpref/core.hpp"

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace hetpref {

struct TrainConfig {
    double step_size = 1.0;  // first trial step of the line search
    std::size_t max_iters = 10000;
    double grad_tol = 1e-8;  // on the infinity norm of the gradient
    KlTemperature beta_kl{0.1};

    void validate() const {
        if (!(step_size > 0.0)) throw ConfigError("step_size must be positive");
        if (max_iters == 0) throw ConfigError("max_iters must be positive");
        if (!(grad_tol > 0.0)) throw ConfigError("grad_tol must be positive");
    }
};

/// Records with nonnegative weights. Views the records; the caller keeps
/// them alive.
struct WeightedDataset {
    std::span<const PreferenceRecord> records;
    std::vector<double> weights;

    static WeightedDataset unit(std::span<const PreferenceRecord> records) {
        return {records, std::vector<double>(records.size(), 1.0)};
    }

    double total_weight() const {
        double s = 0.0;
        for (double w : weights) s += w;
        return s;
    }

    void validate() const {
        if (records.empty()) throw DataError("empty preference dataset");
        if (weights.size() != records.size()) throw DataError("one weight per record required");
        for (double w : weights)
            if (!(w >= 0.0) || !std::isfinite(w)) throw DataError("weights must be finite and >= 0");
    }
};

namespace detail {

/// beta * theta . psi for the choice set of r, winner first.
inline Vector choice_scores(const Vector& theta, const ResponseUniverse& universe,
                            const PreferenceRecord& r, double beta) {
    const Matrix& F = universe.feature_matrix(r.prompt);
    Vector s(static_cast<Eigen::Index>(r.choice_size()));
    s(0) = beta * F.row(static_cast<Eigen::Index>(r.winner)).dot(theta);
    for (std::size_t j = 0; j < r.rejected.size(); ++j)
        s(static_cast<Eigen::Index>(j + 1)) = beta * F.row(static_cast<Eigen::Index>(r.rejected[j])).dot(theta);
    return s;
}

}  // namespace detail

/// log P(winner > rejected | x) under the linear policy theta.
inline double pref_log_prob(const Vector& theta, const ResponseUniverse& universe,
                            const PreferenceRecord& r, double beta) {
    const Vector s = detail::choice_scores(theta, universe, r, beta);
    return s(0) - log_sum_exp(s);
}

inline double pref_prob(const LinearPolicy& policy, const ReferencePolicy& /*sft*/,
                        const ResponseUniverse& universe, const PreferenceRecord& record,
                        KlTemperature beta_kl) {
    check_dim(policy, universe);
    validate(record, universe);
    return std::exp(pref_log_prob(policy.theta, universe, record, beta_kl.value()));
}

struct LossAndGrad {
    double loss = 0.0;
    Vector grad;
};

/// Loss -sum w log P and its gradient
/// sum w * beta * (E_softmax[psi] - psi(winner)).
inline LossAndGrad dpo_loss_and_grad(const Vector& theta, const ResponseUniverse& universe,
                                     const WeightedDataset& data, double beta) {
    LossAndGrad out{0.0, Vector::Zero(theta.size())};
    for (std::size_t i = 0; i < data.records.size(); ++i) {
        const double w = data.weights[i];
        if (w == 0.0) continue;
        const PreferenceRecord& r = data.records[i];
        const Matrix& F = universe.feature_matrix(r.prompt);
        const Vector s = detail::choice_scores(theta, universe, r, beta);
        const double lse = log_sum_exp(s);
        out.loss -= w * (s(0) - lse);
        const Vector p = (s.array() - lse).exp();
        Vector expected = p(0) * F.row(static_cast<Eigen::Index>(r.winner)).transpose();
        for (std::size_t j = 0; j < r.rejected.size(); ++j)
            expected += p(static_cast<Eigen::Index>(j + 1)) *
                        F.row(static_cast<Eigen::Index>(r.rejected[j])).transpose();
        out.grad += (w * beta) * (expected - F.row(static_cast<Eigen::Index>(r.winner)).transpose());
    }
    return out;
}

inline double dpo_loss(const LinearPolicy& policy, const ReferencePolicy& /*sft*/,
                       const ResponseUniverse& universe, const WeightedDataset& data,
                       KlTemperature beta_kl) {
    check_dim(policy, universe);
    data.validate();
    return dpo_loss_and_grad(policy.theta, universe, data, beta_kl.value()).loss;
}

inline Vector dpo_grad(const LinearPolicy& policy, const ReferencePolicy& /*sft*/,
                       const ResponseUniverse& universe, const WeightedDataset& data,
                       KlTemperature beta_kl) {
    check_dim(policy, universe);
    data.validate();
    return dpo_loss_and_grad(policy.theta, universe, data, beta_kl.value()).grad;
}

struct TrainResult {
    LinearPolicy policy;
    bool converged = false;  // gradient tolerance met (otherwise last iterate)
    std::size_t iterations = 0;
    double initial_loss = 0.0;
    double loss = 0.0;
};

/// Gradient descent with backtracking (halving, Armijo constant 1e-4) on a
/// smooth convex objective. A trial step is also accepted when the
/// directional derivative at the trial point is still non-positive, which
/// for a convex objective implies no increase; this keeps progress possible
/// once Armijo decreases fall below the floating-point resolution of the
/// loss. Runs until the gradient infinity norm is <= grad_tol or `max_steps`
/// steps were taken.
template <class Objective>
TrainResult descend(Vector theta, Objective&& objective, const TrainConfig& config,
                    std::size_t max_steps) {
    constexpr double armijo = 1e-4;
    constexpr double min_step = 1e-30;
    LossAndGrad cur = objective(theta);
    TrainResult result;
    result.initial_loss = cur.loss;
    double step = config.step_size;
    std::size_t it = 0;
    for (; it < max_steps; ++it) {
        if (cur.grad.lpNorm<Eigen::Infinity>() <= config.grad_tol) {
            result.converged = true;
            break;
        }
        const double g2 = cur.grad.squaredNorm();
        bool accepted = false;
        while (step >= min_step) {
            Vector trial = theta - step * cur.grad;
            LossAndGrad next = objective(trial);
            const bool sufficient = next.loss <= cur.loss - armijo * step * g2;
            const bool still_descending =
                next.grad.dot(cur.grad) >= 0.0 &&
                next.loss <= cur.loss + 8.0 * std::numeric_limits<double>::epsilon() * std::abs(cur.loss);
            if (std::isfinite(next.loss) && (sufficient || still_descending)) {
                theta = std::move(trial);
                cur = std::move(next);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;
        step *= 2.0;
    }
    if (!result.converged && cur.grad.lpNorm<Eigen::Infinity>() <= config.grad_tol) result.converged = true;
    result.iterations = it;
    result.loss = cur.loss;
    result.policy = LinearPolicy{std::move(theta)};
    return result;
}

inline TrainResult train_weighted_dpo(const LinearPolicy& init, const ReferencePolicy& /*sft*/,
                                      const ResponseUniverse& universe, const WeightedDataset& data,
                                      const TrainConfig& config) {
    config.validate();
    check_dim(init, universe);
    data.validate();
    if (!(data.total_weight() > 0.0)) throw DataError("all record weights are zero");
    const double beta = config.beta_kl.value();
    return descend(
        init.theta, [&](const Vector& t) { return dpo_loss_and_grad(t, universe, data, beta); }, config,
        config.max_iters);
}

}  // namespace hetpref
