#pragma once

// Min-max-regret aggregation of a policy ensemble.
//
// Subgroup regret is computed without rewards from policy log-ratios:
//
//   R_k(pi) = beta * ( E_{pi_k}[log pi_k/pi_ref] - E_pi[log pi_k/pi_ref] )
//
// with expectations over the uniform prompt distribution and exact candidate
// sums. Three aggregators are provided: the affine-ensemble game solved by
// optimistic Hedge (mmra_ae), the lightweight weighted-DPO/MWU loop
// (mmra_lw), and the sampled gradient/MWU loop (mmra_full).

#include "hetpref/core.hpp"
#include "hetpref/dpo.hpp"
#include "hetpref/random.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <optional>
#include <vector>

namespace hetpref {

/// Mixture policy: pick component k with probability w_k, then sample it.
struct EnsemblePolicy {
    std::vector<LinearPolicy> components;
    Vector weights;

    void validate() const {
        if (components.empty()) throw DataError("ensemble has no components");
        if (weights.size() != static_cast<Eigen::Index>(components.size()))
            throw DataError("one ensemble weight per component required");
        if ((weights.array() < 0.0).any() || std::abs(weights.sum() - 1.0) > 1e-10)
            throw DataError("ensemble weights must lie in the simplex");
    }
};

inline Vector distribution(const EnsemblePolicy& policy, const ReferencePolicy& sft,
                           const ResponseUniverse& universe, PromptId x) {
    Vector p = Vector::Zero(static_cast<Eigen::Index>(universe.num_candidates(x)));
    for (std::size_t k = 0; k < policy.components.size(); ++k) {
        const double w = policy.weights(static_cast<Eigen::Index>(k));
        if (w != 0.0) p += w * distribution(policy.components[k], sft, universe, x);
    }
    return p;
}

/// Anything with an exactly computable per-prompt distribution.
template <class P>
concept ExactPolicy = requires(const P& p, const ReferencePolicy& sft, const ResponseUniverse& u) {
    { distribution(p, sft, u, PromptId{}) } -> std::convertible_to<Vector>;
};

/// E_{x ~ uniform, y ~ pi}[log(target(y|x) / pi_ref(y|x))].
template <ExactPolicy P>
double expected_log_ratio(const P& pi, const LinearPolicy& target, const ReferencePolicy& sft,
                          const ResponseUniverse& universe) {
    double total = 0.0;
    for (PromptId x = 0; x < universe.num_prompts(); ++x)
        total += distribution(pi, sft, universe, x).dot(log_ratios(target, sft, universe, x));
    return total / static_cast<double>(universe.num_prompts());
}

/// Signed regret of pi for the subgroup whose optimal policy is pi_star.
template <ExactPolicy P>
double subgroup_regret(const P& pi, const LinearPolicy& pi_star, const ReferencePolicy& sft,
                       const ResponseUniverse& universe, KlTemperature beta_kl) {
    check_dim(pi_star, universe);
    const double own = expected_log_ratio(pi_star, pi_star, sft, universe);
    return beta_kl.value() * (own - expected_log_ratio(pi, pi_star, sft, universe));
}

template <ExactPolicy P>
Vector subgroup_regrets(const P& pi, const std::vector<LinearPolicy>& optima, const ReferencePolicy& sft,
                        const ResponseUniverse& universe, KlTemperature beta_kl) {
    Vector r(static_cast<Eigen::Index>(optima.size()));
    for (std::size_t k = 0; k < optima.size(); ++k)
        r(static_cast<Eigen::Index>(k)) = subgroup_regret(pi, optima[k], sft, universe, beta_kl);
    return r;
}

inline Vector clamp_positive(const Vector& v) { return v.cwiseMax(0.0); }

/// L(r, c) for rows z_0..z_K and columns z_1..z_K:
/// L(r, c) = E_{pi_{c+1}}[log pi_r / pi_ref], row 0 identically zero.
struct DiscrepancyMatrix {
    Matrix L;

    std::size_t K() const { return static_cast<std::size_t>(L.cols()); }
};

inline DiscrepancyMatrix discrepancy_matrix(const std::vector<LinearPolicy>& policies,
                                            const ReferencePolicy& sft, const ResponseUniverse& universe) {
    const auto K = static_cast<Eigen::Index>(policies.size());
    if (K < 1) throw DataError("discrepancy matrix needs at least one policy");
    for (const auto& p : policies) check_dim(p, universe);
    DiscrepancyMatrix out{Matrix::Zero(K + 1, K)};
    for (PromptId x = 0; x < universe.num_prompts(); ++x) {
        std::vector<Vector> dists, ratios;
        for (const auto& p : policies) {
            ratios.push_back(log_ratios(p, sft, universe, x));
            dists.push_back((sft.log_probs(x) + ratios.back()).array().exp());
        }
        for (Eigen::Index r = 1; r <= K; ++r)
            for (Eigen::Index c = 0; c < K; ++c)
                out.L(r, c) += dists[static_cast<std::size_t>(c)].dot(ratios[static_cast<std::size_t>(r - 1)]);
    }
    out.L /= static_cast<double>(universe.num_prompts());
    return out;
}

/// R(k, c) = L(k, k-1) - L(k, c); (K+1) x K, row 0 zero.
inline Matrix regret_matrix(const DiscrepancyMatrix& d) {
    const Matrix& L = d.L;
    Matrix R = Matrix::Zero(L.rows(), L.cols());
    for (Eigen::Index k = 1; k < L.rows(); ++k)
        for (Eigen::Index c = 0; c < L.cols(); ++c) R(k, c) = L(k, k - 1) - L(k, c);
    return R;
}

struct HedgeTracePoint {
    std::size_t t;
    Vector w;           // running average of the minimizer's iterates
    double max_regret;  // max_k (R w)_k at that average
};

struct HedgeResult {
    Vector w;      // averaged minimizer strategy
    Vector p;      // averaged maximizer strategy
    double value;  // max_k (R w): value guaranteed by w
    double lower;  // min_c (R^T p)_c: value guaranteed by p
    double gap;    // value - lower >= 0
    double eta_step;
    std::vector<HedgeTracePoint> trace;
};

/// Default Hedge step: 1 / max |R|.
inline double default_hedge_step(const Matrix& R) {
    const double m = R.cwiseAbs().maxCoeff();
    return m > 0.0 ? 1.0 / m : 1.0;
}

/// Gap bound C * max|R| * log(K+1) * log(T) / T met by the default step.
inline double hedge_gap_bound(std::size_t K, std::size_t T, double scale) {
    constexpr double C = 20.0;
    const double t = static_cast<double>(std::max<std::size_t>(T, 2));
    return C * scale * std::log(static_cast<double>(K) + 1.0) * std::log(t) / t;
}

namespace detail {
inline Vector normalized_exp(const Vector& logw) {
    Vector w = (logw.array() - logw.maxCoeff()).exp();
    return w / w.sum();
}
}  // namespace detail

/// Optimistic Hedge vs optimistic Hedge on min_w max_p p^T R w. Iterates
/// before t = 0 are taken equal to the uniform initial strategies, which
/// zeroes the prediction term in the first step.
inline HedgeResult solve_minimax_hedge(const Matrix& R, std::size_t T,
                                       std::optional<double> eta_step = std::nullopt,
                                       std::size_t trace_points = 20) {
    if (T < 1) throw ConfigError("Hedge needs T >= 1");
    if (R.rows() < 1 || R.cols() < 1) throw DataError("empty regret matrix");
    if (!R.allFinite()) throw DataError("non-finite regret matrix entry");
    const double eta = eta_step.value_or(default_hedge_step(R));
    if (!(eta > 0.0)) throw ConfigError("Hedge step must be positive");
    const Eigen::Index K = R.cols();
    const Eigen::Index M = R.rows();

    Vector w = Vector::Constant(K, 1.0 / static_cast<double>(K));
    Vector p = Vector::Constant(M, 1.0 / static_cast<double>(M));
    Vector logw = w.array().log(), logp = p.array().log();
    Vector gw_prev = R.transpose() * p, gp_prev = R * w;  // losses at t-2
    Vector gw = gw_prev, gp = gp_prev;                    // losses at t-1
    Vector w_sum = Vector::Zero(K), p_sum = Vector::Zero(M);

    HedgeResult out;
    out.eta_step = eta;
    const std::size_t every = std::max<std::size_t>(1, T / std::max<std::size_t>(1, trace_points));
    for (std::size_t t = 1; t <= T; ++t) {
        logw -= eta * (2.0 * gw - gw_prev);
        logp += eta * (2.0 * gp - gp_prev);
        w = detail::normalized_exp(logw);
        p = detail::normalized_exp(logp);
        logw = w.array().log();
        logp = p.array().log();
        w_sum += w;
        p_sum += p;
        gw_prev = gw;
        gp_prev = gp;
        gw = R.transpose() * p;
        gp = R * w;
        if (t % every == 0 || t == T) {
            Vector avg = w_sum / static_cast<double>(t);
            out.trace.push_back({t, avg, (R * avg).maxCoeff()});
        }
    }
    out.w = w_sum / static_cast<double>(T);
    out.p = p_sum / static_cast<double>(T);
    out.value = (R * out.w).maxCoeff();
    out.lower = (R.transpose() * out.p).minCoeff();
    out.gap = std::max(0.0, out.value - out.lower);
    return out;
}

inline EnsemblePolicy uniform_baseline(const std::vector<LinearPolicy>& ensemble) {
    if (ensemble.empty()) throw DataError("ensemble has no components");
    const auto K = static_cast<Eigen::Index>(ensemble.size());
    return {ensemble, Vector::Constant(K, 1.0 / static_cast<double>(K))};
}

struct AeResult {
    EnsemblePolicy policy;
    DiscrepancyMatrix discrepancies;
    Matrix regret;
    HedgeResult hedge;
};

/// Affine-ensemble aggregation: discrepancies -> regret matrix -> Hedge.
inline AeResult mmra_ae(const std::vector<LinearPolicy>& ensemble, const ReferencePolicy& sft,
                        const ResponseUniverse& universe, std::size_t T,
                        std::optional<double> eta_step = std::nullopt) {
    AeResult out;
    out.discrepancies = discrepancy_matrix(ensemble, sft, universe);
    out.regret = regret_matrix(out.discrepancies);
    out.hedge = solve_minimax_hedge(out.regret, T, eta_step);
    out.policy = EnsemblePolicy{ensemble, out.hedge.w};
    return out;
}

struct MwuTracePoint {
    std::size_t t;
    Vector w;
    double max_regret;  // clamped
};

struct LwConfig {
    double mwu_eta = 0.01;
    std::size_t iterations = 20;
    std::size_t steps_per_iter = 250;
    TrainConfig train;
};

struct LwResult {
    LinearPolicy policy;
    Vector w;
    Vector regrets;  // signed regrets of the returned policy
    std::vector<MwuTracePoint> trace;
};

/// Lightweight MMRA: alternate a bounded number of weighted-DPO descent
/// steps, where annotator i carries weight sum_k w_k gamma_{i,k}, with a
/// multiplicative-weights update w_k <- w_k exp(eta R_k(pi)) on the signed
/// exact regrets. Starts from pi_ref and uniform w.
inline LwResult mmra_lw(const std::vector<LinearPolicy>& ensemble, const Matrix& gamma,
                        const AnnotatorDataset& dataset, const ReferencePolicy& sft,
                        const ResponseUniverse& universe, const LwConfig& config) {
    const auto K = static_cast<Eigen::Index>(ensemble.size());
    if (K < 1) throw DataError("ensemble has no components");
    if (gamma.cols() != K || gamma.rows() != static_cast<Eigen::Index>(dataset.num_annotators()))
        throw DataError("gamma must be n_annotators x K");
    if (config.iterations < 1 || config.steps_per_iter < 1) throw ConfigError("MMRA-LW needs iterations >= 1");
    config.train.validate();
    const double beta = config.train.beta_kl.value();

    LwResult out;
    out.w = Vector::Constant(K, 1.0 / static_cast<double>(K));
    LinearPolicy pi = LinearPolicy::zero(universe.dim());
    WeightedDataset data{dataset.records(), std::vector<double>(dataset.num_records(), 0.0)};
    for (std::size_t t = 0; t < config.iterations; ++t) {
        const Vector annotator_w = gamma * out.w;
        for (std::size_t r = 0; r < dataset.num_records(); ++r)
            data.weights[r] = annotator_w(static_cast<Eigen::Index>(dataset.records()[r].annotator));
        TrainResult step = descend(
            pi.theta, [&](const Vector& th) { return dpo_loss_and_grad(th, universe, data, beta); },
            config.train, config.steps_per_iter);
        pi = std::move(step.policy);
        out.regrets = subgroup_regrets(pi, ensemble, sft, universe, config.train.beta_kl);
        out.trace.push_back({t, out.w, clamp_positive(out.regrets).maxCoeff()});
        out.w = detail::normalized_exp(out.w.array().log().matrix() + config.mwu_eta * out.regrets);
    }
    out.policy = std::move(pi);
    return out;
}

struct McEstimate {
    double mean = 0.0;
    double std_error = 0.0;
    std::size_t samples = 0;
};

/// Draws y ~ pi(.|x) by inverse CDF on the exact distribution.
class PromptSampler {
public:
    explicit PromptSampler(const Vector& probs) : cdf_(static_cast<std::size_t>(probs.size())) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < probs.size(); ++i) cdf_[static_cast<std::size_t>(i)] = acc += probs(i);
    }
    std::size_t draw(Rng& rng) const {
        const double u = rng.uniform() * cdf_.back();
        auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return std::min<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), cdf_.size() - 1);
    }

private:
    std::vector<double> cdf_;
};

/// Monte-Carlo estimate of E_{x, y ~ sampler}[log target/pi_ref]: `prompts`
/// prompts drawn uniformly with replacement, `per_prompt` responses each.
inline McEstimate mc_expected_log_ratio(const LinearPolicy& sampler, const LinearPolicy& target,
                                        const ReferencePolicy& sft, const ResponseUniverse& universe,
                                        std::size_t prompts, std::size_t per_prompt, Rng& rng) {
    if (prompts < 1 || per_prompt < 1) throw ConfigError("sample sizes must be >= 1");
    double sum = 0.0, sum2 = 0.0;
    for (std::size_t i = 0; i < prompts; ++i) {
        const PromptId x = rng.below(universe.num_prompts());
        const PromptSampler draw(distribution(sampler, sft, universe, x));
        const Vector lr = log_ratios(target, sft, universe, x);
        for (std::size_t j = 0; j < per_prompt; ++j) {
            const double v = lr(static_cast<Eigen::Index>(draw.draw(rng)));
            sum += v;
            sum2 += v * v;
        }
    }
    const double n = static_cast<double>(prompts * per_prompt);
    McEstimate e;
    e.samples = prompts * per_prompt;
    e.mean = sum / n;
    const double var = n > 1 ? std::max(0.0, (sum2 - n * e.mean * e.mean) / (n - 1.0)) : 0.0;
    e.std_error = std::sqrt(var / n);
    return e;
}

struct FullConfig {
    std::size_t prompt_sample = 64;    // prompts drawn per estimate
    std::size_t gen_per_prompt = 16;   // responses generated per prompt
    std::size_t iterations = 20;
    std::size_t inner_steps = 25;      // gradient steps per MWU update, fresh samples each
    double mwu_eta = 0.01;
    double policy_lr = 0.0;            // 0 selects 1 / beta^2
    bool exact_kl = false;             // KL term and its gradient by enumeration instead of samples
    KlTemperature beta_kl{0.1};
};

struct FullResult {
    LinearPolicy policy;
    Vector w;
    Vector regrets;                   // exact signed regrets of the returned policy
    std::vector<McEstimate> own_values;  // precomputed E_{pi_k}[beta log pi_k/pi_ref]
    std::vector<MwuTracePoint> trace;   // max_regret from the sampled estimates
};

/// Original MMRA with generated samples: per-type values are estimated once
/// from pi_k samples, then each step estimates E_{pi^t}[beta log pi_k/pi_ref]
/// and the KL term from pi^t samples and descends
/// sum_k w_k ([R_k]^+ + beta KL(pi^t || pi_ref)) with score-function
/// gradients; w follows multiplicative weights on the same losses.
inline FullResult mmra_full(const std::vector<LinearPolicy>& ensemble, const ReferencePolicy& sft,
                            const ResponseUniverse& universe, const FullConfig& config, Rng& rng) {
    const auto K = static_cast<Eigen::Index>(ensemble.size());
    if (K < 1) throw DataError("ensemble has no components");
    if (config.prompt_sample < 1 || config.gen_per_prompt < 1 || config.iterations < 1 || config.inner_steps < 1)
        throw ConfigError("MMRA sample sizes and iteration counts must be >= 1");
    const double beta = config.beta_kl.value();
    const double lr = config.policy_lr > 0.0 ? config.policy_lr : 1.0 / (beta * beta);

    FullResult out;
    Vector own(K);
    for (Eigen::Index k = 0; k < K; ++k) {
        const auto& pk = ensemble[static_cast<std::size_t>(k)];
        McEstimate e = mc_expected_log_ratio(pk, pk, sft, universe, config.prompt_sample, config.gen_per_prompt, rng);
        e.mean *= beta;
        e.std_error *= beta;
        own(k) = e.mean;
        out.own_values.push_back(e);
    }

    out.w = Vector::Constant(K, 1.0 / static_cast<double>(K));
    Vector theta = Vector::Zero(static_cast<Eigen::Index>(universe.dim()));
    Vector regrets = Vector::Zero(K);
    double kl = 0.0;
    for (std::size_t t = 0; t < config.iterations; ++t) {
        for (std::size_t s = 0; s < config.inner_steps; ++s) {
            const LinearPolicy pi{theta};
            Vector cross = Vector::Zero(K);            // E_pi[beta lr_k]
            Matrix cross_grad = Matrix::Zero(theta.size(), K);  // E_pi[beta lr_k * score]
            Vector kl_grad = Vector::Zero(theta.size());
            kl = 0.0;
            const double n = static_cast<double>(config.prompt_sample * config.gen_per_prompt);
            for (std::size_t i = 0; i < config.prompt_sample; ++i) {
                const PromptId x = rng.below(universe.num_prompts());
                const Vector own_lr = log_ratios(pi, sft, universe, x);
                const Vector probs = (sft.log_probs(x) + own_lr).array().exp();
                const Matrix& F = universe.feature_matrix(x);
                const Vector mean_feat = F.transpose() * probs;
                std::vector<Vector> lrs;
                for (const auto& pk : ensemble) lrs.push_back(log_ratios(pk, sft, universe, x));
                const PromptSampler draw(probs);
                for (std::size_t j = 0; j < config.gen_per_prompt; ++j) {
                    const auto y = static_cast<Eigen::Index>(draw.draw(rng));
                    const Vector score = F.row(y).transpose() - mean_feat;
                    kl += beta * own_lr(y);
                    kl_grad += (beta * own_lr(y)) * score;
                    for (Eigen::Index k = 0; k < K; ++k) {
                        const double v = beta * lrs[static_cast<std::size_t>(k)](y);
                        cross(k) += v;
                        cross_grad.col(k) += v * score;
                    }
                }
            }
            cross /= n;
            cross_grad /= n;
            kl /= n;
            kl_grad /= n;
            if (config.exact_kl) {
                // grad_theta KL(pi_theta || pi_ref) = Cov_pi(psi) theta per prompt.
                kl = beta * expected_log_ratio(pi, pi, sft, universe);
                kl_grad.setZero();
                for (PromptId x = 0; x < universe.num_prompts(); ++x) {
                    const Vector probs = distribution(pi, sft, universe, x);
                    const Matrix& F = universe.feature_matrix(x);
                    const Vector centered_scores = F * theta - Vector::Constant(F.rows(), probs.dot(F * theta));
                    kl_grad += F.transpose() * probs.cwiseProduct(centered_scores);
                }
                kl_grad *= beta / static_cast<double>(universe.num_prompts());
            }
            regrets = own - cross;
            Vector grad = kl_grad;  // sum_k w_k = 1
            for (Eigen::Index k = 0; k < K; ++k)
                if (regrets(k) > 0.0) grad -= out.w(k) * cross_grad.col(k);
            theta -= lr * grad;
        }
        out.trace.push_back({t, out.w, clamp_positive(regrets).maxCoeff()});
        out.w = detail::normalized_exp(out.w.array().log().matrix() +
                                       config.mwu_eta * (clamp_positive(regrets).array() + kl).matrix());
    }
    out.policy = LinearPolicy{theta};
    out.regrets = subgroup_regrets(out.policy, ensemble, sft, universe, config.beta_kl);
    return out;
}

}  // namespace hetpref
