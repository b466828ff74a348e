#pragma once

// EM-DPO: soft clustering of annotators into K latent types with one linear
// policy per type.
//
// E-step:  gamma_{i,k} = eta_k prod_j P_k(V_ij) / sum_l eta_l prod_j P_l(V_ij)
// M-step:  eta_k = mean_i gamma_{i,k}; policy k minimizes the multi-item DPO
//          loss with record (i, j) weighted by gamma_{i,k}.
//
// Prompt likelihoods cancel from the posterior, so only choice
// probabilities enter. Everything runs in log space.

#include "hetpref/core.hpp"
#include "hetpref/data_gen.hpp"
#include "hetpref/dpo.hpp"
#include "hetpref/kmeans.hpp"
#include "hetpref/metrics.hpp"
#include "hetpref/random.hpp"

#include <cmath>
#include <cstdint>
#include <string>
#include <thread>
#include <vector>

namespace hetpref {

enum class InitMode { kmeans, random, given };

struct EmConfig {
    std::size_t K = 2;
    std::size_t iterations = 5;  // number of M-steps
    InitMode init = InitMode::kmeans;
    std::uint64_t seed = 0;
    TrainConfig train;
    double min_prob_floor = 1e-300;
    double freeze_below = 1e-6;  // types with eta_k below this keep their policy
    std::size_t threads = 1;
    Matrix initial_gamma;  // used with InitMode::given

    void validate() const {
        if (K < 1) throw ConfigError("K must be >= 1");
        if (iterations < 1) throw ConfigError("EM needs at least one iteration");
        if (!(min_prob_floor > 0.0)) throw ConfigError("min_prob_floor must be positive");
        train.validate();
    }
};

struct MixtureState {
    std::vector<LinearPolicy> policies;
    Vector eta;
    Matrix gamma;  // n x K
    std::vector<double> loglik_trace;
    std::vector<bool> frozen;

    std::size_t K() const { return policies.size(); }
};

/// A(i, k) = sum_j log P_k(V_ij), each term floored at log(floor).
inline Matrix annotator_log_likelihoods(const std::vector<LinearPolicy>& policies, const AnnotatorDataset& dataset,
                                        const ResponseUniverse& universe, KlTemperature beta_kl,
                                        double floor = 1e-300) {
    const double log_floor = std::log(floor);
    const auto K = static_cast<Eigen::Index>(policies.size());
    Matrix A = Matrix::Zero(static_cast<Eigen::Index>(dataset.num_annotators()), K);
    for (Eigen::Index k = 0; k < K; ++k) {
        const auto& pk = policies[static_cast<std::size_t>(k)];
        check_dim(pk, universe);
        for (const auto& r : dataset.records())
            A(static_cast<Eigen::Index>(r.annotator), k) +=
                std::max(log_floor, pref_log_prob(pk.theta, universe, r, beta_kl.value()));
    }
    return A;
}

inline void check_eta(const Vector& eta, std::size_t K) {
    if (eta.size() != static_cast<Eigen::Index>(K)) throw DataError("eta size does not match number of policies");
    if ((eta.array() < 0.0).any() || std::abs(eta.sum() - 1.0) > 1e-10) throw DataError("eta must lie in the simplex");
}

/// Posterior rows from annotator log-likelihoods.
inline Matrix e_step_from_loglik(const Matrix& A, const Vector& eta) {
    check_eta(eta, static_cast<std::size_t>(A.cols()));
    const Vector log_eta = eta.array().log();
    Matrix gamma(A.rows(), A.cols());
    for (Eigen::Index i = 0; i < A.rows(); ++i) {
        const Vector s = A.row(i).transpose() + log_eta;
        const Vector w = (s.array() - s.maxCoeff()).exp();
        gamma.row(i) = (w / w.sum()).transpose();
    }
    return gamma;
}

inline Matrix e_step(const std::vector<LinearPolicy>& policies, const Vector& eta, const AnnotatorDataset& dataset,
                     const ResponseUniverse& universe, KlTemperature beta_kl, double floor = 1e-300) {
    check_eta(eta, policies.size());
    if (dataset.num_records() == 0) throw DataError("empty dataset");
    return e_step_from_loglik(annotator_log_likelihoods(policies, dataset, universe, beta_kl, floor), eta);
}

/// sum_i log sum_k eta_k prod_j P_k(V_ij).
inline double observed_loglik(const std::vector<LinearPolicy>& policies, const Vector& eta,
                              const AnnotatorDataset& dataset, const ResponseUniverse& universe,
                              KlTemperature beta_kl, double floor = 1e-300) {
    check_eta(eta, policies.size());
    const Matrix A = annotator_log_likelihoods(policies, dataset, universe, beta_kl, floor);
    const Vector log_eta = eta.array().log();
    double total = 0.0;
    for (Eigen::Index i = 0; i < A.rows(); ++i) total += log_sum_exp(A.row(i).transpose() + log_eta);
    return total;
}

inline Vector m_step_eta(const Matrix& gamma) {
    if (gamma.rows() == 0 || gamma.cols() == 0) throw DataError("empty responsibility matrix");
    return gamma.colwise().mean().transpose();
}

struct MStepResult {
    std::vector<LinearPolicy> policies;
    std::vector<bool> collapsed;  // type left unchanged: no weight or frozen
};

/// Per-type weighted DPO fits warm-started from `previous`. Types whose
/// total weight is below 1e-12 or flagged in `freeze` keep their policy.
/// Fits are independent and may run on several threads; results do not
/// depend on the thread count.
inline MStepResult m_step_policies(const Matrix& gamma, const AnnotatorDataset& dataset, const ResponseUniverse& universe,
                                   const std::vector<LinearPolicy>& previous, const TrainConfig& config,
                                   const std::vector<bool>& freeze = {}, std::size_t threads = 1) {
    const auto K = static_cast<std::size_t>(gamma.cols());
    if (previous.size() != K) throw DataError("one previous policy per type required");
    if (gamma.rows() != static_cast<Eigen::Index>(dataset.num_annotators())) throw DataError("gamma rows must match annotators");
    MStepResult out{previous, std::vector<bool>(K, false)};
    const double beta = config.beta_kl.value();

    auto fit = [&](std::size_t k) {
        WeightedDataset data{dataset.records(), std::vector<double>(dataset.num_records())};
        for (std::size_t r = 0; r < dataset.num_records(); ++r)
            data.weights[r] = gamma(static_cast<Eigen::Index>(dataset.records()[r].annotator), static_cast<Eigen::Index>(k));
        if ((!freeze.empty() && freeze[k]) || data.total_weight() < 1e-12) {
            out.collapsed[k] = true;
            return;
        }
        out.policies[k] = descend(
                              previous[k].theta,
                              [&](const Vector& t) { return dpo_loss_and_grad(t, universe, data, beta); }, config,
                              config.max_iters)
                              .policy;
    };

    if (threads <= 1 || K == 1) {
        for (std::size_t k = 0; k < K; ++k) fit(k);
    } else {
        std::vector<std::jthread> pool;
        const std::size_t n = std::min(threads, K);
        for (std::size_t w = 0; w < n; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t k = w; k < K; k += n) fit(k);
            });
    }
    return out;
}

/// Hard one-hot responsibilities from k-means on annotator features.
inline Matrix init_kmeans(const AnnotatorDataset& dataset, const ResponseUniverse& universe, std::size_t K, Rng& rng) {
    if (dataset.num_annotators() < K) throw DataError("k-means initialization needs n >= K annotators");
    const auto labels = kmeans(annotator_features(dataset, universe), K, rng).labels;
    Matrix gamma = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), static_cast<Eigen::Index>(K));
    for (std::size_t i = 0; i < labels.size(); ++i) gamma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(labels[i])) = 1.0;
    return gamma;
}

/// Uniformly random hard assignment.
inline Matrix init_random(std::size_t n, std::size_t K, Rng& rng) {
    Matrix gamma = Matrix::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(K));
    for (std::size_t i = 0; i < n; ++i) gamma(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(rng.below(K))) = 1.0;
    return gamma;
}

/// Full EM-DPO. Policies start at pi_ref and eta uniform. Identical initial
/// policies carry no information, so round 0 takes its responsibilities
/// from the initializer in place of an E-step; rounds 1..T-1 run the E-step.
/// The log-likelihood is recorded after every M-step, and the returned gamma
/// is the posterior under the returned parameters.
inline MixtureState run_em(const AnnotatorDataset& dataset, const ReferencePolicy& /*sft*/,
                           const ResponseUniverse& universe, const EmConfig& config) {
    config.validate();
    if (dataset.num_records() == 0) throw DataError("empty dataset");
    const std::size_t K = config.K;
    const auto n = static_cast<Eigen::Index>(dataset.num_annotators());
    Rng rng = Rng::substream(config.seed, "em-init");

    MixtureState s;
    s.policies.assign(K, LinearPolicy::zero(universe.dim()));
    s.eta = Vector::Constant(static_cast<Eigen::Index>(K), 1.0 / static_cast<double>(K));
    s.frozen.assign(K, false);
    switch (config.init) {
        case InitMode::kmeans: s.gamma = init_kmeans(dataset, universe, K, rng); break;
        case InitMode::random: s.gamma = init_random(dataset.num_annotators(), K, rng); break;
        case InitMode::given:
            if (config.initial_gamma.rows() != n || config.initial_gamma.cols() != static_cast<Eigen::Index>(K))
                throw ConfigError("initial gamma must be n_annotators x K");
            s.gamma = config.initial_gamma;
            break;
    }

    const KlTemperature beta = config.train.beta_kl;
    for (std::size_t t = 0; t < config.iterations; ++t) {
        if (t > 0) s.gamma = e_step(s.policies, s.eta, dataset, universe, beta, config.min_prob_floor);
        s.eta = m_step_eta(s.gamma);
        for (std::size_t k = 0; k < K; ++k) s.frozen[k] = s.eta(static_cast<Eigen::Index>(k)) < config.freeze_below;
        s.policies = m_step_policies(s.gamma, dataset, universe, s.policies, config.train, s.frozen, config.threads).policies;
        s.loglik_trace.push_back(observed_loglik(s.policies, s.eta, dataset, universe, beta, config.min_prob_floor));
    }
    s.gamma = e_step(s.policies, s.eta, dataset, universe, beta, config.min_prob_floor);
    return s;
}

/// Largest decrease between consecutive log-likelihood entries (0 if none).
inline double max_loglik_drop(const std::vector<double>& trace) {
    double drop = 0.0;
    for (std::size_t t = 1; t < trace.size(); ++t) drop = std::max(drop, trace[t - 1] - trace[t]);
    return drop;
}

/// Single DPO policy on the pooled data.
inline LinearPolicy vanilla_dpo(const AnnotatorDataset& dataset, const ReferencePolicy& sft,
                                const ResponseUniverse& universe, const TrainConfig& config) {
    return train_weighted_dpo(LinearPolicy::zero(universe.dim()), sft, universe,
                              WeightedDataset::unit(dataset.records()), config)
        .policy;
}

/// One DPO policy per true latent type.
inline std::vector<LinearPolicy> true_label_dpo(const LabeledDataset& labeled, const ReferencePolicy& sft,
                                                const ResponseUniverse& universe, const TrainConfig& config) {
    return fit_per_label(labeled.data, labeled.true_labels, labeled.type_names.size(), sft, universe, config);
}

struct SweepRow {
    std::size_t K = 0;
    std::string group;
    double max_mean_margin = 0.0;
    double accuracy = 0.0;  // of the ensemble member attaining the max margin
    double loglik = 0.0;    // final training log-likelihood
};

/// Runs EM for each K of the grid (fresh start each) and scores the ensemble
/// on every validation subgroup. No K is selected automatically.
inline std::vector<SweepRow> select_k(const AnnotatorDataset& train, const EvalPairSet& validation,
                                      const ReferencePolicy& sft, const ResponseUniverse& universe,
                                      const std::vector<std::size_t>& k_grid, const EmConfig& config) {
    if (k_grid.empty()) throw ConfigError("empty K grid");
    std::vector<SweepRow> rows;
    for (std::size_t K : k_grid) {
        EmConfig c = config;
        c.K = K;
        const MixtureState s = run_em(train, sft, universe, c);
        for (std::size_t g = 0; g < validation.groups.size(); ++g) {
            const auto best = max_mean_margin(s.policies, sft, universe, validation.groups[g], c.train.beta_kl);
            rows.push_back({K, validation.group_names[g], best.value,
                            accuracy(s.policies[best.index], sft, universe, validation.groups[g], c.train.beta_kl),
                            s.loglik_trace.back()});
        }
    }
    return rows;
}

}  // namespace hetpref
