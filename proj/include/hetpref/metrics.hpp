#pragma once

// Evaluation metrics: reward margins, pairwise accuracy, max-mean reward
// margin of an ensemble, and worst-case subgroup regret.

#include "hetpref/aggregate.hpp"
#include "hetpref/core.hpp"

#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace hetpref {

/// beta * (log-ratio(winner) - log-ratio(loser)) = beta * theta . (psi_w - psi_l).
inline double reward_margin(const LinearPolicy& policy, const ReferencePolicy& /*sft*/,
                            const ResponseUniverse& universe, const PreferenceRecord& record,
                            KlTemperature beta_kl) {
    if (record.rejected.size() != 1) throw DataError("reward margin needs a binary record");
    check_dim(policy, universe);
    validate(record, universe);
    const Matrix& F = universe.feature_matrix(record.prompt);
    const auto w = static_cast<Eigen::Index>(record.winner);
    const auto l = static_cast<Eigen::Index>(record.rejected.front());
    return beta_kl.value() * (F.row(w) - F.row(l)).dot(policy.theta);
}

/// Margin for any policy with an exact distribution, via its log-ratios.
template <ExactPolicy P>
double reward_margin(const P& policy, const ReferencePolicy& sft, const ResponseUniverse& universe,
                     const PreferenceRecord& record, KlTemperature beta_kl) {
    if (record.rejected.size() != 1) throw DataError("reward margin needs a binary record");
    validate(record, universe);
    const Vector lp = distribution(policy, sft, universe, record.prompt).array().log();
    const auto w = static_cast<Eigen::Index>(record.winner);
    const auto l = static_cast<Eigen::Index>(record.rejected.front());
    const Vector& ref = sft.log_probs(record.prompt);
    return beta_kl.value() * ((lp(w) - ref(w)) - (lp(l) - ref(l)));
}

template <class P>
double mean_margin(const P& policy, const ReferencePolicy& sft, const ResponseUniverse& universe,
                   std::span<const PreferenceRecord> pairs, KlTemperature beta_kl) {
    if (pairs.empty()) throw DataError("empty evaluation pair set");
    double s = 0.0;
    for (const auto& r : pairs) s += reward_margin(policy, sft, universe, r, beta_kl);
    return s / static_cast<double>(pairs.size());
}

/// Fraction of pairs with positive margin; a zero margin counts one half.
template <class P>
double accuracy(const P& policy, const ReferencePolicy& sft, const ResponseUniverse& universe,
                std::span<const PreferenceRecord> pairs, KlTemperature beta_kl) {
    if (pairs.empty()) throw DataError("empty evaluation pair set");
    double hits = 0.0;
    for (const auto& r : pairs) {
        const double m = reward_margin(policy, sft, universe, r, beta_kl);
        hits += m > 0.0 ? 1.0 : (m == 0.0 ? 0.5 : 0.0);
    }
    return hits / static_cast<double>(pairs.size());
}

struct BestMargin {
    double value = 0.0;
    std::size_t index = 0;  // ensemble member attaining it (lowest index on ties)
};

inline BestMargin max_mean_margin(const std::vector<LinearPolicy>& ensemble, const ReferencePolicy& sft,
                                  const ResponseUniverse& universe, std::span<const PreferenceRecord> pairs,
                                  KlTemperature beta_kl) {
    if (ensemble.empty()) throw DataError("empty ensemble");
    BestMargin best{-std::numeric_limits<double>::infinity(), 0};
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        const double m = mean_margin(ensemble[i], sft, universe, pairs, beta_kl);
        if (m > best.value) best = {m, i};
    }
    return best;
}

struct RegretSummary {
    Vector signed_regrets;
    double max_signed = 0.0;
    double max_clamped = 0.0;
};

template <ExactPolicy P>
RegretSummary max_regret(const P& policy, const std::vector<LinearPolicy>& optima, const ReferencePolicy& sft,
                         const ResponseUniverse& universe, KlTemperature beta_kl) {
    if (optima.empty()) throw DataError("no per-type optimal policies");
    RegretSummary s;
    s.signed_regrets = subgroup_regrets(policy, optima, sft, universe, beta_kl);
    s.max_signed = s.signed_regrets.maxCoeff();
    s.max_clamped = std::max(0.0, s.max_signed);
    return s;
}

/// Exact optimum of E_pi[beta_type . psi] - beta_kl KL(pi || pi_ref) in the
/// linear family: theta = beta_type / beta_kl.
inline LinearPolicy optimal_policy(const Vector& type_beta, KlTemperature beta_kl) {
    return LinearPolicy{type_beta / beta_kl.value()};
}

struct MetricRow {
    std::string method;
    std::string group;
    double mean_margin = 0.0;
    double accuracy = 0.0;
    double regret_signed = 0.0;
    double regret_clamped = 0.0;
};

inline std::string format_number(double v) {
    std::ostringstream os;
    os << std::setprecision(10) << v;
    return os.str();
}

inline void write_metric_rows(std::ostream& os, const std::vector<MetricRow>& rows, char sep = '\t') {
    os << "method" << sep << "group" << sep << "mean_margin" << sep << "accuracy" << sep << "regret_signed"
       << sep << "regret_clamped" << '\n';
    for (const auto& r : rows)
        os << r.method << sep << r.group << sep << format_number(r.mean_margin) << sep
           << format_number(r.accuracy) << sep << format_number(r.regret_signed) << sep
           << format_number(r.regret_clamped) << '\n';
}

}  // namespace hetpref
