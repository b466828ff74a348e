#pragma once

// Identifiability checks: binary comparisons cannot tell a symmetric +/-beta
// mixture from indifference, three-item choices can, and a single user's
// beta is recoverable from enough diverse binary comparisons.

#include "hetpref/choice.hpp"
#include "hetpref/core.hpp"
#include "hetpref/data_gen.hpp"
#include "hetpref/em.hpp"
#include "hetpref/metrics.hpp"
#include "hetpref/random.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace hetpref {

/// Choice sets, each an n_items x d matrix of features.
struct FeatureGrid {
    std::size_t n_items = 2;
    std::vector<Matrix> sets;

    Eigen::Index dim() const { return sets.empty() ? 0 : sets.front().cols(); }

    void validate() const {
        if (sets.empty()) throw DataError("empty feature grid");
        for (const auto& s : sets)
            if (s.rows() != static_cast<Eigen::Index>(n_items) || s.cols() != dim() || !s.allFinite())
                throw DataError("feature grid sets must share n_items and dimension");
    }
};

inline constexpr std::array<double, 5> kLatticeLevels{-1.0, -0.5, 0.0, 0.5, 1.0};

/// Lattice {-1, -.5, 0, .5, 1}^(n_items*d). When it has more than
/// `max_sets` points, `max_sets` lattice points are drawn at random instead.
inline FeatureGrid lattice_grid(std::size_t d, std::size_t n_items, std::size_t max_sets = 10000,
                                std::uint64_t seed = 0) {
    if (d < 1 || n_items < 2 || max_sets < 1) throw ConfigError("lattice grid needs d >= 1, n_items >= 2");
    const std::size_t coords = d * n_items;
    const std::size_t L = kLatticeLevels.size();
    std::uint64_t total = 1;
    bool full = true;
    for (std::size_t c = 0; c < coords && full; ++c) {
        total *= L;
        full = total <= max_sets;
    }
    FeatureGrid g{n_items, {}};
    auto fill = [&](auto&& level_of) {
        Matrix s(static_cast<Eigen::Index>(n_items), static_cast<Eigen::Index>(d));
        for (std::size_t c = 0; c < coords; ++c)
            s(static_cast<Eigen::Index>(c / d), static_cast<Eigen::Index>(c % d)) = kLatticeLevels[level_of(c)];
        g.sets.push_back(std::move(s));
    };
    if (full) {
        for (std::uint64_t idx = 0; idx < total; ++idx) {
            std::uint64_t rest = idx;
            std::vector<std::size_t> digits(coords);
            for (std::size_t c = 0; c < coords; ++c) {
                digits[c] = static_cast<std::size_t>(rest % L);
                rest /= L;
            }
            fill([&](std::size_t c) { return digits[c]; });
        }
    } else {
        Rng rng = Rng::substream(seed, "lattice");
        for (std::size_t i = 0; i < max_sets; ++i) fill([&](std::size_t) { return rng.below(L); });
    }
    return g;
}

/// Features uniform on [-1, 1].
inline FeatureGrid random_grid(std::size_t d, std::size_t n_items, std::size_t count, Rng& rng) {
    if (d < 1 || n_items < 2 || count < 1) throw ConfigError("random grid needs d >= 1, n_items >= 2, count >= 1");
    FeatureGrid g{n_items, {}};
    for (std::size_t i = 0; i < count; ++i) {
        Matrix s(static_cast<Eigen::Index>(n_items), static_cast<Eigen::Index>(d));
        for (Eigen::Index r = 0; r < s.rows(); ++r)
            for (Eigen::Index c = 0; c < s.cols(); ++c) s(r, c) = 2.0 * rng.uniform() - 1.0;
        g.sets.push_back(std::move(s));
    }
    return g;
}

/// max over the grid of |P(first item) - 0.5| under `mix`.
inline double binary_confusion_check(const DiscreteMixture& mix, const FeatureGrid& grid) {
    grid.validate();
    if (grid.n_items != 2) throw DataError("binary confusion check needs a binary grid");
    double worst = 0.0;
    for (const auto& s : grid.sets) worst = std::max(worst, std::abs(mixture_choice_prob(mix, s, 0) - 0.5));
    return worst;
}

/// Same for the symmetric mixture {(+beta, 0.5), (-beta, 0.5)}.
inline double binary_confusion_check(const RewardVector& beta, const FeatureGrid& grid) {
    return binary_confusion_check(DiscreteMixture::symmetric(beta.beta), grid);
}

/// max over grid sets and items of |P0(item) - P1(item)|, any set size.
inline double choice_gap(const DiscreteMixture& f0, const DiscreteMixture& f1, const FeatureGrid& grid) {
    grid.validate();
    double worst = 0.0;
    for (const auto& s : grid.sets)
        for (std::size_t i = 0; i < grid.n_items; ++i)
            worst = std::max(worst, std::abs(mixture_choice_prob(f0, s, i) - mixture_choice_prob(f1, s, i)));
    return worst;
}

inline double ternary_gap(const DiscreteMixture& f0, const DiscreteMixture& f1, const FeatureGrid& grid) {
    if (grid.n_items != 3) throw DataError("ternary gap needs a grid of three-item sets");
    return choice_gap(f0, f1, grid);
}

/// Rows of U are feature differences psi(y1) - psi(y2); p the probability
/// that y1 wins.
struct ComparisonSystem {
    Matrix U;
    Vector p;
};

class RankDeficientError : public DataError {
public:
    RankDeficientError(std::size_t deficiency, std::size_t d)
        : DataError("comparison matrix is rank deficient: " + std::to_string(deficiency) + " of " +
                    std::to_string(d) + " directions unidentified"),
          deficiency_(deficiency) {}

    std::size_t deficiency() const { return deficiency_; }

private:
    std::size_t deficiency_;
};

struct Recovery {
    RewardVector beta;
    double residual = 0.0;  // max |U beta - logit(p)|
    bool consistent = true;
};

/// Least-squares solution of U beta = logit(p).
inline Recovery recover_beta(const ComparisonSystem& sys, double tol = 1e-8) {
    const auto m = sys.U.rows();
    const auto d = sys.U.cols();
    if (d < 1 || m < 1) throw DataError("empty comparison system");
    if (sys.p.size() != m) throw DataError("one probability per comparison required");
    if (!sys.U.allFinite()) throw DataError("non-finite comparison features");
    for (Eigen::Index i = 0; i < m; ++i)
        if (!(sys.p(i) > 0.0 && sys.p(i) < 1.0)) throw DataError("comparison probabilities must lie in (0, 1)");

    Eigen::JacobiSVD<Matrix> svd(sys.U, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector& sv = svd.singularValues();
    const double cutoff = 1e-10 * (sv.size() ? sv(0) : 0.0);
    std::size_t rank = 0;
    for (Eigen::Index i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff) ++rank;
    if (rank < static_cast<std::size_t>(d) || sv(0) == 0.0)
        throw RankDeficientError(static_cast<std::size_t>(d) - rank, static_cast<std::size_t>(d));

    const Vector y = (sys.p.array() / (1.0 - sys.p.array())).log().matrix();
    Recovery out;
    out.beta.beta = svd.solve(y);
    out.residual = (sys.U * out.beta.beta - y).lpNorm<Eigen::Infinity>();
    out.consistent = out.residual <= tol * std::max(1.0, y.lpNorm<Eigen::Infinity>());
    return out;
}

struct GapChecks {
    double binary_confusion = 0.0;  // symmetric +/-beta pair on a binary lattice
    double binary_gap = 0.0;        // pair mixture vs indifference, binary sets
    double ternary_gap = 0.0;       // pair mixture vs indifference, ternary sets
    double canonical_ternary_gap = 0.0;  // d = 1, {(+1, .5), (-1, .5)} vs {(0, 1)}
};

struct IdentifyReport {
    std::string mode;  // "binary" or "ternary"
    double eta_error = 0.0;
    std::vector<double> alignments;  // per true type, cosine with matched policy
    std::vector<std::size_t> matching;  // true type -> recovered component
    std::map<std::string, double> accuracies;
    GapChecks gap_checks;
    bool zero_heterogeneity = false;
    std::vector<std::string> assumptions;
    MixtureState mixture;
};

inline double cosine(const Vector& a, const Vector& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return a.dot(b) / (na * nb);
}

/// Permutation of components maximizing the summed cosine with the true
/// types (first in lexicographic order on ties).
inline std::vector<std::size_t> best_matching(const std::vector<LinearPolicy>& recovered,
                                              const std::vector<RewardVector>& truth) {
    if (recovered.size() != truth.size()) throw DataError("matching needs equally many components and types");
    std::vector<std::size_t> perm(truth.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<std::size_t> best = perm;
    double best_score = -std::numeric_limits<double>::infinity();
    do {
        double s = 0.0;
        for (std::size_t k = 0; k < truth.size(); ++k) s += cosine(recovered[perm[k]].theta, truth[k].beta);
        if (s > best_score) {
            best_score = s;
            best = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

/// Index pair (i, j) with beta_i = -beta_j != 0, if any.
inline std::optional<std::pair<std::size_t, std::size_t>> find_opposed_pair(const LatentTypeSpec& types) {
    for (std::size_t i = 0; i < types.size(); ++i)
        for (std::size_t j = i + 1; j < types.size(); ++j) {
            const Vector& a = types.betas[i].beta;
            if (a.norm() > 0.0 && (a + types.betas[j].beta).norm() <= 1e-12 * a.norm()) return std::pair{i, j};
        }
    return std::nullopt;
}

inline bool all_types_equal(const LatentTypeSpec& types) {
    for (std::size_t k = 1; k < types.size(); ++k)
        if (types.betas[k].beta != types.betas[0].beta) return false;
    return true;
}

struct IdentifyOptions {
    std::size_t n_annotators = 1000;
    std::size_t records_per_annotator = 1;
    std::size_t items = 2;
    std::size_t eval_pairs_per_group = 500;
    std::size_t grid_sets = 10000;
};

inline GapChecks gap_checks_for(const LatentTypeSpec& types, std::size_t d, std::size_t grid_sets,
                                std::uint64_t seed) {
    GapChecks g;
    {
        const auto grid = lattice_grid(1, 3, grid_sets, seed);
        g.canonical_ternary_gap =
            ternary_gap(DiscreteMixture::symmetric(Vector::Ones(1)), DiscreteMixture::point(Vector::Zero(1)), grid);
    }
    const auto pair = find_opposed_pair(types);
    if (!pair) return g;
    const Vector& beta = types.betas[pair->first].beta;
    const auto pooled = DiscreteMixture::symmetric(beta);
    const auto null = DiscreteMixture::point(Vector::Zero(static_cast<Eigen::Index>(d)));
    const auto bin = lattice_grid(d, 2, grid_sets, seed);
    g.binary_confusion = binary_confusion_check(RewardVector{beta}, bin);
    g.binary_gap = choice_gap(pooled, null, bin);
    g.ternary_gap = ternary_gap(pooled, null, lattice_grid(d, 3, grid_sets, seed));
    return g;
}

/// Simulates annotators with the world's types, fits EM-DPO with one
/// component per type and scores recovery. Use the same `seed` for a binary
/// and a ternary run to compare them on identical draws.
inline IdentifyReport identifiability_experiment(const World& world, const IdentifyOptions& opt, std::uint64_t seed,
                                                 EmConfig em) {
    if (opt.items != 2 && opt.items != 3) throw ConfigError("identifiability runs use 2 or 3 items per choice");
    const auto& types = world.types;
    types.validate(world.universe.dim());
    IdentifyReport rep;
    rep.mode = opt.items == 2 ? "binary" : "ternary";
    rep.zero_heterogeneity = all_types_equal(types);
    if (!rep.zero_heterogeneity && !find_opposed_pair(types))
        throw ConfigError("world needs a +/-beta pair of latent types");

    Rng data_rng = Rng::substream(seed, "identify-data");
    Rng eval_rng = Rng::substream(seed, "identify-eval");
    const auto labeled =
        gen_annotators(world, GeneratorConfig{opt.n_annotators, {opt.records_per_annotator}, opt.items}, data_rng);
    const auto eval = gen_eval_pairs(world, opt.eval_pairs_per_group, eval_rng);

    em.K = types.size();
    em.seed = seed;
    rep.mixture = run_em(labeled.data, world.sft, world.universe, em);

    rep.matching = best_matching(rep.mixture.policies, types.betas);
    for (std::size_t k = 0; k < types.size(); ++k) {
        const std::size_t c = rep.matching[k];
        rep.alignments.push_back(cosine(rep.mixture.policies[c].theta, types.betas[k].beta));
        rep.eta_error = std::max(rep.eta_error, std::abs(rep.mixture.eta(static_cast<Eigen::Index>(c)) -
                                                         types.mixing(static_cast<Eigen::Index>(k))));
    }
    for (std::size_t g = 0; g < eval.groups.size(); ++g) {
        const auto best = max_mean_margin(rep.mixture.policies, world.sft, world.universe, eval.groups[g], em.train.beta_kl);
        rep.accuracies[eval.group_names[g]] =
            accuracy(rep.mixture.policies[best.index], world.sft, world.universe, eval.groups[g], em.train.beta_kl);
    }
    rep.gap_checks = gap_checks_for(types, world.universe.dim(), opt.grid_sets, seed);
    rep.assumptions = {
        "mixing distribution has finitely many atoms, so every moment is finite (Carleman condition holds)",
        "feature support straddles zero in every coordinate (lattice over {-1,-0.5,0,0.5,1})",
        "rewards are linear in the features with the logit choice model",
    };
    return rep;
}

}  // namespace hetpref
