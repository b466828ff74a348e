#pragma once

// Ground-truth annotator choice models: Bradley-Terry pairs, multinomial
// logit over a choice set, and discrete random-coefficient logit mixtures.

#include "hetpref/core.hpp"
#include "hetpref/random.hpp"

#include <cmath>
#include <initializer_list>
#include <stdexcept>
#include <vector>

namespace hetpref {

/// Linear annotator reward r(x,y) = beta . psi(x,y).
struct RewardVector {
    Vector beta;

    double reward(const Eigen::Ref<const Vector>& features) const { return beta.dot(features); }
};

/// Discrete distribution over reward vectors.
class DiscreteMixture {
public:
    struct Atom {
        RewardVector reward;
        double weight;
    };

    explicit DiscreteMixture(std::vector<Atom> atoms) : atoms_(std::move(atoms)) {
        if (atoms_.empty()) throw std::invalid_argument("mixture needs at least one atom");
        double total = 0.0;
        const auto d = atoms_.front().reward.beta.size();
        for (const auto& a : atoms_) {
            if (!(a.weight >= 0.0)) throw std::invalid_argument("mixture weights must be >= 0");
            if (a.reward.beta.size() != d) throw std::invalid_argument("mixture atoms differ in dimension");
            if (!a.reward.beta.allFinite()) throw std::invalid_argument("non-finite mixture atom");
            total += a.weight;
        }
        if (std::abs(total - 1.0) > 1e-12) throw std::invalid_argument("mixture weights must sum to 1");
    }

    /// Point mass at beta.
    static DiscreteMixture point(Vector beta) { return DiscreteMixture({{{std::move(beta)}, 1.0}}); }

    /// {(+beta, w), (-beta, 1 - w)}.
    static DiscreteMixture symmetric(const Vector& beta, double w = 0.5) {
        return DiscreteMixture({{{beta}, w}, {{-beta}, 1.0 - w}});
    }

    const std::vector<Atom>& atoms() const { return atoms_; }
    Eigen::Index dim() const { return atoms_.front().reward.beta.size(); }

private:
    std::vector<Atom> atoms_;
};

inline double sigmoid(double t) {
    return t >= 0.0 ? 1.0 / (1.0 + std::exp(-t)) : std::exp(t) / (1.0 + std::exp(t));
}

/// P(item 1 preferred over item 2) = sigma(r1 - r2).
inline double bt_pair_prob(double r1, double r2) {
    if (!std::isfinite(r1) || !std::isfinite(r2)) throw std::invalid_argument("non-finite reward");
    return sigmoid(r1 - r2);
}

/// Softmax of the rewards of a choice set.
inline Vector logit_choice_probs(const Eigen::Ref<const Vector>& rewards) {
    if (rewards.size() < 2) throw std::invalid_argument("choice set needs at least 2 items");
    if (!rewards.allFinite()) throw std::invalid_argument("non-finite reward");
    return softmax(rewards);
}

inline Vector logit_choice_probs(std::initializer_list<double> rewards) {
    Vector v(static_cast<Eigen::Index>(rewards.size()));
    Eigen::Index i = 0;
    for (double r : rewards) v(i++) = r;
    return logit_choice_probs(v);
}

/// Rows of `items` are the features of the choice set.
inline double mixture_choice_prob(const DiscreteMixture& mix, const Eigen::Ref<const Matrix>& items,
                                  std::size_t chosen) {
    if (items.rows() < 2) throw std::invalid_argument("choice set needs at least 2 items");
    if (items.cols() != mix.dim()) throw std::invalid_argument("feature dimension mismatch");
    if (chosen >= static_cast<std::size_t>(items.rows()))
        throw std::invalid_argument("chosen index out of range");
    double p = 0.0;
    for (const auto& atom : mix.atoms()) {
        const Vector rewards = items * atom.reward.beta;
        p += atom.weight * logit_choice_probs(rewards)(static_cast<Eigen::Index>(chosen));
    }
    return p;
}

/// Inverse-CDF draw of a winner index from the logit model.
inline std::size_t sample_choice(Rng& rng, const Eigen::Ref<const Vector>& rewards) {
    const Vector p = logit_choice_probs(rewards);
    const double u = rng.uniform();
    double cdf = 0.0;
    for (Eigen::Index i = 0; i + 1 < p.size(); ++i) {
        cdf += p(i);
        if (u < cdf) return static_cast<std::size_t>(i);
    }
    return static_cast<std::size_t>(p.size() - 1);
}

}  // namespace hetpref
