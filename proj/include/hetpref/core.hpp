#pragma once

// Response universes, reference/linear policies and preference records.
//
// Every probability in the library is computed exactly by enumerating the
// finite candidate set of a prompt. A linear policy tilts the reference
// distribution:
//
//   pi_theta(y|x) = pi_ref(y|x) * exp(theta . psi(x,y)) / Z_theta(x)
//
// so log(pi_theta / pi_ref) = theta . psi(x,y) - A_theta(x) with
// A_theta(x) = log sum_y' pi_ref(y'|x) exp(theta . psi(x,y')).

#include <Eigen/Dense>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace hetpref {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Preference feature vector psi(x,y).
using FeatureVector = Vector;

using PromptId = std::size_t;
using ResponseId = std::size_t;  // index into the prompt's candidate list
using AnnotatorId = std::size_t;

/// Malformed or inconsistent input data (unknown ids, bad records).
struct DataError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// Invalid experiment or algorithm configuration.
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// A checked runtime property of an algorithm did not hold.
struct InvariantViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// log(sum(exp(v))) with max subtraction. Entries may be -inf; an all -inf
/// (or empty) input yields -inf.
inline double log_sum_exp(const Eigen::Ref<const Vector>& v) {
    if (v.size() == 0) return -std::numeric_limits<double>::infinity();
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v.array() - m).exp().sum());
}

/// Softmax with max subtraction.
inline Vector softmax(const Eigen::Ref<const Vector>& v) {
    const double m = v.maxCoeff();
    Vector e = (v.array() - m).exp();
    return e / e.sum();
}

/// KL-regularization strength beta of the DPO objective.
class KlTemperature {
public:
    explicit KlTemperature(double beta = 0.1) : beta_(beta) {
        if (!(beta > 0.0) || !std::isfinite(beta))
            throw ConfigError("beta_kl must be positive and finite");
    }
    double value() const { return beta_; }

private:
    double beta_;
};

struct Candidate {
    std::string id;
    FeatureVector features;
};

struct Prompt {
    std::string id;
    std::vector<Candidate> candidates;
};

/// Finite set of prompts, each with >= 2 candidate responses carrying
/// features of a common dimension. Immutable after construction.
class ResponseUniverse {
public:
    ResponseUniverse() = default;

    explicit ResponseUniverse(std::vector<Prompt> prompts) : prompts_(std::move(prompts)) {
        if (prompts_.empty()) throw DataError("universe needs at least one prompt");
        dim_ = static_cast<std::size_t>(prompts_.front().candidates.empty()
                                            ? 0
                                            : prompts_.front().candidates.front().features.size());
        if (dim_ == 0) throw DataError("feature dimension must be >= 1");
        feature_mats_.reserve(prompts_.size());
        for (PromptId x = 0; x < prompts_.size(); ++x) {
            const Prompt& p = prompts_[x];
            if (p.candidates.size() < 2)
                throw DataError("prompt '" + p.id + "' has fewer than 2 candidates");
            if (!prompt_index_.emplace(p.id, x).second)
                throw DataError("duplicate prompt id '" + p.id + "'");
            Matrix F(p.candidates.size(), dim_);
            std::unordered_map<std::string, ResponseId> names;
            for (ResponseId y = 0; y < p.candidates.size(); ++y) {
                const Candidate& c = p.candidates[y];
                if (static_cast<std::size_t>(c.features.size()) != dim_)
                    throw DataError("non-uniform feature dimension at prompt '" + p.id + "'");
                if (!c.features.allFinite())
                    throw DataError("non-finite feature at prompt '" + p.id + "'");
                if (!names.emplace(c.id, y).second)
                    throw DataError("duplicate response id '" + c.id + "' in prompt '" + p.id + "'");
                F.row(static_cast<Eigen::Index>(y)) = c.features.transpose();
            }
            response_index_.push_back(std::move(names));
            feature_mats_.push_back(std::move(F));
        }
    }

    std::size_t dim() const { return dim_; }
    std::size_t num_prompts() const { return prompts_.size(); }
    std::size_t num_candidates(PromptId x) const { return prompt(x).candidates.size(); }

    const Prompt& prompt(PromptId x) const {
        if (x >= prompts_.size()) throw DataError("unknown prompt id " + std::to_string(x));
        return prompts_[x];
    }
    const std::vector<Prompt>& prompts() const { return prompts_; }

    /// Candidate features of prompt x as rows of a matrix.
    const Matrix& feature_matrix(PromptId x) const {
        prompt(x);
        return feature_mats_[x];
    }

    auto features(PromptId x, ResponseId y) const {
        check(x, y);
        return feature_mats_[x].row(static_cast<Eigen::Index>(y)).transpose();
    }

    void check(PromptId x, ResponseId y) const {
        if (y >= prompt(x).candidates.size())
            throw DataError("unknown response id " + std::to_string(y) + " for prompt '" +
                            prompts_[x].id + "'");
    }

    PromptId prompt_index(std::string_view name) const {
        auto it = prompt_index_.find(std::string(name));
        if (it == prompt_index_.end()) throw DataError("unknown prompt '" + std::string(name) + "'");
        return it->second;
    }

    ResponseId response_index(PromptId x, std::string_view name) const {
        prompt(x);
        auto it = response_index_[x].find(std::string(name));
        if (it == response_index_[x].end())
            throw DataError("unknown response '" + std::string(name) + "' for prompt '" +
                            prompts_[x].id + "'");
        return it->second;
    }

private:
    std::vector<Prompt> prompts_;
    std::size_t dim_ = 0;
    std::vector<Matrix> feature_mats_;
    std::unordered_map<std::string, PromptId> prompt_index_;
    std::vector<std::unordered_map<std::string, ResponseId>> response_index_;
};

/// Strictly positive per-prompt reference distribution pi_ref.
class ReferencePolicy {
public:
    ReferencePolicy() = default;

    ReferencePolicy(const ResponseUniverse& universe, std::vector<Vector> probs)
        : probs_(std::move(probs)) {
        if (probs_.size() != universe.num_prompts())
            throw DataError("reference policy must cover every prompt");
        logs_.reserve(probs_.size());
        for (PromptId x = 0; x < probs_.size(); ++x) {
            const Vector& p = probs_[x];
            if (static_cast<std::size_t>(p.size()) != universe.num_candidates(x))
                throw DataError("reference policy size mismatch at prompt '" +
                                universe.prompt(x).id + "'");
            if (!(p.array() > 0.0).all() || !p.allFinite())
                throw DataError("reference probabilities must be strictly positive");
            if (std::abs(p.sum() - 1.0) > 1e-12)
                throw DataError("reference probabilities must sum to 1 at prompt '" +
                                universe.prompt(x).id + "'");
            logs_.push_back(p.array().log().matrix());
        }
    }

    static ReferencePolicy uniform(const ResponseUniverse& universe) {
        std::vector<Vector> probs;
        probs.reserve(universe.num_prompts());
        for (PromptId x = 0; x < universe.num_prompts(); ++x) {
            const auto n = static_cast<Eigen::Index>(universe.num_candidates(x));
            probs.push_back(Vector::Constant(n, 1.0 / static_cast<double>(n)));
        }
        return ReferencePolicy(universe, std::move(probs));
    }

    const Vector& probs(PromptId x) const { return probs_.at(x); }
    const Vector& log_probs(PromptId x) const { return logs_.at(x); }
    double prob(PromptId x, ResponseId y) const { return probs_.at(x)(static_cast<Eigen::Index>(y)); }
    std::size_t num_prompts() const { return probs_.size(); }

private:
    std::vector<Vector> probs_;
    std::vector<Vector> logs_;
};

/// pi_theta(y|x) proportional to pi_ref(y|x) * exp(theta . psi(x,y)).
struct LinearPolicy {
    Vector theta;

    static LinearPolicy zero(std::size_t d) { return {Vector::Zero(static_cast<Eigen::Index>(d))}; }
};

inline void check_dim(const LinearPolicy& policy, const ResponseUniverse& universe) {
    if (static_cast<std::size_t>(policy.theta.size()) != universe.dim())
        throw DataError("policy dimension " + std::to_string(policy.theta.size()) +
                        " does not match universe dimension " + std::to_string(universe.dim()));
}

/// log(pi_theta(.|x) / pi_ref(.|x)) over all candidates of x.
inline Vector log_ratios(const LinearPolicy& policy, const ReferencePolicy& sft,
                         const ResponseUniverse& universe, PromptId x) {
    check_dim(policy, universe);
    const Vector scores = universe.feature_matrix(x) * policy.theta;
    const double normalizer = log_sum_exp(sft.log_probs(x) + scores);
    return scores.array() - normalizer;
}

/// Full distribution pi_theta(.|x).
inline Vector distribution(const LinearPolicy& policy, const ReferencePolicy& sft,
                           const ResponseUniverse& universe, PromptId x) {
    check_dim(policy, universe);
    const Vector logits = sft.log_probs(x) + universe.feature_matrix(x) * policy.theta;
    const Vector w = (logits.array() - logits.maxCoeff()).exp();
    return w / w.sum();
}

inline double policy_prob(const LinearPolicy& policy, const ReferencePolicy& sft,
                          const ResponseUniverse& universe, PromptId x, ResponseId y) {
    universe.check(x, y);
    return distribution(policy, sft, universe, x)(static_cast<Eigen::Index>(y));
}

inline double log_ratio(const LinearPolicy& policy, const ReferencePolicy& sft,
                        const ResponseUniverse& universe, PromptId x, ResponseId y) {
    universe.check(x, y);
    return log_ratios(policy, sft, universe, x)(static_cast<Eigen::Index>(y));
}

/// One demonstration: the winner was preferred over every rejected response.
struct PreferenceRecord {
    AnnotatorId annotator = 0;
    PromptId prompt = 0;
    ResponseId winner = 0;
    std::vector<ResponseId> rejected;

    std::size_t choice_size() const { return rejected.size() + 1; }
};

inline void validate(const PreferenceRecord& r, const ResponseUniverse& universe) {
    if (r.rejected.empty()) throw DataError("record has no rejected responses");
    universe.check(r.prompt, r.winner);
    for (std::size_t i = 0; i < r.rejected.size(); ++i) {
        universe.check(r.prompt, r.rejected[i]);
        if (r.rejected[i] == r.winner) throw DataError("winner appears among rejected responses");
        for (std::size_t j = 0; j < i; ++j)
            if (r.rejected[j] == r.rejected[i]) throw DataError("duplicate rejected response");
    }
}

/// Records grouped by annotator. Carries no latent labels; see LabeledDataset.
class AnnotatorDataset {
public:
    AnnotatorDataset() = default;

    AnnotatorDataset(std::vector<std::string> annotator_names, std::vector<PreferenceRecord> records)
        : names_(std::move(annotator_names)), records_(std::move(records)) {
        groups_.resize(names_.size());
        for (std::size_t r = 0; r < records_.size(); ++r) {
            const AnnotatorId a = records_[r].annotator;
            if (a >= names_.size())
                throw DataError("record references unknown annotator " + std::to_string(a));
            groups_[a].push_back(r);
        }
        for (std::size_t a = 0; a < names_.size(); ++a)
            if (groups_[a].empty()) throw DataError("annotator '" + names_[a] + "' has no records");
    }

    std::size_t num_annotators() const { return names_.size(); }
    std::size_t num_records() const { return records_.size(); }
    const std::vector<PreferenceRecord>& records() const { return records_; }
    const std::vector<std::string>& annotator_names() const { return names_; }

    /// Indices into records() belonging to annotator a (m_a entries).
    const std::vector<std::size_t>& records_of(AnnotatorId a) const {
        if (a >= groups_.size()) throw DataError("unknown annotator " + std::to_string(a));
        return groups_[a];
    }

    void validate(const ResponseUniverse& universe) const {
        for (const auto& r : records_) hetpref::validate(r, universe);
    }

private:
    std::vector<std::string> names_;
    std::vector<PreferenceRecord> records_;
    std::vector<std::vector<std::size_t>> groups_;
};

/// Dataset together with held-out latent type labels (evaluation only).
struct LabeledDataset {
    AnnotatorDataset data;
    std::vector<std::size_t> true_labels;  // per annotator, index into type_names
    std::vector<std::string> type_names;
};

/// Binary evaluation pairs grouped by true subgroup.
struct EvalPairSet {
    std::vector<std::string> group_names;
    std::vector<std::vector<PreferenceRecord>> groups;

    void validate(const ResponseUniverse& universe) const {
        if (group_names.size() != groups.size()) throw DataError("one name per evaluation group required");
        for (const auto& g : groups)
            for (const auto& r : g) {
                if (r.rejected.size() != 1) throw DataError("evaluation pairs must be binary");
                hetpref::validate(r, universe);
            }
    }
};

}  // namespace hetpref
