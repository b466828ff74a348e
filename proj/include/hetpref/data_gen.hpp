#pragma once

// Synthetic worlds and annotator simulation.
//
// An annotator first draws a latent type, then answers m choice tasks. Each
// task draws a prompt uniformly from the training prompts (independent of
// the type) and a choice set; the winner follows the type's logit model.

#include "hetpref/choice.hpp"
#include "hetpref/core.hpp"
#include "hetpref/dpo.hpp"
#include "hetpref/kmeans.hpp"
#include "hetpref/random.hpp"

#include <array>
#include <cstdio>
#include <string>
#include <vector>

namespace hetpref {

struct LatentTypeSpec {
    std::vector<std::string> names;
    std::vector<RewardVector> betas;
    Vector mixing;

    std::size_t size() const { return betas.size(); }

    void validate(std::size_t d) const {
        if (betas.empty()) throw ConfigError("world needs at least one latent type");
        if (names.size() != betas.size() || mixing.size() != static_cast<Eigen::Index>(betas.size()))
            throw ConfigError("latent types need one name, beta and mixing weight each");
        for (const auto& b : betas)
            if (static_cast<std::size_t>(b.beta.size()) != d || !b.beta.allFinite())
                throw ConfigError("type vector dimension must match the universe");
        if ((mixing.array() < 0.0).any() || std::abs(mixing.sum() - 1.0) > 1e-12)
            throw ConfigError("mixing weights must lie in the simplex");
    }
};

/// How a choice task turns into a record.
enum class ChoiceProtocol {
    subset_logit,          // draw k candidates, winner by logit within them
    full_set_then_reject,  // winner by logit over all candidates, k-1 rejected uniformly
};

struct World {
    std::string kind;
    ResponseUniverse universe;
    ReferencePolicy sft;
    LatentTypeSpec types;
    ChoiceProtocol protocol = ChoiceProtocol::subset_logit;
    std::vector<PromptId> train_prompts;
    std::vector<PromptId> eval_prompts;
};

struct GeneratorConfig {
    std::size_t n_annotators = 100;
    std::vector<std::size_t> records_per_annotator{1};  // one entry broadcasts
    std::size_t items_per_choice = 2;

    std::size_t records_for(std::size_t i) const {
        return records_per_annotator.size() == 1 ? records_per_annotator.front() : records_per_annotator.at(i);
    }

    void validate() const {
        if (n_annotators < 1) throw ConfigError("n_annotators must be >= 1");
        if (records_per_annotator.empty() ||
            (records_per_annotator.size() != 1 && records_per_annotator.size() != n_annotators))
            throw ConfigError("records_per_annotator must be a constant or one count per annotator");
        for (auto m : records_per_annotator)
            if (m < 1) throw ConfigError("records per annotator must be >= 1");
        if (items_per_choice < 2) throw ConfigError("items_per_choice must be >= 2");
    }
};

namespace detail {

inline std::vector<PromptId> iota_prompts(std::size_t begin, std::size_t end) {
    std::vector<PromptId> v;
    for (std::size_t i = begin; i < end; ++i) v.push_back(i);
    return v;
}

inline std::string indexed(const char* prefix, std::size_t i, int width) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s%0*zu", prefix, width, i);
    return buf;
}

/// Splits prompts [0, n) into train = first n - n_eval and eval = the rest;
/// with n_eval == 0 both use every prompt.
inline void split_prompts(World& w, std::size_t n, std::size_t n_eval) {
    if (n_eval >= n) throw ConfigError("evaluation split must leave training prompts");
    w.train_prompts = iota_prompts(0, n - n_eval);
    w.eval_prompts = n_eval == 0 ? iota_prompts(0, n) : iota_prompts(n - n_eval, n);
}

}  // namespace detail

struct MpiOptions {
    std::size_t phrases_per_score = 66;  // per (trait, score) cell: 5 * 3 * 66 = 990 phrases
    std::size_t paraphrases = 50;        // instruction prompts sharing the phrase pool
    std::size_t eval_paraphrases = 10;
};

/// Five-trait personality world. Each phrase scores -1, 0 or +1 on one
/// trait, so its feature is a signed one-hot (or zero) vector; the three
/// personalities P1 = (3, 0, 2, 0, -2.5), P2 = -P1, P3 = (0, 2, 0, 2, 0)
/// are drawn with probabilities 0.3, 0.3, 0.4.
inline World gen_mpi_world(const MpiOptions& opt = {}) {
    static constexpr std::array<const char*, 5> traits{"O", "C", "E", "A", "N"};
    static constexpr std::array<int, 3> scores{1, 0, -1};
    if (opt.phrases_per_score < 1 || opt.paraphrases < 1) throw ConfigError("MPI world needs phrases and prompts");
    std::vector<Candidate> phrases;
    for (std::size_t t = 0; t < traits.size(); ++t)
        for (int s : scores)
            for (std::size_t i = 0; i < opt.phrases_per_score; ++i) {
                Vector f = Vector::Zero(5);
                f(static_cast<Eigen::Index>(t)) = s;
                const char* sign = s > 0 ? "+" : (s < 0 ? "-" : "0");
                phrases.push_back({std::string(traits[t]) + sign + detail::indexed("", i, 3), f});
            }
    std::vector<Prompt> prompts;
    for (std::size_t p = 0; p < opt.paraphrases; ++p)
        prompts.push_back({detail::indexed("instr", p, 2), phrases});

    World w;
    w.kind = "mpi";
    w.universe = ResponseUniverse(std::move(prompts));
    w.sft = ReferencePolicy::uniform(w.universe);
    Vector p1(5), p3(5);
    p1 << 3, 0, 2, 0, -2.5;
    p3 << 0, 2, 0, 2, 0;
    w.types.names = {"P1", "P2", "P3"};
    w.types.betas = {{p1}, {-p1}, {p3}};
    w.types.mixing = Vector(3);
    w.types.mixing << 0.3, 0.3, 0.4;
    w.protocol = ChoiceProtocol::subset_logit;
    detail::split_prompts(w, opt.paraphrases, opt.eval_paraphrases);
    return w;
}

struct OpinionOptions {
    std::size_t rephrasings = 11;  // prompt variants per question
    std::size_t eval_rephrasings = 3;
};

/// Polling world: question q, option o has one-hot feature e_{q*O + o}; a
/// group's type vector holds log option probabilities, so the logit model on
/// a question's full option set reproduces the group's distribution. The
/// winner is drawn from all options, then rejected options are drawn
/// uniformly among the rest.
///
/// group_dists[g][q] is group g's distribution over the options of question q.
inline World gen_opinion_world(std::size_t n_questions, std::size_t options_per_question,
                               const std::vector<std::vector<Vector>>& group_dists, const Vector& mixing,
                               std::vector<std::string> group_names = {}, const OpinionOptions& opt = {}) {
    if (n_questions < 1 || options_per_question < 2) throw ConfigError("opinion world needs questions with >= 2 options");
    const std::size_t G = group_dists.size();
    if (G < 1 || mixing.size() != static_cast<Eigen::Index>(G)) throw ConfigError("one mixing weight per group required");
    if (group_names.empty())
        for (std::size_t g = 0; g < G; ++g) group_names.push_back(detail::indexed("G", g, 1));
    const std::size_t d = n_questions * options_per_question;

    LatentTypeSpec types;
    types.names = std::move(group_names);
    types.mixing = mixing;
    for (std::size_t g = 0; g < G; ++g) {
        if (group_dists[g].size() != n_questions) throw ConfigError("one distribution per question required");
        Vector beta(static_cast<Eigen::Index>(d));
        for (std::size_t q = 0; q < n_questions; ++q) {
            const Vector& p = group_dists[g][q];
            if (p.size() != static_cast<Eigen::Index>(options_per_question))
                throw ConfigError("distribution size must equal options_per_question");
            if (!(p.array() > 0.0).all())
                throw ConfigError("opinion distributions need strictly positive option probabilities");
            if (std::abs(p.sum() - 1.0) > 1e-9) throw ConfigError("opinion distributions must sum to 1");
            beta.segment(static_cast<Eigen::Index>(q * options_per_question),
                         static_cast<Eigen::Index>(options_per_question)) = p.array().log();
        }
        types.betas.push_back({beta});
    }

    std::vector<Prompt> prompts;
    for (std::size_t q = 0; q < n_questions; ++q) {
        std::vector<Candidate> options;
        for (std::size_t o = 0; o < options_per_question; ++o) {
            Vector f = Vector::Zero(static_cast<Eigen::Index>(d));
            f(static_cast<Eigen::Index>(q * options_per_question + o)) = 1.0;
            options.push_back({detail::indexed("opt", o, 1), f});
        }
        for (std::size_t r = 0; r < opt.rephrasings; ++r)
            prompts.push_back({detail::indexed("q", q, 3) + detail::indexed("_r", r, 2), options});
    }

    World w;
    w.kind = "opinion";
    w.universe = ResponseUniverse(std::move(prompts));
    w.sft = ReferencePolicy::uniform(w.universe);
    w.types = std::move(types);
    w.types.validate(d);
    w.protocol = ChoiceProtocol::full_set_then_reject;
    // Rephrasings of each question are split train/eval.
    if (opt.eval_rephrasings >= opt.rephrasings) throw ConfigError("evaluation split must leave training rephrasings");
    for (std::size_t q = 0; q < n_questions; ++q)
        for (std::size_t r = 0; r < opt.rephrasings; ++r) {
            const PromptId x = q * opt.rephrasings + r;
            if (r < opt.rephrasings - opt.eval_rephrasings) w.train_prompts.push_back(x);
            if (opt.eval_rephrasings == 0 || r >= opt.rephrasings - opt.eval_rephrasings) w.eval_prompts.push_back(x);
        }
    return w;
}

struct FeatureWorldOptions {
    std::size_t n_prompts = 20;
    std::size_t candidates_per_prompt = 8;
    std::size_t d = 3;
    std::size_t eval_prompts = 0;
    std::uint64_t feature_seed = 1;
};

/// Prompts whose candidate features are i.i.d. uniform on [-1, 1]^d, with
/// the given latent types. A pair {beta, -beta} makes the adversarial world.
inline World gen_feature_world(const FeatureWorldOptions& opt, LatentTypeSpec types) {
    if (opt.d < 1 || opt.n_prompts < 1 || opt.candidates_per_prompt < 2) throw ConfigError("invalid feature world");
    Rng rng(opt.feature_seed);
    std::vector<Prompt> prompts;
    for (std::size_t p = 0; p < opt.n_prompts; ++p) {
        Prompt prompt{detail::indexed("x", p, 3), {}};
        for (std::size_t c = 0; c < opt.candidates_per_prompt; ++c) {
            Vector f(static_cast<Eigen::Index>(opt.d));
            for (Eigen::Index j = 0; j < f.size(); ++j) f(j) = 2.0 * rng.uniform() - 1.0;
            prompt.candidates.push_back({detail::indexed("y", c, 2), f});
        }
        prompts.push_back(std::move(prompt));
    }
    World w;
    w.kind = "feature";
    w.universe = ResponseUniverse(std::move(prompts));
    w.sft = ReferencePolicy::uniform(w.universe);
    types.validate(opt.d);
    w.types = std::move(types);
    detail::split_prompts(w, opt.n_prompts, opt.eval_prompts);
    return w;
}

/// Inverse-CDF draw from a probability vector.
inline std::size_t sample_categorical(Rng& rng, const Vector& probs) {
    const double u = rng.uniform() * probs.sum();
    double acc = 0.0;
    for (Eigen::Index i = 0; i + 1 < probs.size(); ++i) {
        acc += probs(i);
        if (u < acc) return static_cast<std::size_t>(i);
    }
    return static_cast<std::size_t>(probs.size() - 1);
}

/// One choice task for type beta on prompt x.
inline PreferenceRecord simulate_choice(const World& world, const Vector& beta, PromptId x, std::size_t items,
                                        AnnotatorId annotator, Rng& rng) {
    const Matrix& F = world.universe.feature_matrix(x);
    const std::size_t n = world.universe.num_candidates(x);
    if (items > n) throw ConfigError("choice set larger than the candidate pool");
    PreferenceRecord r;
    r.annotator = annotator;
    r.prompt = x;
    if (world.protocol == ChoiceProtocol::subset_logit) {
        const auto set = rng.sample_without_replacement(n, items);
        Vector rewards(static_cast<Eigen::Index>(items));
        for (std::size_t j = 0; j < items; ++j) rewards(static_cast<Eigen::Index>(j)) = F.row(static_cast<Eigen::Index>(set[j])).dot(beta);
        const std::size_t win = sample_choice(rng, rewards);
        r.winner = set[win];
        for (std::size_t j = 0; j < items; ++j)
            if (j != win) r.rejected.push_back(set[j]);
    } else {
        r.winner = sample_choice(rng, F * beta);
        const auto others = rng.sample_without_replacement(n - 1, items - 1);
        for (std::size_t o : others) r.rejected.push_back(o < r.winner ? o : o + 1);
    }
    return r;
}

inline LabeledDataset gen_annotators(const World& world, const GeneratorConfig& config, Rng& rng) {
    config.validate();
    world.types.validate(world.universe.dim());
    if (world.train_prompts.empty()) throw ConfigError("world has no training prompts");
    LabeledDataset out;
    out.type_names = world.types.names;
    std::vector<std::string> names;
    std::vector<PreferenceRecord> records;
    for (std::size_t i = 0; i < config.n_annotators; ++i) {
        const std::size_t z = sample_categorical(rng, world.types.mixing);
        out.true_labels.push_back(z);
        names.push_back(detail::indexed("a", i, 5));
        for (std::size_t j = 0; j < config.records_for(i); ++j) {
            const PromptId x = world.train_prompts[rng.below(world.train_prompts.size())];
            records.push_back(simulate_choice(world, world.types.betas[z].beta, x, config.items_per_choice, i, rng));
        }
    }
    out.data = AnnotatorDataset(std::move(names), std::move(records));
    return out;
}

/// Binary evaluation pairs per latent type, drawn on the evaluation prompts.
inline EvalPairSet gen_eval_pairs(const World& world, std::size_t pairs_per_group, Rng& rng) {
    if (pairs_per_group < 1) throw ConfigError("pairs_per_group must be >= 1");
    if (world.eval_prompts.empty()) throw ConfigError("world has no evaluation prompts");
    EvalPairSet out;
    out.group_names = world.types.names;
    for (std::size_t k = 0; k < world.types.size(); ++k) {
        std::vector<PreferenceRecord> g;
        for (std::size_t j = 0; j < pairs_per_group; ++j) {
            const PromptId x = world.eval_prompts[rng.below(world.eval_prompts.size())];
            g.push_back(simulate_choice(world, world.types.betas[k].beta, x, 2, k, rng));
        }
        out.groups.push_back(std::move(g));
    }
    return out;
}

/// Mean feature of the annotator's preferred responses.
inline FeatureVector annotator_feature(const AnnotatorDataset& dataset, const ResponseUniverse& universe,
                                       AnnotatorId a) {
    const auto& idx = dataset.records_of(a);
    Vector f = Vector::Zero(static_cast<Eigen::Index>(universe.dim()));
    for (std::size_t r : idx) {
        const auto& rec = dataset.records()[r];
        f += universe.features(rec.prompt, rec.winner);
    }
    return f / static_cast<double>(idx.size());
}

inline std::vector<FeatureVector> annotator_features(const AnnotatorDataset& dataset,
                                                     const ResponseUniverse& universe) {
    std::vector<FeatureVector> out;
    out.reserve(dataset.num_annotators());
    for (AnnotatorId a = 0; a < dataset.num_annotators(); ++a) out.push_back(annotator_feature(dataset, universe, a));
    return out;
}

/// Per-record weights selecting the annotators with the given label.
inline std::vector<double> label_weights(const AnnotatorDataset& dataset, const std::vector<std::size_t>& labels,
                                         std::size_t k) {
    std::vector<double> w(dataset.num_records(), 0.0);
    for (std::size_t r = 0; r < dataset.num_records(); ++r)
        w[r] = labels[dataset.records()[r].annotator] == k ? 1.0 : 0.0;
    return w;
}

/// Fits one unweighted DPO policy per label group. Empty groups keep pi_ref.
inline std::vector<LinearPolicy> fit_per_label(const AnnotatorDataset& dataset, const std::vector<std::size_t>& labels,
                                               std::size_t K, const ReferencePolicy& sft,
                                               const ResponseUniverse& universe, const TrainConfig& config) {
    std::vector<LinearPolicy> out;
    for (std::size_t k = 0; k < K; ++k) {
        WeightedDataset data{dataset.records(), label_weights(dataset, labels, k)};
        if (data.total_weight() == 0.0) {
            out.push_back(LinearPolicy::zero(universe.dim()));
            continue;
        }
        out.push_back(train_weighted_dpo(LinearPolicy::zero(universe.dim()), sft, universe, data, config).policy);
    }
    return out;
}

struct ClusterResult {
    std::vector<LinearPolicy> policies;
    std::vector<std::size_t> labels;
};

/// k-means on annotator features, then DPO per cluster.
inline ClusterResult cluster_dpo_baseline(const AnnotatorDataset& dataset, const ResponseUniverse& universe,
                                          const ReferencePolicy& sft, std::size_t K, const TrainConfig& config,
                                          Rng& rng) {
    ClusterResult out;
    out.labels = kmeans(annotator_features(dataset, universe), K, rng).labels;
    out.policies = fit_per_label(dataset, out.labels, K, sft, universe, config);
    return out;
}

}  // namespace hetpref
