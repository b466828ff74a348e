#pragma once

#include "hetpref/hetpref.hpp"

#include <string>
#include <vector>

namespace fixture {

using namespace hetpref;

/// One prompt per matrix; rows are candidate features.
inline ResponseUniverse universe_from(const std::vector<Matrix>& prompts) {
    std::vector<Prompt> ps;
    for (std::size_t x = 0; x < prompts.size(); ++x) {
        Prompt p{"x" + std::to_string(x), {}};
        for (Eigen::Index y = 0; y < prompts[x].rows(); ++y)
            p.candidates.push_back({"y" + std::to_string(y), prompts[x].row(y).transpose()});
        ps.push_back(std::move(p));
    }
    return ResponseUniverse(std::move(ps));
}

inline Matrix column(std::initializer_list<double> v) {
    Matrix m(static_cast<Eigen::Index>(v.size()), 1);
    Eigen::Index i = 0;
    for (double x : v) m(i++, 0) = x;
    return m;
}

/// d = 1, one prompt, psi = (1, 0).
inline ResponseUniverse one_prompt_pair() { return universe_from({column({1.0, 0.0})}); }

inline Vector vec(std::initializer_list<double> v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    Eigen::Index i = 0;
    for (double x : v) out(i++) = x;
    return out;
}

inline Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    Matrix m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * (2.0 * rng.uniform() - 1.0);
    return m;
}

inline Vector random_vector(Rng& rng, Eigen::Index n, double scale = 1.0) {
    return random_matrix(rng, n, 1, scale).col(0);
}

/// Random universe with `n_prompts` prompts of `n_cand` candidates in R^d.
inline ResponseUniverse random_universe(Rng& rng, std::size_t n_prompts, std::size_t n_cand, std::size_t d) {
    std::vector<Matrix> ps;
    for (std::size_t x = 0; x < n_prompts; ++x)
        ps.push_back(random_matrix(rng, static_cast<Eigen::Index>(n_cand), static_cast<Eigen::Index>(d)));
    return universe_from(ps);
}

/// Two-type world with types +beta and -beta.
inline World two_type_world(std::size_t seed, const Vector& beta, double mix_first, std::size_t n_prompts = 20,
                            std::size_t candidates = 8, std::size_t eval_prompts = 10) {
    FeatureWorldOptions opt;
    opt.n_prompts = n_prompts;
    opt.candidates_per_prompt = candidates;
    opt.d = static_cast<std::size_t>(beta.size());
    opt.eval_prompts = eval_prompts;
    opt.feature_seed = seed;
    LatentTypeSpec types{{"P1", "P2"}, {{beta}, {-beta}}, vec({mix_first, 1.0 - mix_first})};
    return gen_feature_world(opt, types);
}

}  // namespace fixture
