#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hetpref;
using fixture::vec;

TEST(Lattice, FullEnumerationAndSampling) {
    const auto g = lattice_grid(1, 3);
    EXPECT_EQ(g.sets.size(), 125u);
    bool has_canonical = false;
    for (const auto& s : g.sets)
        if (s(0, 0) == 1.0 && s(1, 0) == 0.0 && s(2, 0) == -1.0) has_canonical = true;
    EXPECT_TRUE(has_canonical);
    const auto big = lattice_grid(5, 3, 1000, 7);
    EXPECT_EQ(big.sets.size(), 1000u);
    for (const auto& s : big.sets)
        for (Eigen::Index i = 0; i < s.size(); ++i)
            EXPECT_TRUE(std::find(kLatticeLevels.begin(), kLatticeLevels.end(), s.data()[i]) != kLatticeLevels.end());
    EXPECT_EQ(lattice_grid(5, 3, 1000, 7).sets[17], big.sets[17]);
}

TEST(BinaryConfusion, SymmetricMixturesAreBlind) {
    Rng rng(1);
    for (int t = 0; t < 100; ++t) {
        const auto d = static_cast<Eigen::Index>(1 + rng.below(8));
        const RewardVector beta{fixture::random_vector(rng, d, 5.0)};
        const auto grid = random_grid(static_cast<std::size_t>(d), 2, 200, rng);
        EXPECT_LT(binary_confusion_check(beta, grid), 1e-12);
    }
    EXPECT_EQ(binary_confusion_check(RewardVector{Vector::Zero(3)}, lattice_grid(3, 2)), 0.0);
}

TEST(BinaryConfusion, AsymmetricMixtureIsDetected) {
    const auto mix = DiscreteMixture::symmetric(vec({1.0, -0.5}), 0.7);
    const auto grid = lattice_grid(2, 2);
    // Oracle: the set ((1, 0), (0, 0)) alone gives 0.7 s(1) + 0.3 s(-1) - 0.5.
    const double s = 1.0 / (1.0 + std::exp(-1.0));
    const double one_set = 0.7 * s + 0.3 * (1.0 - s) - 0.5;
    EXPECT_GE(binary_confusion_check(mix, grid), one_set - 1e-15);
    EXPECT_GT(one_set, 0.0);
    EXPECT_THROW(binary_confusion_check(mix, lattice_grid(2, 3)), DataError);
}

TEST(TernaryGap, CanonicalSeparation) {
    const auto f0 = DiscreteMixture::symmetric(vec({1.0}));
    const auto f1 = DiscreteMixture::point(vec({0.0}));
    const auto grid = lattice_grid(1, 3);
    EXPECT_GE(ternary_gap(f0, f1, grid), 0.37763 - 1.0 / 3.0 - 5e-6);
    EXPECT_GE(ternary_gap(f0, f1, grid), 0.0443 - 1e-6);
    EXPECT_EQ(ternary_gap(f0, f0, grid), 0.0);
    EXPECT_EQ(ternary_gap(f0, f1, grid), ternary_gap(f1, f0, grid));
    EXPECT_LT(choice_gap(f0, f1, lattice_grid(1, 2)), 1e-12);
    EXPECT_THROW(ternary_gap(f0, f1, lattice_grid(1, 2)), DataError);
}

TEST(TernaryGap, PropertiesOnRandomMixtures) {
    Rng rng(3);
    for (int t = 0; t < 30; ++t) {
        const Vector b = fixture::random_vector(rng, 2, 2.0);
        const auto f = DiscreteMixture::symmetric(b, rng.uniform());
        const auto g = DiscreteMixture::point(fixture::random_vector(rng, 2));
        const auto grid = random_grid(2, 3, 100, rng);
        EXPECT_EQ(ternary_gap(f, f, grid), 0.0);
        EXPECT_EQ(ternary_gap(f, g, grid), ternary_gap(g, f, grid));
    }
}

TEST(RecoverBeta, DerivedAndTrivial) {
    const auto r = recover_beta({Matrix::Ones(1, 1), vec({1.0 / (1.0 + std::exp(-1.0))})});
    EXPECT_NEAR(r.beta.beta(0), 1.0, 1e-12);
    EXPECT_NEAR(recover_beta({Matrix::Ones(1, 1), vec({0.73106})}).beta.beta(0), 1.0, 5e-5);
    Matrix U(3, 2);
    U << 1, 0, 0, 1, 1, 1;
    const auto z = recover_beta({U, vec({0.5, 0.5, 0.5})});
    EXPECT_LT(z.beta.beta.norm(), 1e-15);
    EXPECT_TRUE(z.consistent);
}

TEST(RecoverBeta, RoundTripOnRandomSystems) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const auto d = static_cast<Eigen::Index>(1 + rng.below(6));
        const auto m = d + static_cast<Eigen::Index>(rng.below(5));
        const Vector truth = fixture::random_vector(rng, d, 2.0);
        const Matrix U = fixture::random_matrix(rng, m, d);
        Vector p(m);
        for (Eigen::Index i = 0; i < m; ++i) p(i) = sigmoid(U.row(i).dot(truth));
        const auto r = recover_beta({U, p});
        EXPECT_LE((r.beta.beta - truth).lpNorm<Eigen::Infinity>(), 1e-8);
        EXPECT_TRUE(r.consistent);
    }
}

TEST(RecoverBeta, RejectsDegenerateSystems) {
    Matrix U(3, 2);
    U << 1, 2, 2, 4, -1, -2;
    try {
        recover_beta({U, vec({0.6, 0.7, 0.4})});
        FAIL() << "rank-deficient system accepted";
    } catch (const RankDeficientError& e) {
        EXPECT_EQ(e.deficiency(), 1u);
    }
    EXPECT_THROW(recover_beta({Matrix::Zero(2, 2), vec({0.6, 0.7})}), RankDeficientError);
    EXPECT_THROW(recover_beta({Matrix::Identity(2, 2), vec({0.0, 0.7})}), DataError);
    EXPECT_THROW(recover_beta({Matrix::Identity(2, 2), vec({1.0, 0.7})}), DataError);
    // Inconsistent logits are flagged by the residual.
    Matrix V(3, 1);
    V << 1, 1, 1;
    const auto r = recover_beta({V, vec({0.5, 0.9, 0.1})});
    EXPECT_FALSE(r.consistent);
    EXPECT_GT(r.residual, 1.0);
}

TEST(Matching, FindsBestPermutation) {
    const std::vector<RewardVector> truth{{vec({1.0, 0.0})}, {vec({0.0, 1.0})}, {vec({-1.0, -1.0})}};
    const std::vector<LinearPolicy> rec{LinearPolicy{vec({-2.0, -1.5})}, LinearPolicy{vec({3.0, 0.2})},
                                        LinearPolicy{vec({0.1, 2.0})}};
    EXPECT_EQ(best_matching(rec, truth), (std::vector<std::size_t>{1, 2, 0}));
}

TEST(Experiment, RequiresOpposedPair) {
    LatentTypeSpec types{{"A", "B"}, {{vec({1.0, 0.0})}, {vec({0.0, 1.0})}}, vec({0.5, 0.5})};
    FeatureWorldOptions opt;
    opt.d = 2;
    opt.eval_prompts = 5;
    const World w = gen_feature_world(opt, types);
    IdentifyOptions io;
    io.n_annotators = 20;
    EXPECT_THROW(identifiability_experiment(w, io, 1, EmConfig{}), ConfigError);
    io.items = 4;
    EXPECT_THROW(identifiability_experiment(w, io, 1, EmConfig{}), ConfigError);
}

TEST(Experiment, ZeroHeterogeneityFlagged) {
    LatentTypeSpec types{{"A", "B", "C"}, {{vec({1.0, -1.0})}, {vec({1.0, -1.0})}, {vec({1.0, -1.0})}},
                         vec({0.3, 0.3, 0.4})};
    FeatureWorldOptions opt;
    opt.d = 2;
    opt.eval_prompts = 5;
    const World w = gen_feature_world(opt, types);
    IdentifyOptions io;
    io.n_annotators = 60;
    io.items = 3;
    io.eval_pairs_per_group = 50;
    io.grid_sets = 500;
    EmConfig em;
    em.train.beta_kl = KlTemperature(1.0);
    const auto r = identifiability_experiment(w, io, 4, em);
    EXPECT_TRUE(r.zero_heterogeneity);
    EXPECT_EQ(r.mode, "ternary");
    EXPECT_EQ(r.alignments.size(), 3u);
    EXPECT_GE(r.gap_checks.canonical_ternary_gap, 0.0443 - 1e-6);
}
