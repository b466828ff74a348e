#include "fixtures.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace hetpref;
using fixture::column;
using fixture::vec;

namespace {

TrainConfig config_with_beta(double beta) {
    TrainConfig c;
    c.beta_kl = KlTemperature(beta);
    return c;
}

/// Records drawn from a logit model with scores beta_kl * theta . psi.
std::vector<PreferenceRecord> simulate(const ResponseUniverse& u, const Vector& theta, double beta, std::size_t n,
                                       std::size_t items, Rng& rng) {
    std::vector<PreferenceRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        const PromptId x = rng.below(u.num_prompts());
        const auto set = rng.sample_without_replacement(u.num_candidates(x), items);
        Vector r(static_cast<Eigen::Index>(items));
        for (std::size_t j = 0; j < items; ++j) r(static_cast<Eigen::Index>(j)) = beta * theta.dot(u.features(x, set[j]));
        const auto w = sample_choice(rng, r);
        PreferenceRecord rec{0, x, set[w], {}};
        for (std::size_t j = 0; j < items; ++j)
            if (j != w) rec.rejected.push_back(set[j]);
        out.push_back(rec);
    }
    return out;
}

}  // namespace

TEST(PrefProb, TrivialAndDerived) {
    const auto u = fixture::universe_from({column({1, 0, -1})});
    const auto sft = ReferencePolicy::uniform(u);
    const KlTemperature one(1.0);
    EXPECT_NEAR(pref_prob(LinearPolicy::zero(1), sft, u, {0, 0, 0, {1}}, one), 0.5, 1e-15);
    EXPECT_NEAR(pref_prob(LinearPolicy::zero(1), sft, u, {0, 0, 0, {1, 2}}, one), 1.0 / 3.0, 1e-15);
    EXPECT_NEAR(pref_prob(LinearPolicy{vec({1.0})}, sft, u, {0, 0, 0, {1, 2}}, one), 0.66524, 5e-6);
    EXPECT_NEAR(pref_prob(LinearPolicy{vec({1.0})}, sft, u, {0, 0, 0, {1, 2}}, one),
                logit_choice_probs({1.0, 0.0, -1.0})(0), 1e-15);
}

TEST(PrefProb, EqualsSoftmaxOfScaledScoresUnderAnyReference) {
    Rng rng(17);
    for (int t = 0; t < 100; ++t) {
        const auto u = fixture::random_universe(rng, 2, 5, 3);
        Vector p0 = (fixture::random_vector(rng, 5).array() + 1.2).matrix();
        Vector p1 = (fixture::random_vector(rng, 5).array() + 1.2).matrix();
        const ReferencePolicy sft(u, {p0 / p0.sum(), p1 / p1.sum()});
        const LinearPolicy pi{fixture::random_vector(rng, 3, 4.0)};
        const double beta = 0.05 + rng.uniform();
        const PreferenceRecord r{0, rng.below(2), 1, {0, 3}};
        // Direct form: softmax over beta * log(pi/sft).
        Vector s(3);
        s << beta * log_ratio(pi, sft, u, r.prompt, 1), beta * log_ratio(pi, sft, u, r.prompt, 0),
            beta * log_ratio(pi, sft, u, r.prompt, 3);
        EXPECT_NEAR(pref_prob(pi, sft, u, r, KlTemperature(beta)), logit_choice_probs(s)(0), 1e-10);
    }
}

TEST(DpoLoss, DerivedValues) {
    const auto u = fixture::universe_from({column({1, 0, -1})});
    const auto sft = ReferencePolicy::uniform(u);
    const std::vector<PreferenceRecord> bin{{0, 0, 0, {1}}};
    EXPECT_NEAR(dpo_loss(LinearPolicy::zero(1), sft, u, WeightedDataset::unit(bin), KlTemperature()), std::log(2.0), 1e-15);
    const std::vector<PreferenceRecord> ter{{0, 0, 0, {1, 2}}};
    EXPECT_NEAR(dpo_loss(LinearPolicy::zero(1), sft, u, WeightedDataset{ter, {2.0}}, KlTemperature()), 2.19722, 5e-6);
}

TEST(DpoGrad, DerivedValues) {
    Matrix f(2, 2);
    f << 1.0, 2.0, -0.5, 0.25;
    const auto u = fixture::universe_from({f});
    const auto sft = ReferencePolicy::uniform(u);
    const std::vector<PreferenceRecord> one{{0, 0, 0, {1}}};
    const Vector g = dpo_grad(LinearPolicy::zero(2), sft, u, WeightedDataset::unit(one), KlTemperature(1.0));
    const Vector expected = 0.5 * (f.row(1) - f.row(0)).transpose();
    EXPECT_LT((g - expected).cwiseAbs().maxCoeff(), 1e-15);

    const std::vector<PreferenceRecord> sym{{0, 0, 0, {1}}, {0, 0, 1, {0}}};
    EXPECT_LT(dpo_grad(LinearPolicy::zero(2), sft, u, WeightedDataset::unit(sym), KlTemperature(0.3)).norm(), 1e-15);
}

TEST(DpoGrad, MatchesFiniteDifferences) {
    Rng rng(23);
    int checked = 0;
    for (int t = 0; t < 100; ++t) {
        const auto d = static_cast<std::size_t>(1 + rng.below(5));
        const auto u = fixture::random_universe(rng, 3, 5, d);
        const auto sft = ReferencePolicy::uniform(u);
        const double beta = 0.1 + rng.uniform();
        std::vector<PreferenceRecord> recs;
        for (int i = 0; i < 6; ++i) {
            const auto set = rng.sample_without_replacement(5, 2 + rng.below(2));
            PreferenceRecord r{0, rng.below(3), set[0], {}};
            for (std::size_t j = 1; j < set.size(); ++j) r.rejected.push_back(set[j]);
            recs.push_back(r);
        }
        std::vector<double> w;
        for (std::size_t i = 0; i < recs.size(); ++i) w.push_back(rng.uniform() * 2.0);
        const WeightedDataset data{recs, w};
        const Vector theta = fixture::random_vector(rng, static_cast<Eigen::Index>(d), 2.0);
        const Vector g = dpo_grad(LinearPolicy{theta}, sft, u, data, KlTemperature(beta));
        const Vector fd = oracle::central_diff(
            [&](const Vector& th) { return dpo_loss(LinearPolicy{th}, sft, u, data, KlTemperature(beta)); }, theta);
        EXPECT_LE((g - fd).norm(), 1e-5 * std::max(1.0, fd.norm())) << "instance " << t;
        ++checked;
    }
    EXPECT_EQ(checked, 100);
}

TEST(DpoLoss, ConvexAlongSegments) {
    Rng rng(29);
    const auto u = fixture::random_universe(rng, 4, 6, 3);
    const auto sft = ReferencePolicy::uniform(u);
    const auto recs = simulate(u, vec({1.0, -2.0, 0.5}), 1.0, 40, 3, rng);
    const auto data = WeightedDataset::unit(recs);
    for (int t = 0; t < 200; ++t) {
        const Vector a = fixture::random_vector(rng, 3, 5.0), b = fixture::random_vector(rng, 3, 5.0);
        const double s = rng.uniform();
        const KlTemperature beta(0.5);
        const double mid = dpo_loss(LinearPolicy{s * a + (1 - s) * b}, sft, u, data, beta);
        const double chord = s * dpo_loss(LinearPolicy{a}, sft, u, data, beta) +
                             (1 - s) * dpo_loss(LinearPolicy{b}, sft, u, data, beta);
        EXPECT_LE(mid, chord + 1e-9);
    }
}

TEST(DpoLoss, WeightScalingScalesLossAndGradient) {
    Rng rng(31);
    const auto u = fixture::random_universe(rng, 3, 4, 2);
    const auto sft = ReferencePolicy::uniform(u);
    const auto recs = simulate(u, vec({1.0, 1.0}), 1.0, 30, 2, rng);
    std::vector<double> w1(recs.size()), w3(recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        w1[i] = 0.5 + rng.uniform();
        w3[i] = 3.0 * w1[i];
    }
    const WeightedDataset d1{recs, w1}, d3{recs, w3};
    const LinearPolicy pi{vec({0.3, -0.7})};
    const KlTemperature beta(0.2);
    EXPECT_NEAR(dpo_loss(pi, sft, u, d3, beta), 3.0 * dpo_loss(pi, sft, u, d1, beta), 1e-11);
    EXPECT_LT((dpo_grad(pi, sft, u, d3, beta) - 3.0 * dpo_grad(pi, sft, u, d1, beta)).norm(), 1e-11);
    const auto cfg = config_with_beta(0.2);
    const auto r1 = train_weighted_dpo(LinearPolicy::zero(2), sft, u, d1, cfg);
    const auto r3 = train_weighted_dpo(LinearPolicy::zero(2), sft, u, d3, cfg);
    EXPECT_TRUE(r1.converged);
    EXPECT_TRUE(r3.converged);
    EXPECT_LT((r1.policy.theta - r3.policy.theta).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Train, ConvergesToGradientTolerance) {
    Rng rng(37);
    const auto u = fixture::random_universe(rng, 10, 6, 3);
    const auto sft = ReferencePolicy::uniform(u);
    const auto recs = simulate(u, vec({1.0, -1.0, 2.0}), 1.0, 500, 3, rng);
    const auto cfg = config_with_beta(0.1);
    const auto res = train_weighted_dpo(LinearPolicy::zero(3), sft, u, WeightedDataset::unit(recs), cfg);
    EXPECT_TRUE(res.converged);
    EXPECT_LE(res.loss, res.initial_loss);
    EXPECT_LE(dpo_grad(res.policy, sft, u, WeightedDataset::unit(recs), cfg.beta_kl).lpNorm<Eigen::Infinity>(), 1e-8);
}

TEST(Train, ZeroGeneratorRecoversSmallTheta) {
    Rng rng(41);
    const auto u = fixture::random_universe(rng, 20, 5, 2);
    const auto sft = ReferencePolicy::uniform(u);
    const auto recs = simulate(u, vec({0.0, 0.0}), 1.0, 2000, 2, rng);
    const auto res = train_weighted_dpo(LinearPolicy::zero(2), sft, u, WeightedDataset::unit(recs), config_with_beta(1.0));
    EXPECT_LE(res.policy.theta.norm(), 0.1);
}

TEST(Train, RecoversGeneratorAndAgreesWithGridSearch) {
    Rng rng(43);
    const auto u = fixture::random_universe(rng, 30, 6, 2);
    const auto sft = ReferencePolicy::uniform(u);
    const Vector truth = vec({2.0, -1.0});
    const auto recs = simulate(u, truth, 1.0, 5000, 2, rng);
    const auto data = WeightedDataset::unit(recs);
    const auto res = train_weighted_dpo(LinearPolicy::zero(2), sft, u, data, config_with_beta(1.0));
    EXPECT_LE((res.policy.theta - truth).norm(), 0.15);

    // 0.05 lattice around the truth: its minimizer lies in the same ball.
    double best = std::numeric_limits<double>::infinity();
    Vector arg(2);
    for (double a = 1.6; a <= 2.4 + 1e-9; a += 0.05)
        for (double b = -1.4; b <= -0.6 + 1e-9; b += 0.05) {
            const double l = dpo_loss_and_grad(vec({a, b}), u, data, 1.0).loss;
            if (l < best) best = l, arg = vec({a, b});
        }
    EXPECT_LE((arg - truth).norm(), 0.15);
    EXPECT_LE((arg - res.policy.theta).lpNorm<Eigen::Infinity>(), 0.05);
    EXPECT_LE(res.loss, best + 1e-9);
}

TEST(Train, BetaScalesTheSolution) {
    // Scores are beta * theta . psi, so the optimum satisfies beta * theta = const.
    Rng rng(47);
    const auto u = fixture::random_universe(rng, 8, 5, 2);
    const auto sft = ReferencePolicy::uniform(u);
    const auto recs = simulate(u, vec({1.0, 0.5}), 1.0, 400, 2, rng);
    const auto a = train_weighted_dpo(LinearPolicy::zero(2), sft, u, WeightedDataset::unit(recs), config_with_beta(1.0));
    const auto b = train_weighted_dpo(LinearPolicy::zero(2), sft, u, WeightedDataset::unit(recs), config_with_beta(0.1));
    EXPECT_LT((a.policy.theta - 0.1 * b.policy.theta).norm(), 1e-6);
}

TEST(Train, Errors) {
    const auto u = fixture::one_prompt_pair();
    const auto sft = ReferencePolicy::uniform(u);
    const std::vector<PreferenceRecord> recs{{0, 0, 0, {1}}};
    EXPECT_THROW(train_weighted_dpo(LinearPolicy::zero(1), sft, u, WeightedDataset{recs, {0.0}}, TrainConfig{}), DataError);
    EXPECT_THROW(train_weighted_dpo(LinearPolicy::zero(1), sft, u, WeightedDataset{recs, {-1.0}}, TrainConfig{}), DataError);
    EXPECT_THROW(train_weighted_dpo(LinearPolicy::zero(1), sft, u, WeightedDataset{recs, {}}, TrainConfig{}), DataError);
    TrainConfig bad;
    bad.step_size = 0.0;
    EXPECT_THROW(train_weighted_dpo(LinearPolicy::zero(1), sft, u, WeightedDataset::unit(recs), bad), ConfigError);
}

TEST(Train, SeparableDataStopsAtIterationCap) {
    const auto u = fixture::one_prompt_pair();
    const auto sft = ReferencePolicy::uniform(u);
    const std::vector<PreferenceRecord> recs{{0, 0, 0, {1}}};
    TrainConfig cfg;
    cfg.max_iters = 50;
    const auto res = train_weighted_dpo(LinearPolicy::zero(1), sft, u, WeightedDataset::unit(recs), cfg);
    EXPECT_LE(res.iterations, 50u);
    EXPECT_LT(res.loss, res.initial_loss);
    EXPECT_GT(res.policy.theta(0), 0.0);
}
