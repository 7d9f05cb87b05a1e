#include <cmath>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hyperat;

namespace {

// Logits whose softmax is exactly the given distribution (up to rounding).
Mat<double> logits_of(std::initializer_list<std::initializer_list<double>> probs) {
  Mat<double> z(static_cast<Eigen::Index>(probs.size()), static_cast<Eigen::Index>(probs.begin()->size()));
  Eigen::Index i = 0;
  for (const auto& row : probs) {
    Eigen::Index j = 0;
    for (double p : row) z(i, j++) = std::log(p);
    ++i;
  }
  return z;
}

double kl(std::vector<double> p, std::vector<double> q) {
  return kl_divergence<double>(std::span<const double>(p), std::span<const double>(q));
}

TEST(KlDivergence, Oracles) {
  EXPECT_EQ(kl({0.3, 0.7}, {0.3, 0.7}), 0.0);
  EXPECT_NEAR(kl({0.5, 0.5}, {0.25, 0.75}), 0.143841, 1e-6);
  EXPECT_NEAR(kl({0.5, 0.5}, {0.25, 0.75}), 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0), 1e-15);
  EXPECT_THROW(kl({0.5, 0.5}, {1.0}), DimensionError);
}

TEST(KlDivergence, NonNegativeOnRandomPairs) {
  std::mt19937_64 rng(3);
  std::gamma_distribution<double> g(0.5, 1.0);
  for (int t = 0; t < 500; ++t) {
    std::vector<double> p(7), q(7);
    double sp = 0, sq = 0;
    for (int j = 0; j < 7; ++j) {
      sp += p[j] = g(rng) + 1e-9;
      sq += q[j] = g(rng) + 1e-9;
    }
    for (int j = 0; j < 7; ++j) {
      p[j] /= sp;
      q[j] /= sq;
    }
    EXPECT_GE(kl(p, q), 0.0);
    EXPECT_NEAR(kl(p, p), 0.0, 1e-15);
  }
}

TEST(CrossEntropy, UniformLogitsGiveLogClasses) {
  const Mat<double> z = Mat<double>::Constant(4, 10, 0.37);
  const Labels y{0, 3, 9, 5};
  EXPECT_NEAR(loss_vanilla_at(z, y).value, std::log(10.0), 1e-9);
  EXPECT_NEAR(mean_cross_entropy(z, y), 2.302585, 1e-6);
}

TEST(CrossEntropy, SaturatedLogitsGiveNearZero) {
  Mat<double> z = Mat<double>::Zero(2, 3);
  z(0, 1) = 60;
  z(1, 2) = 60;
  EXPECT_LT(loss_vanilla_at(z, Labels{1, 2}).value, 1e-20);
  EXPECT_THROW(loss_vanilla_at(z, Labels{1, 3}), DimensionError);
  EXPECT_THROW(loss_vanilla_at(z, Labels{1}), DimensionError);
}

TEST(CwMargin, Oracles) {
  EXPECT_EQ(cw_margin_loss(Mat<double>{{3, 1}}, Labels{0})[0], -2.0);
  EXPECT_EQ(cw_margin_loss(Mat<double>{{2, 2}}, Labels{0})[0], 0.0);
  EXPECT_EQ(cw_margin_loss(Mat<double>{{0, 5}}, Labels{0})[0], 5.0);
  EXPECT_EQ(cw_margin_loss(Mat<double>{{1, 7, 4}}, Labels{1})[0], -3.0);
  EXPECT_THROW(cw_margin_loss(Mat<double>{{1}}, Labels{0}), ConfigError);
}

TEST(Trades, Oracles) {
  const Mat<double> zc = logits_of({{0.5, 0.5}});
  const Mat<double> za = logits_of({{0.25, 0.75}});
  const Labels y{0};
  const double k = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
  // Arithmetic of the worked case: CE 0.5 and KL 0.1438 with beta 6.
  EXPECT_NEAR(0.5 + 6.0 * k, 1.3630, 5e-5);
  EXPECT_NEAR(loss_trades(zc, za, y, 6.0).value, std::log(2.0) + 6.0 * k, 1e-12);
  EXPECT_NEAR(loss_trades(zc, zc, y, 6.0).value, std::log(2.0), 1e-12);
  EXPECT_NEAR(loss_trades(zc, za, y, 0.0).value, std::log(2.0), 1e-12);
}

TEST(Mart, Oracles) {
  const Mat<double> zc = logits_of({{0.8, 0.2}});
  const Mat<double> za = logits_of({{0.6, 0.4}});
  const Labels y{0};
  const double bce = -std::log(0.6) - std::log(0.6);
  const double k = kl({0.8, 0.2}, {0.6, 0.4});
  EXPECT_NEAR(loss_mart(zc, za, y, 5.0).value, bce + 5.0 * k * 0.2, 1e-12);
  // Equal clean and adversarial predictions: BCE only.
  EXPECT_NEAR(loss_mart(za, za, y, 5.0).value, bce, 1e-12);
  // Confident clean prediction switches the regularizer off.
  Mat<double> sure{{80.0, 0.0}};
  EXPECT_NEAR(loss_mart(sure, za, y, 5.0).value, bce, 1e-12);
}

TEST(Dkl, Oracles) {
  const std::vector<double> p{0.5, 0.5}, q{0.25, 0.75};
  EXPECT_NEAR(decoupled_divergence<double>(p, q, {}, 1.0, 0.0), 0.125, 1e-15);
  EXPECT_EQ(decoupled_divergence<double>(p, p, {}, 1.0, 0.0), 0.0);
  std::vector<double> w{2.0, 0.0};
  EXPECT_NEAR(decoupled_divergence<double>(p, q, w, 1.0, 0.0), 0.125, 1e-15);
  EXPECT_THROW(decoupled_divergence<double>(p, q, std::vector<double>{1.0}, 1.0, 0.0), DimensionError);
}

TEST(Dkl, CrossEntropyPartIsKlPlusEntropy) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 50; ++t) {
    const Mat<double> zc = testutil::random_mat<double>(1, 6, rng());
    const Mat<double> za = testutil::random_mat<double>(1, 6, rng());
    const Mat<double> pm = softmax_rows(zc), qm = softmax_rows(za);
    std::vector<double> p(pm.data(), pm.data() + 6), q(qm.data(), qm.data() + 6);
    const double d = decoupled_divergence<double>(p, q, {}, 0.0, 1.0);
    EXPECT_NEAR(d - kl(p, q), entropy<double>(p), 1e-12);

    // Whole objective: with w_mse = 0, DKL = TRADES + beta * H(p).
    DklOptions o;
    o.w_mse = 0.0;
    o.stop_gradient = false;
    const Labels y{2};
    EXPECT_NEAR(loss_dkl(zc, za, y, o).value, loss_trades(zc, za, y, o.beta).value + o.beta * entropy<double>(p),
                1e-10);
    // Without stop-gradient, the adversarial gradients coincide as well.
    EXPECT_LT((loss_dkl(zc, za, y, o).d_adv - loss_trades(zc, za, y, o.beta).d_adv).norm(), 1e-12);
  }
}

TEST(Dkl, EqualInputsLeaveOnlyCrossEntropyAndEntropy) {
  const Mat<double> z = logits_of({{0.2, 0.3, 0.5}});
  const Labels y{1};
  const double h = entropy<double>(std::vector<double>{0.2, 0.3, 0.5});
  EXPECT_NEAR(loss_dkl(z, z, y, DklOptions{}).value, -std::log(0.3) + 6.0 * h, 1e-12);
}

TEST(Score, ZeroAtEqualInputs) {
  const Mat<double> z = logits_of({{0.2, 0.3, 0.5}});
  EXPECT_NEAR(loss_score(z, z, Labels{2}, 6.0).value, -std::log(0.5), 1e-12);
  const Mat<double> za = logits_of({{0.5, 0.3, 0.2}});
  EXPECT_NEAR(loss_score(z, za, Labels{2}, 6.0).value, -std::log(0.5) + 6.0 * std::sqrt(0.18), 1e-12);
}

TEST(Defenses, AllLossesFiniteAndNonNegativeWhereExpected) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const Mat<double> zc = testutil::random_mat<double>(5, 10, rng(), 5.0);
    const Mat<double> za = testutil::random_mat<double>(5, 10, rng(), 5.0);
    const Labels y = testutil::random_labels(5, 10, rng());
    for (const auto& m : known_methods()) {
      const auto d = make_defense(m);
      const double v = defense_objective(d, zc, za, y).value;
      EXPECT_TRUE(std::isfinite(v)) << m;
      EXPECT_GE(v, 0.0) << m;
    }
  }
}

TEST(Defenses, RoutingAndValidation) {
  EXPECT_EQ(make_defense("vanilla_at").inner, LossKind::CrossEntropy);
  EXPECT_EQ(make_defense("mart").inner, LossKind::CrossEntropy);
  EXPECT_EQ(make_defense("trades").inner, LossKind::KlVsClean);
  EXPECT_EQ(make_defense("dkl").inner, LossKind::KlVsClean);
  EXPECT_FALSE(make_defense("vanilla_at").uses_clean_branch);
  EXPECT_THROW(make_defense("fgsm"), LookupError);
  DefenseParams bad;
  bad.trades_beta = 0;
  EXPECT_THROW(make_defense("trades", bad), ConfigError);
  EXPECT_EQ(default_methods().size(), 4u);
}

TEST(Defenses, CollapseToCleanFormWhenAdversarialEqualsClean) {
  const Mat<double> z = testutil::random_mat<double>(4, 10, 1);
  const Labels y = testutil::random_labels(4, 10, 2);
  const double ce = mean_cross_entropy(z, y);
  EXPECT_NEAR(defense_objective(make_defense("vanilla_at"), z, z, y).value, ce, 1e-12);
  EXPECT_NEAR(defense_objective(make_defense("trades"), z, z, y).value, ce, 1e-12);
  EXPECT_NEAR(defense_objective(make_defense("score"), z, z, y).value, ce, 1e-12);
  const auto dkl = defense_objective(make_defense("dkl"), z, z, y);
  double h = 0;
  const Mat<double> p = softmax_rows(z);
  for (int i = 0; i < 4; ++i) h += entropy<double>(std::span<const double>(p.row(i).data(), 10));
  EXPECT_NEAR(dkl.value, ce + 6.0 * h / 4.0, 1e-10);
}

}  // namespace
