#include <cmath>
#include <limits>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hyperat;

namespace {

LinearClassifier<double> linear(int classes, int inputs, std::uint64_t seed) {
  LinearClassifier<double> m;
  m.weight = testutil::random_mat<double>(classes, inputs, seed);
  m.bias = testutil::random_mat<double>(1, classes, seed + 1);
  return m;
}

AttackBudget budget(double eps, double step, int iters, int restarts = 1, bool random_start = true) {
  AttackBudget b;
  b.epsilon = eps;
  b.step_size = step;
  b.iterations = iters;
  b.restarts = restarts;
  b.random_start = random_start;
  return b;
}

template <class T>
void expect_in_ball(const Mat<T>& adv, const Mat<T>& x, double eps) {
  ASSERT_EQ(adv.rows(), x.rows());
  ASSERT_EQ(adv.cols(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    EXPECT_LE(std::abs(static_cast<double>(adv.data()[i]) - static_cast<double>(x.data()[i])), eps);
    EXPECT_GE(adv.data()[i], T(0));
    EXPECT_LE(adv.data()[i], T(1));
  }
}

TEST(Pgd, StaysInBallAndPixelRangeOnVit) {
  const auto st = init_backbone<float>(testutil::tiny_spec(2), 5);
  const VitModel<float> model(st);
  // Include pixels at the range limits so the clip is exercised.
  Mat<float> x = testutil::random_images<float>(6, 64, 2);
  x.row(0).setZero();
  x.row(1).setOnes();
  const Labels y = testutil::random_labels(6, 4, 3);
  for (double eps : {0.3, 0.1, 1.0 / 3.0}) {
    for (LossKind k : {LossKind::CrossEntropy, LossKind::KlVsClean, LossKind::CwMargin}) {
      const auto adv = pgd_attack(model, x, y, budget(eps, eps / 4, 7, 2), k, 11);
      expect_in_ball(adv.x_adv, x, eps);
      EXPECT_EQ(adv.delta, Mat<float>(adv.x_adv - x));
    }
  }
}

TEST(Pgd, ZeroEpsilonIsIdentity) {
  const auto st = init_backbone<float>(testutil::tiny_spec(), 5);
  const VitModel<float> model(st);
  const Mat<float> x = testutil::random_images<float>(3, 64, 2);
  const auto adv = pgd_attack(model, x, Labels{0, 1, 2}, budget(0.0, 0.0, 5), LossKind::CrossEntropy, 1);
  EXPECT_EQ(adv.x_adv, x);
  EXPECT_TRUE(adv.delta.isZero(0));
}

TEST(Pgd, SingleStepOnLinearModelIsEpsilonSignOfGradient) {
  const auto m = linear(5, 12, 4);
  // Dyadic pixels well inside [eps, 1 - eps] make x + eps exact.
  Mat<double> x(3, 12);
  std::mt19937_64 rng(8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = (16 + static_cast<int>(rng() % 33)) / 64.0;
  const Labels y{0, 3, 4};
  const double eps = 0.125;
  const auto adv = pgd_attack(m, x, y, budget(eps, eps, 1, 1, false), LossKind::CrossEntropy, 0);
  const auto ce = cross_entropy_per_example(m.logits(x), y);
  const Mat<double> g = m.input_gradient({}, ce.grad);
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double s = (g.data()[i] > 0) - (g.data()[i] < 0);
    EXPECT_EQ(adv.delta.data()[i], eps * s);
  }
  EXPECT_EQ(fgsm_attack(m, x, y, eps).x_adv, adv.x_adv);
}

TEST(Fgsm, StaysInBallOnVit) {
  const auto st = init_backbone<float>(testutil::tiny_spec(), 5);
  const VitModel<float> model(st);
  const Mat<float> x = testutil::random_images<float>(4, 64, 2);
  const Labels y{0, 1, 2, 3};
  for (LossKind k : {LossKind::CrossEntropy, LossKind::CwMargin}) {
    expect_in_ball(fgsm_attack(model, x, y, 0.2, k).x_adv, x, 0.2);
  }
}

TEST(Pgd, DeterministicForFixedSeed) {
  const auto st = init_backbone<float>(testutil::tiny_spec(), 5);
  const VitModel<float> model(st);
  const Mat<float> x = testutil::random_images<float>(4, 64, 2);
  const Labels y{0, 1, 2, 3};
  const auto a = pgd_attack(model, x, y, budget(0.1, 0.02, 5, 2), LossKind::KlVsClean, 77);
  const auto b = pgd_attack(model, x, y, budget(0.1, 0.02, 5, 2), LossKind::KlVsClean, 77);
  const auto c = pgd_attack(model, x, y, budget(0.1, 0.02, 5, 2), LossKind::KlVsClean, 78);
  EXPECT_EQ(a.x_adv, b.x_adv);
  EXPECT_NE(a.x_adv, c.x_adv);
}

TEST(Pgd, IncreasesConvexLossOnLinearModel) {
  const auto m = linear(10, 20, 6);
  const Mat<double> x = testutil::random_images<double>(16, 20, 9);
  const Labels y = testutil::random_labels(16, 10, 10);
  const auto before = cross_entropy_per_example(m.logits(x), y).values;
  for (int iters : {1, 3, 10}) {
    const auto adv = pgd_attack(m, x, y, budget(0.05, 0.01, iters, 1, false), LossKind::CrossEntropy, 0);
    const auto after = cross_entropy_per_example(m.logits(adv.x_adv), y).values;
    for (std::size_t i = 0; i < after.size(); ++i) EXPECT_GT(after[i], before[i]);
  }
}

TEST(Pgd, RestartsKeepTheStrongestResult) {
  const auto st = init_backbone<double>(testutil::tiny_spec(), 21);
  const VitModel<double> model(st);
  const Mat<double> x = testutil::random_images<double>(8, 64, 2);
  const Labels y = testutil::random_labels(8, 4, 3);
  const auto one = pgd_attack(model, x, y, budget(0.1, 0.025, 3, 1), LossKind::CrossEntropy, 5);
  const auto many = pgd_attack(model, x, y, budget(0.1, 0.025, 3, 4), LossKind::CrossEntropy, 5);
  const auto l1 = cross_entropy_per_example(model.logits(one.x_adv), y).values;
  const auto l4 = cross_entropy_per_example(model.logits(many.x_adv), y).values;
  // The first restart draws the same start, so more restarts never lose.
  for (std::size_t i = 0; i < l1.size(); ++i) EXPECT_GE(l4[i], l1[i]);
}

TEST(Pgd, NonFiniteGradientNamesTheExample) {
  auto m = linear(3, 4, 1);
  m.weight(1, 2) = std::numeric_limits<double>::quiet_NaN();
  const Mat<double> x = Mat<double>::Constant(2, 4, 0.5);
  try {
    pgd_attack(m, x, Labels{0, 1}, budget(0.1, 0.05, 2), LossKind::CrossEntropy, 0);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("batch index 0"), std::string::npos);
  }
}

TEST(Pgd, RejectsBadInput) {
  const auto m = linear(3, 4, 1);
  const Mat<double> x = Mat<double>::Constant(2, 4, 0.5);
  EXPECT_THROW(pgd_attack(m, x, Labels{0}, budget(0.1, 0.05, 2), LossKind::CrossEntropy, 0), DimensionError);
  EXPECT_THROW(pgd_attack(m, Mat<double>(x.array() + 1.0), Labels{0, 1}, budget(0.1, 0.05, 2),
                          LossKind::CrossEntropy, 0),
               ConfigError);
  EXPECT_THROW(pgd_attack(m, x, Labels{0, 1}, budget(0.1, 0.2, 2), LossKind::CrossEntropy, 0), ConfigError);
  EXPECT_THROW(pgd_attack(m, x, Labels{0, 1}, budget(-0.1, 0.05, 2), LossKind::CrossEntropy, 0), ConfigError);
  EXPECT_THROW(pgd_attack(m, x, Labels{0, 1}, budget(0.1, 0.05, 0), LossKind::CrossEntropy, 0), ConfigError);
}

TEST(Pgd, FloatEpsilonBoundHoldsInDouble) {
  // 0.1 is not representable; the projection must stay within the double bound.
  LinearClassifier<float> m;
  m.weight = testutil::random_mat<float>(3, 50, 1);
  m.bias = Mat<float>::Zero(1, 3);
  const Mat<float> x = testutil::random_images<float>(10, 50, 4);
  const auto adv = pgd_attack(m, x, testutil::random_labels(10, 3, 2), budget(0.1, 0.1, 3, 1, true),
                              LossKind::CrossEntropy, 3);
  expect_in_ball(adv.x_adv, x, 0.1);
}

}  // namespace
