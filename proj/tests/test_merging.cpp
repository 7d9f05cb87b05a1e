#include <cstdio>
#include <filesystem>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hyperat;

namespace {

struct Fixture {
  HyperatState<double> st = testutil::tiny_state(default_methods(), 11, 2);
  SpecialistDeltas<double> sp = specialist_deltas(st.specialists());
  Mat<double> x = testutil::random_images<double>(6, 64, 3);
  Labels y = testutil::random_labels(6, 4, 4);
};

TEST(MergeEqual, ElementwiseMeanOracle) {
  const std::vector<InjectionSite> sites{{0, Position::AttnQkv, 2, 2}};
  SpecialistDeltas<double> sp(2, SiteDeltas<double>(1));
  sp[0][0] = Mat<double>{{2, 0}, {0, 0}};
  sp[1][0] = Mat<double>{{0, 2}, {0, 0}};
  EXPECT_EQ(merge_equal(sp, sites).deltas[0], (Mat<double>{{1, 1}, {0, 0}}));
  sp[1][0] = -sp[0][0];
  EXPECT_TRUE(merge_equal(sp, sites).deltas[0].isZero(0));
}

TEST(MergeEqual, IdenticalSpecialistsGiveThatSpecialist) {
  Fixture f;
  SpecialistDeltas<double> same(4, f.sp[1]);
  const auto merged = merge_equal(same, f.st.backbone.sites);
  for (std::size_t s = 0; s < merged.deltas.size(); ++s) {
    EXPECT_LT((merged.deltas[s] - f.sp[1][s]).cwiseAbs().maxCoeff(), 1e-15);
  }
}

TEST(MergeEqual, SiteMismatchIsConfigError) {
  Fixture f;
  auto bad = f.sp;
  bad[2].pop_back();
  EXPECT_THROW(merge_equal(bad, f.st.backbone.sites), ConfigError);
  bad = f.sp;
  bad[0][1] = Mat<double>::Zero(3, 3);
  EXPECT_THROW(merge_equal(bad, f.st.backbone.sites), ConfigError);
  EXPECT_THROW(merge_equal(SpecialistDeltas<double>{}, f.st.backbone.sites), ConfigError);
}

TEST(MergedForward, UniformCoefficientsEqualEvenMergeExactly) {
  Fixture f;
  const auto c = MergeCoefficients::uniform(4, 2);
  const auto eq = merge_equal(f.sp, f.st.backbone.sites);
  EXPECT_EQ(merged_forward(f.st.backbone, f.sp, c, f.x), forward_logits(f.st.backbone, f.x, &eq.deltas));
}

TEST(MergedForward, ZeroCoefficientsEqualBase) {
  Fixture f;
  auto c = MergeCoefficients::uniform(4, 2);
  c.lambda.setZero();
  EXPECT_EQ(merged_forward(f.st.backbone, f.sp, c, f.x), forward_logits<double>(f.st.backbone, f.x, nullptr));
}

TEST(MergedForward, SingleSpecialistWithUnitWeight) {
  Fixture f;
  const SpecialistDeltas<double> one{f.sp[2]};
  const auto c = MergeCoefficients::uniform(1, 2);
  EXPECT_EQ(c.lambda(0, 0), 1.0);
  EXPECT_EQ(merged_forward(f.st.backbone, one, c, f.x), forward_logits(f.st.backbone, f.x, &f.sp[2]));
}

TEST(MergeWeighted, LinearInLambda) {
  Fixture f;
  auto c = MergeCoefficients::uniform(4, 2);
  std::mt19937_64 rng(5);
  fill_normal(c.lambda, rng, 1.0);
  auto c2 = c;
  c2.lambda *= 2.0;
  const auto a = merge_weighted(f.sp, c, f.st.backbone.sites);
  const auto b = merge_weighted(f.sp, c2, f.st.backbone.sites);
  for (std::size_t s = 0; s < a.deltas.size(); ++s) EXPECT_EQ(b.deltas[s], Mat<double>(2.0 * a.deltas[s]));
}

TEST(MergeWeighted, CoefficientsArePerLayerSharedAcrossPositions) {
  Fixture f;
  auto c = MergeCoefficients::uniform(4, 2);
  c.lambda.setZero();
  c.lambda(1, 1) = 1.0;
  const auto m = merge_weighted(f.sp, c, f.st.backbone.sites);
  for (const auto& s : f.st.backbone.sites) {
    const auto i = static_cast<std::size_t>(s.index());
    if (s.layer == 1) {
      EXPECT_EQ(m.deltas[i], f.sp[1][i]);
    } else {
      EXPECT_TRUE(m.deltas[i].isZero(0));
    }
  }
  EXPECT_THROW(merge_weighted(f.sp, MergeCoefficients::uniform(3, 2), f.st.backbone.sites), ConfigError);
  EXPECT_THROW(merge_weighted(f.sp, MergeCoefficients::uniform(4, 1), f.st.backbone.sites), ConfigError);
}

TEST(MergeCoefficients, UniformInit) {
  const auto c = MergeCoefficients::uniform(4, 3, 0.5);
  EXPECT_TRUE((c.lambda.array() == 0.25).all());
  EXPECT_EQ(c.tradeoff, 0.5);
  EXPECT_THROW(MergeCoefficients::uniform(0, 3), ConfigError);
}

CoefficientOptConfig opt_config(int iterations, double lr) {
  CoefficientOptConfig c;
  c.iterations = iterations;
  c.lr = lr;
  c.attack = AttackBudget{0.1, 0.025, 3, 1, true};
  return c;
}

TEST(OptimizeCoefficients, ZeroIterationsKeepsUniform) {
  Fixture f;
  const auto init = MergeCoefficients::uniform(4, 2);
  const auto r = optimize_coefficients(f.st.backbone, f.sp, init, f.x, f.y, opt_config(0, 1e-2));
  EXPECT_EQ(r.coeffs, init);
  EXPECT_TRUE(r.surrogate.empty());
}

TEST(OptimizeCoefficients, ZeroLearningRateLogsButKeeps) {
  Fixture f;
  const auto init = MergeCoefficients::uniform(4, 2);
  const auto r = optimize_coefficients(f.st.backbone, f.sp, init, f.x, f.y, opt_config(3, 0.0));
  EXPECT_EQ(r.coeffs, init);
  ASSERT_EQ(r.surrogate.size(), 3u);
  for (double v : r.surrogate) EXPECT_TRUE(std::isfinite(v));
  // Same coefficients and same attack seed: every round sees the same value.
  EXPECT_EQ(r.surrogate[0], r.surrogate[2]);
  EXPECT_EQ(r.final_surrogate, r.surrogate[0]);
}

TEST(OptimizeCoefficients, EverythingButLambdaIsFrozen) {
  Fixture f;
  std::vector<Mat<double>> saved;
  for (auto& [n, m] : f.st.backbone.params.named()) saved.push_back(*m);
  const auto sp_before = f.sp;
  const auto r = optimize_coefficients(f.st.backbone, f.sp, MergeCoefficients::uniform(4, 2), f.x, f.y,
                                       opt_config(7, 1e-2));
  std::size_t i = 0;
  for (auto& [n, m] : f.st.backbone.params.named()) EXPECT_EQ(*m, saved[i++]) << n;
  for (std::size_t m = 0; m < f.sp.size(); ++m) {
    for (std::size_t s = 0; s < f.sp[m].size(); ++s) EXPECT_EQ(f.sp[m][s], sp_before[m][s]);
  }
  EXPECT_NE(r.coeffs.lambda, MergeCoefficients::uniform(4, 2).lambda);
  EXPECT_EQ(r.surrogate.size(), 7u);
}

TEST(OptimizeCoefficients, RejectsBadSettings) {
  Fixture f;
  const auto init = MergeCoefficients::uniform(4, 2);
  EXPECT_THROW(optimize_coefficients(f.st.backbone, f.sp, init, f.x, f.y, opt_config(-1, 1e-2)), ConfigError);
  EXPECT_THROW(optimize_coefficients(f.st.backbone, f.sp, init, f.x, f.y, opt_config(1, -1.0)), ConfigError);
}

TEST(Coefficients, JsonRoundTrip) {
  auto c = MergeCoefficients::uniform(4, 3, 0.7);
  std::mt19937_64 rng(1);
  fill_normal(c.lambda, rng, 1.0);
  const auto path = std::filesystem::temp_directory_path() / "hyperat_coeffs_test.json";
  save_coefficients(path, c, default_methods());
  EXPECT_EQ(load_coefficients(path, default_methods()), c);
  const auto j = coefficients_to_json(c, default_methods());
  EXPECT_EQ(j.at("coefficients").size(), 12u);
  EXPECT_EQ(j.at("coefficients")[5].at("method"), "trades");
  EXPECT_EQ(j.at("coefficients")[5].at("layer"), 2);
  EXPECT_THROW(load_coefficients(path, std::vector<std::string>{"vanilla_at", "mart", "dkl", "score"}), LookupError);
  std::filesystem::remove(path);
}

}  // namespace
