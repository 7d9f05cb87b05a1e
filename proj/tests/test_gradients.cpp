#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hyperat;
using testutil::fd_relative_error;

namespace {

constexpr double kTol = 1e-3;

double attack_objective(const VitModel<double>& model, const Mat<double>& x, const Labels& y, LossKind kind,
                        const Mat<double>& clean_probs) {
  const auto l = detail::attack_loss(model.logits(x), y, kind, clean_probs);
  double s = 0;
  for (double v : l.values) s += v;
  return s;
}

class InputGradient : public ::testing::TestWithParam<LossKind> {};

TEST_P(InputGradient, MatchesFiniteDifferences) {
  const LossKind kind = GetParam();
  for (int depth : {1, 2}) {
    auto st = testutil::tiny_state({"vanilla_at"}, 5, depth);
    const auto deltas = adapter_deltas(st.specialist(0));
    const VitModel<double> model(st.backbone, &deltas);
    Mat<double> x = testutil::random_images<double>(3, st.backbone.spec.input_dim(), 7);
    const Labels y = testutil::random_labels(3, st.backbone.spec.num_classes, 8);
    const Mat<double> x0 = testutil::random_images<double>(3, st.backbone.spec.input_dim(), 9);
    const Mat<double> clean_probs = softmax_rows(model.logits(x0));

    VitModel<double>::Tape tape;
    const auto loss = detail::attack_loss(model.forward(x, &tape), y, kind, clean_probs);
    const Mat<double> g = model.input_gradient(tape, loss.grad);
    const double err = fd_relative_error(x, g, [&] { return attack_objective(model, x, y, kind, clean_probs); });
    EXPECT_LT(err, kTol) << loss_kind_name(kind) << " depth " << depth;
  }
}

INSTANTIATE_TEST_SUITE_P(AllKinds, InputGradient,
                         ::testing::Values(LossKind::CrossEntropy, LossKind::KlVsClean, LossKind::CwMargin));

class DefenseGradient : public ::testing::TestWithParam<std::string> {};

TEST_P(DefenseGradient, ParametersMatchFiniteDifferences) {
  auto st = testutil::tiny_state({GetParam()}, 21);
  st.defenses[0].params.dkl.stop_gradient = false;
  const int n = 4;
  const auto& spec = st.backbone.spec;
  const Mat<double> x = testutil::random_images<double>(n, spec.input_dim(), 3);
  Mat<double> x_adv = x + 0.05 * testutil::random_mat<double>(n, spec.input_dim(), 4);
  x_adv = x_adv.cwiseMax(0.0).cwiseMin(1.0);
  const Labels y = testutil::random_labels(n, spec.num_classes, 5);

  auto g = hyperat_gradients(st, 0, x, x_adv, y);
  const auto f = [&] { return hyperat_gradients(st, 0, x, x_adv, y).value; };

  auto hp = st.hyper.named();
  auto hg = g.hyper.named();
  for (std::size_t i = 0; i < hp.size(); ++i) {
    EXPECT_LT(fd_relative_error(*hp[i].second, *hg[i].second, f), kTol) << GetParam() << " " << hp[i].first;
  }
  auto bp = st.backbone.params.named();
  auto bg = g.backbone.named();
  int checked = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (!st.backbone.trainable(bp[i].first)) {
      EXPECT_EQ(bg[i].second->norm(), 0.0) << bp[i].first;
      continue;
    }
    EXPECT_LT(fd_relative_error(*bp[i].second, *bg[i].second, f), kTol) << GetParam() << " " << bp[i].first;
    ++checked;
  }
  EXPECT_GT(checked, 0);
}

INSTANTIATE_TEST_SUITE_P(AllDefenses, DefenseGradient,
                         ::testing::Values("vanilla_at", "trades", "mart", "dkl", "score"));

TEST(DefenseGradient, EveryBackboneParameterWhenFullyTrainable) {
  auto st = testutil::tiny_state({"trades"}, 31, 2);
  st.backbone.trainable = TrainableMask::all();
  const auto& spec = st.backbone.spec;
  const Mat<double> x = testutil::random_images<double>(3, spec.input_dim(), 1);
  const Mat<double> x_adv = testutil::random_images<double>(3, spec.input_dim(), 2);
  const Labels y = testutil::random_labels(3, spec.num_classes, 3);
  auto g = hyperat_gradients(st, 0, x, x_adv, y);
  const auto f = [&] { return hyperat_gradients(st, 0, x, x_adv, y).value; };
  auto bp = st.backbone.params.named();
  auto bg = g.backbone.named();
  for (std::size_t i = 0; i < bp.size(); ++i) {
    EXPECT_LT(fd_relative_error(*bp[i].second, *bg[i].second, f), kTol) << bp[i].first;
  }
}

TEST(DefenseGradient, SiteGradientIsGradientOfDelta) {
  auto st = testutil::tiny_state({"vanilla_at"}, 41);
  const auto& spec = st.backbone.spec;
  const Mat<double> x = testutil::random_images<double>(3, spec.input_dim(), 1);
  const Labels y = testutil::random_labels(3, spec.num_classes, 2);
  SiteDeltas<double> deltas = adapter_deltas(st.specialist(0));
  const auto f = [&] {
    return loss_vanilla_at(VitModel<double>(st.backbone, &deltas).logits(x), y).value;
  };
  const VitModel<double> model(st.backbone, &deltas);
  VitModel<double>::Tape tape;
  const auto obj = loss_vanilla_at(model.forward(x, &tape), y);
  const auto g = model.backward(tape, obj.d_adv, GradRequest{.sites = true});
  for (const auto& s : st.backbone.sites) {
    const auto i = static_cast<std::size_t>(s.index());
    EXPECT_LT(fd_relative_error(deltas[i], g.sites[i], f), kTol) << "site " << s.index();
  }
}

TEST(DefenseGradient, StopGradientRemovesOnlyTheCleanCrossEntropyPath) {
  const Mat<double> zc = testutil::random_mat<double>(3, 5, 1);
  const Mat<double> za = testutil::random_mat<double>(3, 5, 2);
  const Labels y{0, 3, 4};
  DklOptions full;
  full.stop_gradient = false;
  DklOptions sg;
  const auto a = loss_dkl(zc, za, y, full);
  const auto b = loss_dkl(zc, za, y, sg);
  EXPECT_DOUBLE_EQ(a.value, b.value);
  EXPECT_TRUE(a.d_adv.isApprox(b.d_adv, 1e-14));
  const Mat<double> p = softmax_rows(zc);
  const Mat<double> logq = log_softmax_rows(za);
  const Mat<double> diff = a.d_clean - b.d_clean;
  const Mat<double> expected = full.beta * full.w_ce * softmax_backward(p, Mat<double>(-logq)) / 3.0;
  EXPECT_LT((diff - expected).norm(), 1e-12);
}

TEST(MergeGradient, CoefficientGradientMatchesFiniteDifferences) {
  auto st = testutil::tiny_state({"vanilla_at", "trades", "mart"}, 51, 2);
  const auto sp = specialist_deltas(st.specialists());
  const auto& spec = st.backbone.spec;
  const Mat<double> x = testutil::random_images<double>(4, spec.input_dim(), 1);
  const Labels y = testutil::random_labels(4, spec.num_classes, 2);
  CoefficientOptConfig cfg;
  cfg.attack.epsilon = 0.0;  // fixed x_adv = x so the surrogate is smooth in lambda
  auto coeffs = MergeCoefficients::uniform(3, 2, 1.5);
  coeffs.lambda += 0.1 * testutil::random_mat<double>(3, 2, 3);
  const auto ev = detail::merge_surrogate(st.backbone, sp, coeffs, x, y, cfg, true);
  const auto f = [&] { return detail::merge_surrogate(st.backbone, sp, coeffs, x, y, cfg, false).value; };
  EXPECT_LT(fd_relative_error(coeffs.lambda, ev.grad, f), kTol);
}

}  // namespace
