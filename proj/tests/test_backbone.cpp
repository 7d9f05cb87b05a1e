#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace hyperat;

namespace {

TEST(BackboneSpec, RejectsIndivisibleShapes) {
  BackboneSpec s;
  s.image_size = 30;
  s.patch_size = 4;
  EXPECT_THROW(s.validate(), ConfigError);
  s = BackboneSpec{};
  s.embed_dim = 30;
  s.heads = 4;
  EXPECT_THROW(s.validate(), ConfigError);
  s = BackboneSpec{};
  s.depth = 0;
  EXPECT_THROW(s.validate(), ConfigError);
  EXPECT_THROW(init_backbone<float>(s, 0), ConfigError);
}

TEST(BackboneSpec, FourLayersGiveTwelveSites) {
  BackboneSpec s;
  s.image_size = 32;
  s.patch_size = 4;
  s.embed_dim = 64;
  s.depth = 4;
  s.heads = 4;
  s.num_classes = 10;
  const auto st = init_backbone<float>(s, 0);
  ASSERT_EQ(st.sites.size(), 12u);
  std::set<int> seen;
  for (const auto& site : st.sites) {
    EXPECT_TRUE(seen.insert(site.index()).second);
    const auto& w = st.params.site_weight(site);
    EXPECT_EQ(w.rows(), site.out_dim);
    EXPECT_EQ(w.cols(), site.in_dim);
  }
  EXPECT_EQ(st.sites[0].out_dim, 192);
  EXPECT_EQ(st.sites[1].out_dim, 256);
  EXPECT_EQ(st.sites[2].in_dim, 256);
}

TEST(BackboneSpec, DefaultsMatchDeskBackbone) {
  const BackboneSpec s;
  EXPECT_EQ(s.image_size, 28);
  EXPECT_EQ(s.patch_size, 4);
  EXPECT_EQ(s.embed_dim, 64);
  EXPECT_EQ(s.depth, 4);
  EXPECT_EQ(s.heads, 4);
  EXPECT_EQ(s.mlp_ratio, 4);
  EXPECT_NO_THROW(s.validate());
}

TEST(Backbone, InitIsDeterministicPerSeed) {
  const auto a = init_backbone<float>(testutil::tiny_spec(), 3);
  const auto b = init_backbone<float>(testutil::tiny_spec(), 3);
  const auto c = init_backbone<float>(testutil::tiny_spec(), 4);
  const auto pa = a.params.named(), pb = b.params.named(), pc = c.params.named();
  bool any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(*pa[i].second, *pb[i].second) << pa[i].first;
    any_diff |= *pa[i].second != *pc[i].second;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Backbone, TuningMaskCoversOnlyHeadAndNorms) {
  const auto st = init_backbone<float>(testutil::tiny_spec(2), 0);
  for (const auto& [name, m] : st.params.named()) {
    const auto g = param_group(name);
    EXPECT_EQ(st.trainable(name), g == "head" || g == "norm") << name;
  }
  EXPECT_FALSE(st.trainable("patch_embed.w"));
  EXPECT_FALSE(st.trainable("pos_embed"));
  EXPECT_FALSE(st.trainable("blocks.0.attn.qkv.w"));
  EXPECT_THROW(param_group("nonsense"), LookupError);
}

TEST(Backbone, ZeroDeltaIsIdentity) {
  const auto st = init_backbone<float>(BackboneSpec{}, 1);
  const Mat<float> x = testutil::random_images<float>(5, st.spec.input_dim(), 2);
  const Mat<float> base = forward_logits(st, x);
  const auto zeros = zero_deltas(st);
  const Mat<float> with_zero = forward_logits(st, x, &zeros);
  EXPECT_EQ(base.rows(), 5);
  EXPECT_EQ(base.cols(), 10);
  EXPECT_LE((base - with_zero).cwiseAbs().maxCoeff(), 1e-6f);
  const SiteDeltas<float> empty;
  EXPECT_EQ(forward_logits(st, x, &empty), base);
}

TEST(Backbone, DeltaChangesOutputOnlyThroughItsSite) {
  const auto st = init_backbone<double>(testutil::tiny_spec(2), 1);
  const Mat<double> x = testutil::random_images<double>(3, st.spec.input_dim(), 2);
  auto deltas = zero_deltas(st);
  deltas[4] = testutil::random_mat<double>(st.sites[4].out_dim, st.sites[4].in_dim, 3, 0.1);
  auto moved = st;
  moved.params.site_weight(st.sites[4]) += deltas[4];
  EXPECT_LT((forward_logits(st, x, &deltas) - forward_logits(moved, x)).norm(), 1e-12);
  EXPECT_GT((forward_logits(st, x, &deltas) - forward_logits(st, x)).norm(), 1e-6);
}

TEST(Backbone, ShapeErrors) {
  const auto st = init_backbone<float>(testutil::tiny_spec(), 1);
  EXPECT_THROW(forward_logits(st, Mat<float>(Mat<float>::Zero(2, 10))), DimensionError);
  auto deltas = zero_deltas(st);
  deltas[0] = Mat<float>::Zero(3, 3);
  EXPECT_THROW(forward_logits(st, Mat<float>(Mat<float>::Zero(2, st.spec.input_dim())), &deltas), DimensionError);
  SiteDeltas<float> short_map(1);
  EXPECT_THROW(VitModel<float>(st, &short_map), DimensionError);
}

TEST(Backbone, RowsAreIndependent) {
  const auto st = init_backbone<double>(testutil::tiny_spec(2), 5);
  const Mat<double> x = testutil::random_images<double>(4, st.spec.input_dim(), 6);
  const Mat<double> all = forward_logits(st, x);
  for (int i = 0; i < 4; ++i) {
    const Mat<double> one = forward_logits(st, Mat<double>(x.row(i)));
    EXPECT_LT((one - all.row(i)).norm(), 1e-12);
  }
}

TEST(Backbone, CastRoundTripIsExact) {
  const auto st = init_backbone<float>(testutil::tiny_spec(), 8);
  const auto back = cast_backbone<float>(cast_backbone<double>(st));
  const auto a = st.params.named(), b = back.params.named();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second);
  EXPECT_EQ(back.sites, st.sites);
}

}  // namespace
