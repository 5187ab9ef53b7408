// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "dudo/cli/gradcheck_suites.hpp"
#include "dudo/uninext/model.hpp"

using namespace dudo;

namespace {

using D = double;

Tensor<D> input(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal<D>(s, rng);
}

ModelConfig toy(Fusion f = Fusion::kAdaC2F, Encoder e = Encoder::kPaSS, Layout l = Layout::kK_UniI, std::size_t n = 1) {
  ModelConfig m;
  m.n_recurrent = n;
  m.image = {8, 4, 1, 1, 0.5, 8, 2, BlockVariant::kXBB};
  m.kspace = {8, 4, 1, 1, 0.5, 8, 2, BlockVariant::kXBB};
  m.c2f_windows = {8, 4};
  m.c2f_heads = 2;
  m.fusion = f;
  m.encoder = e;
  m.layout = l;
  m.cb_depth = 1;
  return m;
}

std::size_t pass_count(Encoder e) {
  ParamStore<float> s;
  Rng rng(0);
  init_pass(s, "p", toy(Fusion::kAdaC2F, e), rng);
  return s.scalar_count();
}

}  // namespace

// --- shallow encoder -------------------------------------------------------------

TEST(Pass, SharedBranchOnEqualInputsGivesEqualFeatures) {
  const auto cfg = toy(Fusion::kMax, Encoder::kShared);
  ParamStore<D> s;
  Rng rng(1);
  init_pass(s, "p", cfg, rng);
  Tape<D> t(false);
  Var<D> img = t.constant(input({2, 8, 8}, 2));
  const auto [a, b] = pass_forward(Net<D>{t, s}, "p", cfg, img, img);
  EXPECT_EQ(a.value(), b.value());
  EXPECT_EQ(a.shape(), (Shape{8, 8, 8}));
}

TEST(Pass, ParameterCountOrdering) {
  const std::size_t shared = pass_count(Encoder::kShared), distinct = pass_count(Encoder::kDistinct),
                    pass = pass_count(Encoder::kPaSS);
  EXPECT_GT(pass, shared);
  EXPECT_LT(pass, distinct + shared);
}

TEST(Pass, ShapeMismatch) {
  const auto cfg = toy();
  ParamStore<D> s;
  Rng rng(1);
  init_pass(s, "p", cfg, rng);
  Tape<D> t(false);
  EXPECT_THROW(pass_forward(Net<D>{t, s}, "p", cfg, t.constant(input({2, 8, 8}, 1)), t.constant(input({2, 4, 8}, 1))),
               ShapeError);
}

// --- coarse-to-fine attention and fusion ------------------------------------------

TEST(C2f, ShapeAndWindowLocality) {
  const std::size_t c = 4;
  ParamStore<D> s;
  Rng rng(3);
  init_wmsa(s, "w16", WmsaSpec{c, 16, 2, true}, rng);
  init_wmsa(s, "w8", WmsaSpec{c, 8, 2, true}, rng);
  Tape<D> t(false);
  Net<D> net{t, s};
  auto x = input({c, 16, 16}, 4);
  auto y = x;
  y(1, 2, 3) += 0.5;  // top-left quadrant

  auto stage = [&](const Tensor<D>& in, const char* name, std::size_t w) {
    return wmsa(net, name, t.constant(in), WmsaSpec{c, w, 2, true}).value();
  };
  const auto a8 = stage(x, "w8", 8), b8 = stage(y, "w8", 8);
  const auto a16 = stage(x, "w16", 16), b16 = stage(y, "w16", 16);
  EXPECT_EQ(a8.shape(), x.shape());
  bool global_spread = false;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t r = 0; r < 16; ++r)
      for (std::size_t col = 0; col < 16; ++col) {
        const bool same_quadrant = r < 8 && col < 8;
        if (!same_quadrant) {
          EXPECT_EQ(a8(ch, r, col), b8(ch, r, col));
          global_spread = global_spread || a16(ch, r, col) != b16(ch, r, col);
        }
      }
  EXPECT_TRUE(global_spread);
}

TEST(Fuse, NoReferenceIgnoresReferenceFeatures) {
  for (Fusion f : all_fusions()) {
    const auto cfg = toy(f);
    ParamStore<D> s;
    Rng rng(5);
    init_fusion(s, "f", cfg, rng);
    Tape<D> t(false);
    Net<D> net{t, s};
    Var<D> tar = t.constant(input({8, 8, 8}, 6));
    const auto a = fuse<D>(net, "f", cfg, tar, t.constant(input({8, 8, 8}, 7)), 0).value();
    const auto b = fuse<D>(net, "f", cfg, tar, t.constant(input({8, 8, 8}, 8)), 0).value();
    EXPECT_EQ(a, b) << to_string(f);
    EXPECT_EQ(a, fuse<D>(net, "f", cfg, tar, std::nullopt, 0).value()) << to_string(f);
  }
}

TEST(Fuse, MaxOfEqualBranches) {
  const auto cfg = toy(Fusion::kMax);
  ParamStore<D> s;
  Tape<D> t(false);
  const auto x = input({8, 4, 4}, 9);
  EXPECT_EQ(fuse<D>(Net<D>{t, s}, "f", cfg, t.constant(x), t.constant(x), 1).value(), x);
}

TEST(Fuse, SingleChannelAdaptiveFusionReducesToMax) {
  ModelConfig cfg = toy(Fusion::kAdaC2F);
  cfg.image.G0 = 1;
  cfg.c2f_heads = 1;
  cfg.c2f_windows = {16, 8};
  ParamStore<D> s;
  Rng rng(10);
  init_fusion(s, "f", cfg, rng);
  Tape<D> t(false);
  const Tensor<D> a(Shape{1, 1, 1}, std::vector<D>{0.3}), b(Shape{1, 1, 1}, std::vector<D>{-1.2});
  EXPECT_EQ(fuse<D>(Net<D>{t, s}, "f", cfg, t.constant(a), t.constant(b), 1).value()[0], 0.3);
  EXPECT_EQ(fuse<D>(Net<D>{t, s}, "f", cfg, t.constant(b), t.constant(a), 1).value()[0], 0.3);
}

TEST(Fuse, AvailableReferenceNeedsFeatures) {
  const auto cfg = toy(Fusion::kMax);
  ParamStore<D> s;
  Tape<D> t(false);
  EXPECT_THROW(fuse<D>(Net<D>{t, s}, "f", cfg, t.constant(input({8, 4, 4}, 1)), std::nullopt, 1), ShapeError);
}

TEST(Fuse, WindowOrderIsTheOnlyDifferenceBetweenAdaptiveVariants) {
  const auto c2f = count_params(toy(Fusion::kAdaC2F)), f2c = count_params(toy(Fusion::kAdaF2C));
  EXPECT_EQ(c2f.total(), f2c.total());
  EXPECT_EQ(toy(Fusion::kAdaF2C).fusion_windows(), (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(toy(Fusion::kAdaC2F).fusion_windows(), (std::vector<std::size_t>{8, 4}));
}

// --- subnetworks ------------------------------------------------------------------

TEST(IUniNeXt, OutputShapeAndReferenceIndependence) {
  for (Fusion f : all_fusions())
    for (Encoder e : all_encoders()) {
      const auto cfg = toy(f, e);
      ParamStore<D> s;
      Rng rng(11);
      init_i_uninext(s, "img", cfg, rng, InitOptions{false, false});
      Tape<D> t(false);
      Net<D> net{t, s};
      Var<D> img = t.constant(input({2, 16, 16}, 12));
      const auto a = i_uninext_forward(net, "img", cfg, img, t.constant(input({2, 16, 16}, 13)), 0).value();
      const auto b = i_uninext_forward(net, "img", cfg, img, t.constant(input({2, 16, 16}, 14)), 0).value();
      EXPECT_EQ(a.shape(), (Shape{2, 16, 16}));
      EXPECT_EQ(a, b) << to_string(f) << " " << to_string(e);
    }
}

TEST(KNeXt, ZeroTailIsIdentityAndShapesHold) {
  const auto cfg = toy();
  ParamStore<D> s;
  Rng rng(15);
  init_k_next(s, "ksp", cfg, 2, rng);
  init_k_next(s, "ksp4", cfg, 4, rng, InitOptions{false, false});
  Tape<D> t(false);
  Net<D> net{t, s};
  const auto k = input({2, 16, 16}, 16);
  EXPECT_EQ(k_next_forward(net, "ksp", cfg, t.constant(k)).value(), k);
  EXPECT_EQ(k_next_forward(net, "ksp4", cfg, t.constant(input({4, 16, 16}, 17))).shape(), (Shape{2, 16, 16}));
  EXPECT_THROW(k_next_forward(net, "ksp", cfg, t.constant(input({3, 16, 16}, 1))), ShapeError);
}

// --- recurrent pipeline -------------------------------------------------------------

TEST(Recurrent, FullySampledReturnsGroundTruth) {
  const auto c = make_case(1, 16, 1.0, kDefaultAcsFraction, RefQuality::kHQ);
  ParamStore<D> s = make_model<D>(toy(), 2, InitOptions{false, false});
  jitter_params(s, 3, 0.5);
  Tape<D> t(false);
  const auto out = recurrent_forward(Net<D>{t, s}, toy(), c.k_sub, c.mask, c.reference, 1);
  EXPECT_EQ(out.i_rec.value(), ifft2c(c.k_sub));
  EXPECT_LT(max_abs_diff(out.i_rec.value(), c.i_gt), 1e-12);
}

TEST(Recurrent, EveryStagePreservesMeasurements) {
  for (Layout l : all_layouts()) {
    const auto cfg = toy(Fusion::kAdaC2F, Encoder::kPaSS, l, 2);
    const auto c = make_case(2, 16, 4.0, kDefaultAcsFraction, RefQuality::kLQ);
    ParamStore<D> s = make_model<D>(cfg, 4, InitOptions{false, false});
    jitter_params(s, 5, 0.2);
    Tape<D> t(false);
    const auto out = recurrent_forward(Net<D>{t, s}, cfg, c.k_sub, c.mask, c.reference, c.ac);
    ASSERT_EQ(out.blocks.size(), 2u);
    for (const auto& b : out.blocks)
      for (const Var<D>& v : {b.k_stage, b.k_block})
        for (std::size_t ch = 0; ch < 2; ++ch)
          for (std::size_t r = 0; r < 16; ++r)
            for (std::size_t col = 0; col < 16; ++col)
              if (c.mask.column(col)) ASSERT_EQ(v.value()(ch, r, col), c.k_sub(ch, r, col)) << to_string(l);
  }
}

TEST(Recurrent, UntrainedModelReturnsZeroFilled) {
  const auto cfg = toy(Fusion::kAdaC2F, Encoder::kPaSS, Layout::kK_UniI, 2);
  const auto c = make_case(3, 16, 6.0, kDefaultAcsFraction, RefQuality::kHQ);
  ParamStore<D> s = make_model<D>(cfg, 6);
  Tape<D> t(false);
  const auto out = recurrent_forward(Net<D>{t, s}, cfg, c.k_sub, c.mask, c.reference, 1);
  EXPECT_LT(max_abs_diff(out.i_rec.value(), ifft2c(c.k_sub)), 1e-12);
}

TEST(Recurrent, NoReferenceIndependenceAcrossLayouts) {
  for (Layout l : all_layouts()) {
    const auto cfg = toy(Fusion::kAdaC2F, Encoder::kPaSS, l);
    const auto c = make_case(7, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ);
    ParamStore<D> s = make_model<D>(cfg, 8, InitOptions{false, false});
    jitter_params(s, 9, 0.2);
    Tape<D> t(false);
    Net<D> net{t, s};
    const auto a = recurrent_forward(net, cfg, c.k_sub, c.mask, c.reference, 0).i_rec.value();
    const auto b = recurrent_forward(net, cfg, c.k_sub, c.mask, input({2, 16, 16}, 10), 0).i_rec.value();
    EXPECT_EQ(a, b) << to_string(l);
  }
}

TEST(Recurrent, MaskMismatch) {
  const auto cfg = toy();
  ParamStore<D> s = make_model<D>(cfg, 1);
  Tape<D> t(false);
  const auto c = make_case(3, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ);
  const auto wrong = make_cartesian_mask(32, 32, 4.0, kDefaultAcsFraction, 0);
  EXPECT_THROW(recurrent_forward(Net<D>{t, s}, cfg, c.k_sub, wrong, c.reference, 1), ShapeError);
}

// --- parameter accounting -------------------------------------------------------------

TEST(Params, SharingMakesCountIndependentOfN) {
  auto cfg = toy();
  const std::size_t one = count_params(cfg).total();
  for (std::size_t n : {2u, 3u, 5u}) {
    cfg.n_recurrent = n;
    EXPECT_EQ(count_params(cfg).total(), one);
  }
  cfg.share_recurrent_params = false;
  cfg.n_recurrent = 3;
  EXPECT_EQ(count_params(cfg).total(), 3 * one);
}

TEST(Params, DefaultConfiguration) {
  const auto b = count_params(ModelConfig{});
  EXPECT_EQ(b.total(), 2947634u);
  EXPECT_GE(b.total(), 2'700'000u);
  EXPECT_LE(b.total(), 4'500'000u);
  std::size_t sum = 0;
  for (const auto& [name, n] : b.parts) sum += n;
  EXPECT_EQ(sum, b.total());
  EXPECT_EQ(b.image_total + b.kspace_total, b.total());
}

TEST(Params, SubmoduleKeys) {
  EXPECT_EQ(submodule_of("img.bb.b0.drdb.l0.w"), "img.bb");
  EXPECT_EQ(submodule_of("ksp.r1.sfe.w"), "ksp.r1.sfe");
  EXPECT_EQ(submodule_of("img.se.fc1.b"), "img.se");
}

TEST(Params, EnumNamesRoundTrip) {
  for (Fusion f : all_fusions()) EXPECT_EQ(parse_fusion(to_string(f)), f);
  for (Encoder e : all_encoders()) EXPECT_EQ(parse_encoder(to_string(e)), e);
  for (Layout l : all_layouts()) EXPECT_EQ(parse_layout(to_string(l)), l);
  EXPECT_THROW(parse_fusion("Mean"), ConfigError);
}

// --- gradients ----------------------------------------------------------------------------

TEST(ModelGradients, EncoderAndFusionBlocks) {
  for (const auto& c : gradcheck_cases(GradScope::kBlocks)) {
    if (c.name != "pass" && c.name != "adac2f") continue;
    const auto r = c.run(c.tol);
    EXPECT_TRUE(r.passed) << c.name << " max rel err " << r.max_rel_err;
  }
}

TEST(ModelGradients, ImageNetworkOnSixteenBySixteen) {
  ModelConfig cfg = toy();
  cfg.image.D = 2;
  const auto r = detail::check_block(
      {2, 16, 16}, [&](ParamStore<D>& s, Rng& rng) { init_i_uninext(s, "img", cfg, rng, InitOptions{false, false}); },
      [&](const Net<D>& net, Var<D> x) { return i_uninext_forward(net, "img", cfg, x, x, 1); }, kDefaultTol, 41, 1);
  EXPECT_TRUE(r.passed) << r.max_rel_err;
}

class EndToEnd : public ::testing::TestWithParam<std::tuple<Layout, Fusion>> {};

TEST_P(EndToEnd, MatchesFiniteDifferences) {
  const auto [layout, fusion] = GetParam();
  const ModelConfig cfg = toy(fusion, Encoder::kPaSS, layout);
  ParamStore<D> s = make_model<D>(cfg, 3, InitOptions{false, false});
  jitter_params(s, 11, 0.05);
  const auto c = make_case(5, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ);
  Objective f = [&](Tape<D>& t, ParamStore<D>& p) {
    auto out = recurrent_forward(Net<D>{t, p}, cfg, c.k_sub, c.mask, c.reference, 1);
    return dudo_loss(out.blocks, c.k_gt, c.i_gt, cfg.n_recurrent);
  };
  const auto r = finite_diff_check(f, s, {1e-4, kDefaultTol, 1, 7});
  EXPECT_TRUE(r.passed) << r.max_rel_err;
}

INSTANTIATE_TEST_SUITE_P(
    AllLayoutsAndFusions, EndToEnd,
    ::testing::Combine(::testing::ValuesIn(all_layouts()), ::testing::ValuesIn(all_fusions())),
    [](const auto& info) {
      return to_string(std::get<0>(info.param)) + "_" + to_string(std::get<1>(info.param));
    });
