// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>

#include "dudo/traineval/evaluate.hpp"
#include "dudo/traineval/train.hpp"
#include "oracles.hpp"

using namespace dudo;

namespace {

using D = double;

Tensor<D> input(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  return random_normal<D>(s, rng);
}

ModelConfig tiny_model() {
  ModelConfig m;
  m.n_recurrent = 1;
  m.image = {8, 4, 1, 1, 0.5, 8, 2, BlockVariant::kXBB};
  m.kspace = {8, 4, 1, 1, 0.5, 8, 2, BlockVariant::kXBB};
  m.c2f_windows = {8, 4};
  m.c2f_heads = 2;
  m.cb_depth = 1;
  return m;
}

TrainConfig tiny_train(std::size_t steps, std::uint64_t seed = 0) {
  TrainConfig t;
  t.image_size = 16;
  t.accel_min = 2.0;
  t.accel_max = 4.0;
  t.steps = steps;
  t.seed = seed;
  t.lr = 1e-3;
  return t;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
}

}  // namespace

// --- loss ----------------------------------------------------------------------

TEST(Loss, PerfectIntermediatesGiveZero) {
  const auto c = make_case(1, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ);
  Tape<D> t;
  BlockIntermediates<D> b{t.constant(c.k_gt), t.constant(c.k_gt)};
  EXPECT_NEAR(dudo_loss<D>({b}, c.k_gt, c.i_gt, 1).value().item(), 0.0, 1e-12);
}

TEST(Loss, SingleEntryOffByThree) {
  const auto k_gt = input({2, 4, 4}, 2);
  const auto i_gt = ifft2c(k_gt);
  auto off = k_gt;
  off(1, 2, 3) += 3.0;
  Tape<D> t;
  BlockIntermediates<D> b{t.constant(off), t.constant(k_gt)};
  EXPECT_NEAR(dudo_loss<D>({b}, k_gt, i_gt, 1).value().item(), 3.0, 1e-12);
}

TEST(Loss, TwoBlocksMatchDirectNorms) {
  const auto k_gt = input({2, 8, 8}, 3);
  const auto i_gt = oracle::dft2c(k_gt, true);
  std::vector<std::pair<Tensor<D>, Tensor<D>>> raw{{input({2, 8, 8}, 4), input({2, 8, 8}, 5)},
                                                   {input({2, 8, 8}, 6), input({2, 8, 8}, 7)}};
  Tape<D> t;
  std::vector<BlockIntermediates<D>> blocks;
  for (const auto& [a, b] : raw) blocks.push_back({t.constant(a), t.constant(b)});
  EXPECT_NEAR(dudo_loss(blocks, k_gt, i_gt, 2).value().item(), oracle::dudo_loss(raw, k_gt, i_gt), 1e-9);
}

TEST(Loss, LengthMismatch) {
  const auto k = input({2, 4, 4}, 1);
  Tape<D> t;
  BlockIntermediates<D> b{t.constant(k), t.constant(k)};
  EXPECT_THROW(dudo_loss<D>({b}, k, k, 2), ShapeError);
}

TEST(Loss, Variants) {
  const auto k_gt = input({2, 4, 4}, 2);
  auto off = k_gt;
  off[0] += 2.0;
  Tape<D> t;
  BlockIntermediates<D> b{t.constant(off), t.constant(k_gt)};
  const auto i_gt = ifft2c(k_gt);
  EXPECT_NEAR(dudo_loss<D>({b}, k_gt, i_gt, 1, LossKind::kSquaredL2).value().item(), 4.0, 1e-12);
  EXPECT_NEAR(dudo_loss<D>({b}, k_gt, i_gt, 1, LossKind::kMse).value().item(), 4.0 / 32.0, 1e-12);
  for (LossKind k : {LossKind::kL2, LossKind::kSquaredL2, LossKind::kMse}) EXPECT_EQ(parse_loss_kind(to_string(k)), k);
}

// --- optimizer -----------------------------------------------------------------

TEST(Adam, FirstStepByHand) {
  ParamStore<D> p;
  p.add("w", Tensor<D>::scalar(1.0));
  p.grad("w")[0] = 0.3;
  AdamState<D> st;
  const AdamConfig cfg{1e-2, 0.5, 0.999, 1e-8, 0.0};
  adam_step(p, st, cfg);
  const double expected = 1.0 - 1e-2 * 0.3 / (0.3 + 1e-8 / std::sqrt(1.0 - 0.999));
  EXPECT_NEAR(p.value("w")[0], expected, 1e-15);
  EXPECT_NEAR(st.m[0][0], 0.15, 1e-15);
  EXPECT_NEAR(st.v[0][0], 0.001 * 0.09, 1e-15);
}

TEST(Adam, ZeroGradientLeavesParamsAndDecaysMoments) {
  ParamStore<D> p;
  p.add("w", Tensor<D>(Shape{2}, std::vector<D>{1.0, -2.0}));
  AdamState<D> st;
  const AdamConfig cfg;
  adam_step(p, st, cfg);
  EXPECT_EQ(p.value("w"), (Tensor<D>(Shape{2}, std::vector<D>{1.0, -2.0})));
  p.grad("w")[0] = 1.0;
  adam_step(p, st, cfg);
  p.zero_grad();
  const double m = st.m[0][0], v = st.v[0][0];
  const D before = p.value("w")[1];
  adam_step(p, st, cfg);
  EXPECT_NEAR(st.m[0][0], cfg.beta1 * m, 1e-18);
  EXPECT_NEAR(st.v[0][0], cfg.beta2 * v, 1e-18);
  EXPECT_EQ(p.value("w")[1], before);
}

TEST(Adam, StateShapeMismatch) {
  ParamStore<D> p;
  p.add("w", Tensor<D>(Shape{2}));
  AdamState<D> st;
  st.m.emplace_back(Shape{3});
  st.v.emplace_back(Shape{3});
  EXPECT_THROW(adam_step(p, st, AdamConfig{}), ShapeError);
}

TEST(Adam, ClippingBoundsTheGradientNorm) {
  ParamStore<D> p;
  p.add("w", Tensor<D>(Shape{2}));
  p.grad("w")[0] = 3.0;
  p.grad("w")[1] = 4.0;
  EXPECT_DOUBLE_EQ(grad_norm(p), 5.0);
  AdamState<D> a, b;
  auto q = p.cast<D>();
  q.grad("w")[0] = 0.3;
  q.grad("w")[1] = 0.4;
  adam_step(p, a, AdamConfig{1e-2, 0.5, 0.999, 1e-8, 0.5});
  adam_step(q, b, AdamConfig{1e-2, 0.5, 0.999, 1e-8, 0.0});
  EXPECT_NEAR(a.m[0][0], b.m[0][0], 1e-15);
}

// --- metrics ---------------------------------------------------------------------

TEST(Metrics, PsnrExamples) {
  const auto gt = make_case(1, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ).i_gt;
  EXPECT_EQ(psnr(gt, gt), std::numeric_limits<double>::infinity());
  std::vector<double> a(64, 0.5), b(64, 0.6);
  EXPECT_NEAR(psnr_magnitude(a, b), 20.0, 1e-12);
  const auto noisy = [&] {
    auto n = gt;
    Rng rng(2);
    for (auto& v : n.data()) v += 0.05 * rng.normal();
    return n;
  }();
  EXPECT_NEAR(psnr(noisy, gt), oracle::psnr(noisy, gt), 1e-9);
  EXPECT_THROW(psnr(gt, Tensor<D>(Shape{2, 8, 8})), ShapeError);
}

TEST(Metrics, SsimExamples) {
  Rng rng(3);
  std::vector<double> x(256), y(256), bin(256), inv(256);
  for (std::size_t i = 0; i < 256; ++i) {
    x[i] = rng.uniform();
    y[i] = rng.uniform();
    bin[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    inv[i] = 1.0 - bin[i];
  }
  EXPECT_NEAR(ssim_magnitude(x, x, 16, 16), 1.0, 1e-12);
  const double s = ssim_magnitude(bin, inv, 16, 16);
  EXPECT_LT(s, 1.0);
  EXPECT_EQ(s, ssim_magnitude(inv, bin, 16, 16));
  EXPECT_NEAR(ssim_magnitude(x, y, 16, 16), oracle::ssim(x, y, 16, 16), 1e-9);
  EXPECT_THROW(ssim_magnitude(std::vector<double>(100), std::vector<double>(100), 10, 10), ShapeError);
}

// --- data -------------------------------------------------------------------------

TEST(Data, MeasurementsAreSharedAcrossConditions) {
  const auto hq = make_case(9, 32, 6.0, kDefaultAcsFraction, RefQuality::kHQ);
  const auto none = make_case(9, 32, 6.0, kDefaultAcsFraction, RefQuality::kAbsent);
  EXPECT_EQ(hq.k_sub, none.k_sub);
  EXPECT_EQ(hq.ac, 1);
  EXPECT_EQ(none.ac, 0);
  for (D v : none.reference.data()) EXPECT_EQ(v, 0.0);
}

TEST(Data, TrainingAndHeldOutSeedsAreDisjoint) {
  const auto tr = training_seed_range(kMaxTrainSeed, (std::uint64_t{1} << 32) - 1);
  const auto ho = held_out_seed_range(0, kMaxEvalCases);
  EXPECT_FALSE(tr.overlaps(ho));
  EXPECT_TRUE(ho.overlaps(held_out_seed_range(0, 1)));
}

// --- training ---------------------------------------------------------------------

TEST(Train, ZeroStepsKeepInitialisation) {
  const auto m = tiny_model();
  const auto init = make_model<float>(m, 4);
  const auto r = train(m, tiny_train(0), init);
  EXPECT_EQ(r.params, init);
  EXPECT_TRUE(r.losses.empty());
}

TEST(Train, RerunsAreBitIdentical) {
  const auto m = tiny_model();
  const auto a = train(m, tiny_train(4, 3), make_model<float>(m, 5));
  const auto b = train(m, tiny_train(4, 3), make_model<float>(m, 5));
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(a.params, b.params);
  EXPECT_EQ(a.stream_hash, b.stream_hash);
  EXPECT_EQ(a.stream_hash, training_stream_hash(tiny_train(4, 3)));
  EXPECT_NE(a.stream_hash, training_stream_hash(tiny_train(4, 4)));
}

TEST(Train, ConditionFrequencies) {
  TrainConfig cfg = tiny_train(3000);
  std::array<std::size_t, 3> counts{};
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    Rng rng(mix_seed(training_case_seed(cfg.seed, s), kStreamCondition));
    ++counts[condition_slot(draw_condition(rng, cfg.ref_probs))];
  }
  for (std::size_t n : counts) {
    EXPECT_GE(n / 3000.0, 0.28);
    EXPECT_LE(n / 3000.0, 0.39);
  }
  EXPECT_EQ(draw_training_case(cfg, 17).quality, [&] {
    Rng rng(mix_seed(training_case_seed(cfg.seed, 17), kStreamCondition));
    return draw_condition(rng, cfg.ref_probs);
  }());
}

TEST(Train, AccelerationsStayInRange) {
  TrainConfig cfg = tiny_train(50);
  cfg.image_size = 32;
  cfg.accel_min = 4.0;
  cfg.accel_max = 8.0;
  for (std::size_t s = 0; s < cfg.steps; ++s) {
    const auto c = draw_training_case(cfg, s);
    EXPECT_GE(c.accel, 4.0);
    EXPECT_LE(c.accel, 8.0);
    EXPECT_EQ(c.mask.sampled_count(), static_cast<std::size_t>(std::lround(32 / c.accel)));
  }
}

TEST(Train, DivergenceReportsTheStep) {
  const auto m = tiny_model();
  TrainConfig cfg = tiny_train(50);
  cfg.lr = 1e30;
  try {
    train(m, cfg, make_model<float>(m, 1, InitOptions{false, false}));
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("training step"), std::string::npos) << e.what();
  }
}

TEST(Train, ConfigValidation) {
  TrainConfig cfg = tiny_train(1);
  cfg.ref_probs = {0.5, 0.5, 0.5};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_train(1);
  cfg.accel_max = 16.0;  // 1 column left, 2 ACS columns
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = tiny_train(1);
  cfg.image_size = 48;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Train, LossDescendsAtToyScale) {
  ModelConfig m = tiny_model();
  m.n_recurrent = 2;
  std::vector<double> first, last;
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    TrainConfig cfg = tiny_train(200, seed);
    cfg.image_size = 32;
    cfg.accel_min = 4.0;
    cfg.accel_max = 8.0;
    const auto r = train(m, cfg, make_model<float>(m, seed));
    first.push_back(r.losses.front());
    last.push_back(r.losses.back());
  }
  EXPECT_LT(median(last), median(first));
}

TEST(Train, FitsASingleFixedCase) {
  const ModelConfig m = tiny_model();
  const auto c = make_case(5, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ);
  auto params = make_model<double>(m, 5);
  AdamState<double> st;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  params.zero_grad();
  std::vector<double> losses;
  for (int step = 0; step < 150; ++step) {
    losses.push_back(train_step_loss(params, m, c, LossKind::kL2));
    adam_step(params, st, cfg);
    params.zero_grad();
  }
  EXPECT_LT(losses.back(), 0.5 * losses.front());
}

// --- evaluation -------------------------------------------------------------------

TEST(Evaluate, FullySampledIsExact) {
  const auto m = tiny_model();
  auto params = make_model<double>(m, 2, InitOptions{false, false});
  EvalConfig cfg;
  cfg.n_cases = 2;
  cfg.accels = {1.0};
  const auto r = evaluate(params, m, cfg, 16);
  for (const auto& rec : r.records) EXPECT_EQ(rec.psnr_db, std::numeric_limits<double>::infinity());
}

TEST(Evaluate, TableShapeAndBaseline) {
  const auto m = tiny_model();
  auto params = make_model<float>(m, 3);
  EvalConfig cfg;
  cfg.n_cases = 3;
  cfg.accels = {2.0, 4.0};
  cfg.seed = 11;
  const auto r = evaluate(params, m, cfg, 16);
  ASSERT_EQ(r.summary.size(), 6u);
  ASSERT_EQ(r.records.size(), 18u);
  for (std::size_t i = 0; i < r.zero_filled.size(); ++i) {
    const auto& z = r.zero_filled[i];
    const auto pair = gen_phantom_pair(16, mix_seed(z.seed, kStreamPhantom));
    const auto mask = make_cartesian_mask(16, 16, z.accel, kDefaultAcsFraction, mix_seed(z.seed, kStreamMask));
    const auto gt = oracle::dft2c(oracle::dft2c(pair.contrast_a, false), true);
    const auto zf = oracle::dft2c(undersample(oracle::dft2c(pair.contrast_a, false), mask), true);
    EXPECT_NEAR(z.psnr_db, oracle::psnr(zf, gt), 1e-9);
    EXPECT_NEAR(z.ssim, oracle::ssim(oracle::magnitude(zf), oracle::magnitude(gt), 16, 16), 1e-9);
    EXPECT_LE(r.records[i].ssim, 1.0);
  }
}

TEST(Evaluate, RefusesOverlappingSeeds) {
  const auto m = tiny_model();
  auto params = make_model<float>(m, 3);
  EvalConfig cfg;
  cfg.n_cases = 2;
  const SeedRange bad{held_out_case_seed(cfg.seed, 1), held_out_case_seed(cfg.seed, 1) + 5};
  EXPECT_THROW(evaluate(params, m, cfg, 16, kDefaultAcsFraction, bad), ConfigError);
  EXPECT_NO_THROW(evaluate(params, m, cfg, 16, kDefaultAcsFraction, training_seed_range(0, 100)));
}

TEST(Evaluate, MeanStd) {
  const auto [m, s] = mean_std({1.0, 3.0});
  EXPECT_EQ(m, 2.0);
  EXPECT_EQ(s, 1.0);
  EXPECT_EQ(mean_std({1.0, std::numeric_limits<double>::infinity()}).first, std::numeric_limits<double>::infinity());
}
