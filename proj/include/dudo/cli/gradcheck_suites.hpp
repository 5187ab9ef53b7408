// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference suites over primitive ops, blocks and the N = 1 model.
// All run in 64-bit at a jittered parameter point.

#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "dudo/diffcore/gradcheck.hpp"
#include "dudo/traineval/data.hpp"
#include "dudo/traineval/loss.hpp"

namespace dudo {

enum class GradScope { kOps, kBlocks, kModel };

inline std::string to_string(GradScope s) {
  switch (s) {
    case GradScope::kOps: return "ops";
    case GradScope::kBlocks: return "blocks";
    case GradScope::kModel: return "model";
  }
  return "?";
}

inline GradScope parse_grad_scope(const std::string& s) {
  if (s == "ops") return GradScope::kOps;
  if (s == "blocks") return GradScope::kBlocks;
  if (s == "model") return GradScope::kModel;
  throw ConfigError("unknown gradcheck scope '" + s + "' (expected ops, blocks or model)");
}

/// Tolerance for ops that are C-infinity in their inputs.
inline constexpr double kSmoothTol = 1e-6;
/// Tolerance for piecewise ops, blocks and the model.
inline constexpr double kDefaultTol = 1e-4;

struct GradCase {
  std::string name;
  double tol = kDefaultTol;
  std::function<GradCheckReport(double tol)> run;
};

struct GradCaseResult {
  std::string name;
  double tol = 0.0;
  GradCheckReport report;
  double seconds = 0.0;
};

namespace detail {

using D = double;
using Inputs = std::vector<Var<D>>;

inline std::string input_name(std::size_t i) { return "in" + std::to_string(i); }

/// Projects `out` onto a fixed random direction so every output entry matters.
inline Var<D> project(Tape<D>& tape, Var<D> out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, tape.constant(random_normal<D>(out.shape(), rng, 1.0))));
}

/// Checks d/d(inputs) of an op applied to N(0, 1) inputs.
inline GradCheckReport check_op(const std::vector<Shape>& shapes, const std::function<Var<D>(Tape<D>&, Inputs&)>& op,
                                double tol, std::uint64_t seed) {
  ParamStore<D> store;
  Rng rng(seed);
  for (std::size_t i = 0; i < shapes.size(); ++i) store.add(input_name(i), random_normal<D>(shapes[i], rng, 1.0));
  Objective f = [&](Tape<D>& tape, ParamStore<D>& p) {
    Inputs in;
    for (std::size_t i = 0; i < shapes.size(); ++i) in.push_back(tape.param(p, input_name(i)));
    return project(tape, op(tape, in), seed + 1);
  };
  return finite_diff_check(f, store, {1e-4, tol, 0, seed});
}

/// Checks a block w.r.t. its parameters and its input.
inline GradCheckReport check_block(const Shape& input, const std::function<void(ParamStore<D>&, Rng&)>& init,
                                   const std::function<Var<D>(const Net<D>&, Var<D>)>& forward, double tol,
                                   std::uint64_t seed, std::size_t max_entries = 0) {
  ParamStore<D> store;
  Rng rng(seed);
  init(store, rng);
  jitter_params(store, seed + 2, 0.05);
  store.add("input", random_normal<D>(input, rng, 1.0));
  Objective f = [&](Tape<D>& tape, ParamStore<D>& p) {
    Net<D> net{tape, p};
    return project(tape, forward(net, tape.param(p, "input")), seed + 1);
  };
  return finite_diff_check(f, store, {1e-4, tol, max_entries, seed});
}

inline ModelConfig gradcheck_model_config() {
  ModelConfig m;
  m.n_recurrent = 1;
  m.image = {8, 8, 2, 2, 0.5, 8, 2, BlockVariant::kXBB};
  m.kspace = {8, 8, 1, 2, 0.5, 8, 2, BlockVariant::kXBB};
  m.c2f_windows = {8, 4};
  m.c2f_heads = 2;
  return m;
}

}  // namespace detail

/// `draw` shifts every case's random inputs; draw 0 is the reference suite.
inline std::vector<GradCase> gradcheck_cases(GradScope scope, std::uint64_t draw = 0) {
  using namespace detail;
  std::vector<GradCase> cases;
  auto op = [&](std::string name, std::vector<Shape> shapes, std::function<Var<D>(Tape<D>&, Inputs&)> fn,
                double tol, std::uint64_t seed) {
    cases.push_back({std::move(name), tol, [=](double t) { return check_op(shapes, fn, t, seed + 1000 * draw); }});
  };
  auto block = [&](std::string name, Shape in, std::function<void(ParamStore<D>&, Rng&)> init,
                   std::function<Var<D>(const Net<D>&, Var<D>)> fwd, std::uint64_t seed) {
    cases.push_back({std::move(name), kDefaultTol, [=](double t) { return check_block(in, init, fwd, t, seed + 1000 * draw); }});
  };

  switch (scope) {
    case GradScope::kOps: {
      const Shape m{3, 4, 5};
      op("add", {m, m}, [](Tape<D>&, Inputs& x) { return add(x[0], x[1]); }, kSmoothTol, 1);
      op("sub", {m, m}, [](Tape<D>&, Inputs& x) { return sub(x[0], x[1]); }, kSmoothTol, 2);
      op("mul", {m, m}, [](Tape<D>&, Inputs& x) { return mul(x[0], x[1]); }, kSmoothTol, 3);
      op("scale", {m}, [](Tape<D>&, Inputs& x) { return scale(x[0], -1.7); }, kSmoothTol, 4);
      op("add_broadcast", {m, {4, 5}}, [](Tape<D>&, Inputs& x) { return add_broadcast(x[0], x[1]); }, kSmoothTol, 5);
      op("maximum", {m, m}, [](Tape<D>&, Inputs& x) { return maximum(x[0], x[1]); }, kDefaultTol, 6);
      op("relu", {m}, [](Tape<D>&, Inputs& x) { return relu(x[0]); }, kDefaultTol, 7);
      op("gelu", {m}, [](Tape<D>&, Inputs& x) { return gelu(x[0]); }, kSmoothTol, 8);
      op("sigmoid", {m}, [](Tape<D>&, Inputs& x) { return sigmoid(x[0]); }, kSmoothTol, 9);
      op("sum", {m}, [](Tape<D>&, Inputs& x) { return sum(x[0]); }, kSmoothTol, 10);
      op("sum_squares", {m}, [](Tape<D>&, Inputs& x) { return sum_squares(x[0]); }, kSmoothTol, 11);
      op("l2_norm", {m}, [](Tape<D>&, Inputs& x) { return l2_norm(x[0]); }, kSmoothTol, 12);
      op("mean_spatial", {m}, [](Tape<D>&, Inputs& x) { return mean_spatial(x[0]); }, kSmoothTol, 13);
      op("channel_scale", {m, {3}}, [](Tape<D>&, Inputs& x) { return channel_scale(x[0], x[1]); }, kSmoothTol, 14);
      op("reshape", {m}, [](Tape<D>&, Inputs& x) { return reshape(x[0], {12, 5}); }, kSmoothTol, 15);
      op("gather", {{2, 3}},
         [](Tape<D>&, Inputs& x) {
           auto idx = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{5, 0, -1, 0, 3, 2, 2, 4});
           return gather(x[0], idx, {2, 4});
         },
         kSmoothTol, 16);
      op("concat", {m, {2, 4, 5}}, [](Tape<D>&, Inputs& x) { return concat(x); }, kSmoothTol, 17);
      op("slice_leading", {m}, [](Tape<D>&, Inputs& x) { return slice_leading(x[0], 1, 2); }, kSmoothTol, 18);
      op("select", {m, m},
         [](Tape<D>&, Inputs& x) {
           std::vector<std::uint8_t> mask(60);
           for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i * 7 % 3) == 0;
           return select(x[0], x[1], std::make_shared<const std::vector<std::uint8_t>>(std::move(mask)));
         },
         kSmoothTol, 19);
      op("conv2d", {{3, 6, 5}, {4, 3, 3, 3}, {4}}, [](Tape<D>&, Inputs& x) { return conv2d<D>(x[0], x[1], x[2]); },
         kSmoothTol, 20);
      op("conv2d_dilated", {{2, 7, 7}, {3, 2, 3, 3}, {3}},
         [](Tape<D>&, Inputs& x) { return conv2d<D>(x[0], x[1], x[2], 2); }, kSmoothTol, 21);
      op("conv2d_1x1", {{3, 4, 4}, {2, 3, 1, 1}}, [](Tape<D>&, Inputs& x) { return conv2d<D>(x[0], x[1], std::nullopt); },
         kSmoothTol, 22);
      op("dense", {{2, 3, 4}, {4, 5}, {5}}, [](Tape<D>&, Inputs& x) { return dense<D>(x[0], x[1], x[2]); }, kSmoothTol, 23);
      op("matmul", {{2, 3, 4}, {2, 4, 5}}, [](Tape<D>&, Inputs& x) { return matmul(x[0], x[1]); }, kSmoothTol, 24);
      op("matmul_transposed", {{2, 3, 4}, {2, 5, 4}}, [](Tape<D>&, Inputs& x) { return matmul(x[0], x[1], true); },
         kSmoothTol, 25);
      op("softmax_last", {m}, [](Tape<D>&, Inputs& x) { return softmax(x[0], 2); }, kSmoothTol, 26);
      op("softmax_channels", {m}, [](Tape<D>&, Inputs& x) { return softmax(x[0], 0); }, kSmoothTol, 27);
      op("layernorm", {{6, 5}, {5}, {5}}, [](Tape<D>&, Inputs& x) { return layernorm(x[0], x[1], x[2]); },
         kSmoothTol, 28);
      op("fft2c", {{2, 4, 6}}, [](Tape<D>&, Inputs& x) { return fft2c(x[0]); }, kSmoothTol, 29);
      op("ifft2c", {{2, 6, 4}}, [](Tape<D>&, Inputs& x) { return ifft2c(x[0]); }, kSmoothTol, 30);
      op("data_consistency", {{2, 8, 8}},
         [](Tape<D>&, Inputs& x) {
           Rng rng(31);
           const SamplingMask mask = make_cartesian_mask(8, 8, 2.0, kDefaultAcsFraction, 31);
           return data_consistency(x[0], random_normal<D>({2, 8, 8}, rng, 1.0), mask);
         },
         kSmoothTol, 31);
      break;
    }
    case GradScope::kBlocks: {
      block("drdb", {4, 8, 8}, [](ParamStore<D>& s, Rng& r) { init_drdb(s, "drdb", 4, 3, 3, r); },
            [](const Net<D>& n, Var<D> x) { return drdb_forward(n, "drdb", x, 3); }, 101);
      block("wmsa", {4, 6, 6}, [](ParamStore<D>& s, Rng& r) { init_wmsa(s, "wmsa", WmsaSpec{4, 4, 2, true}, r); },
            [](const Net<D>& n, Var<D> x) { return wmsa(n, "wmsa", x, WmsaSpec{4, 4, 2, true}); }, 102);
      block("stl", {4, 8, 8}, [](ParamStore<D>& s, Rng& r) { init_stl(s, "stl", 4, 4, 2, r); },
            [](const Net<D>& n, Var<D> x) { return stl_forward(n, "stl", x, 4, 2); }, 103);
      block("rstb", {4, 8, 8}, [](ParamStore<D>& s, Rng& r) { init_rstb(s, "rstb", 4, 4, 2, r); },
            [](const Net<D>& n, Var<D> x) { return rstb_forward(n, "rstb", x, 4, 2); }, 104);
      const XBBConfig xc{4, 3, 2, 2, 0.5, 4, 2, BlockVariant::kXBB};
      block("xtl", {4, 6, 6}, [](ParamStore<D>& s, Rng& r) { init_xtl(s, "xtl", 4, 0.5, r); },
            [](const Net<D>& n, Var<D> x) { return x_tl(n, "xtl", x); }, 105);
      block("xbb", {4, 8, 8}, [xc](ParamStore<D>& s, Rng& r) { init_xbb(s, "xbb", xc, r); },
            [xc](const Net<D>& n, Var<D> x) { return xbb_forward(n, "xbb", x, xc).fused; }, 106);
      block("se", {8, 5, 5}, [](ParamStore<D>& s, Rng& r) { init_se(s, "se", 8, r); },
            [](const Net<D>& n, Var<D> x) { return se_forward(n, "se", x); }, 107);
      block("backbone_ih1", {4, 8, 8},
            [](ParamStore<D>& s, Rng& r) { init_backbone(s, "bb", XBBConfig{4, 3, 2, 2, 0.5, 4, 2, BlockVariant::kIH1}, r); },
            [](const Net<D>& n, Var<D> x) {
              return backbone_forward(n, "bb", x, XBBConfig{4, 3, 2, 2, 0.5, 4, 2, BlockVariant::kIH1});
            },
            108);
      ModelConfig mc;
      mc.image.G0 = 4;
      mc.c2f_windows = {4, 2};
      mc.c2f_heads = 2;
      mc.encoder = Encoder::kPaSS;
      // target in channels 0-1, reference in 2-3
      block("pass", {4, 6, 6}, [mc](ParamStore<D>& s, Rng& r) { init_pass(s, "pass", mc, r); },
            [mc](const Net<D>& n, Var<D> x) {
              auto [t, r] = pass_forward(n, "pass", mc, slice_leading(x, 0, 2), slice_leading(x, 2, 2));
              return concat<D>({t, r});
            },
            109);
      mc.fusion = Fusion::kAdaC2F;
      block("adac2f", {8, 6, 6}, [mc](ParamStore<D>& s, Rng& r) { init_fusion(s, "fuse", mc, r); },
            [mc](const Net<D>& n, Var<D> x) {
              return fuse<D>(n, "fuse", mc, slice_leading(x, 0, 4), slice_leading(x, 4, 4), 1);
            },
            110);
      break;
    }
    case GradScope::kModel: {
      cases.push_back({"model_n1", kDefaultTol, [](double tol) {
                         const ModelConfig m = gradcheck_model_config();
                         InitOptions opt;
                         opt.zero_output_tails = false;
                         ParamStore<D> store = make_model<D>(m, 3, opt);
                         jitter_params(store, 11, 0.05);
                         const ReconCase c = make_case(5, 16, 4.0, kDefaultAcsFraction, RefQuality::kHQ);
                         Objective f = [&](Tape<D>& tape, ParamStore<D>& p) {
                           Net<D> net{tape, p};
                           auto out = recurrent_forward(net, m, c.k_sub, c.mask, c.reference, 1);
                           return dudo_loss(out.blocks, c.k_gt, ifft2c(c.k_gt), m.n_recurrent);
                         };
                         return finite_diff_check(f, store, {1e-4, tol, 1, 7});
                       }});
      break;
    }
  }
  return cases;
}

inline std::vector<GradCaseResult> run_gradcheck(GradScope scope) {
  std::vector<GradCaseResult> out;
  for (const auto& c : gradcheck_cases(scope)) {
    const auto t0 = std::chrono::steady_clock::now();
    GradCheckReport r = c.run(c.tol);
    out.push_back({c.name, c.tol, std::move(r),
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
  }
  return out;
}

}  // namespace dudo
