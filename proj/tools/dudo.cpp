// SPDX-License-Identifier: Apache-2.0
//
// dudo: simulate, train, eval, ablate, gradcheck, params.
//
// Exit codes: 0 ok, 1 invalid configuration or arguments, 2 runtime or
// numeric failure (including gradcheck failures), 3 I/O error.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dudo/cli/commands.hpp"

namespace {

using namespace dudo;

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string precision;
  std::string axis;
  std::string checkpoint;
  std::string scope = "all";
};

RunConfig resolve(const Args& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (!a.out.empty()) cfg.output_dir = a.out;
  if (!a.precision.empty()) cfg.precision = parse_precision(a.precision);
  return cfg;
}

template <class F>
void with_precision(const RunConfig& cfg, F&& f) {
  if (cfg.precision == Precision::kF64)
    f(double{});
  else
    f(float{});
}

int run(const std::string& verb, const Args& a) {
  RunConfig cfg = resolve(a);
  const fs::path out = cfg.output_dir;
  if (verb == "simulate") {
    const std::uint64_t seed = a.seed.value_or(cfg.eval.seed);
    with_precision(cfg, [&](auto t) {
      auto r = cmd_simulate<decltype(t)>(cfg, seed, out);
      std::cout << "zero-filled PSNR " << fmt_num(r.zf_psnr) << " dB, SSIM " << fmt_num(r.zf_ssim) << "\n";
    });
  } else if (verb == "train") {
    if (a.seed) cfg.train.seed = *a.seed;
    cfg.train.validate();
    with_precision(cfg, [&](auto t) { cmd_train<decltype(t)>(cfg, out, &std::cout); });
  } else if (verb == "eval") {
    if (a.seed) cfg.eval.seed = *a.seed;
    cfg.eval.validate();
    with_precision(cfg, [&](auto t) {
      auto r = cmd_eval<decltype(t)>(cfg, a.checkpoint, out);
      for (const auto& s : r.summary)
        std::cout << to_string(s.condition) << " " << fmt_num(s.accel) << "x  PSNR " << fmt_num(s.psnr_mean)
                  << " (zero-filled " << fmt_num(s.zf_psnr_mean) << ")  SSIM " << fmt_num(s.ssim_mean) << "\n";
    });
  } else if (verb == "ablate") {
    if (a.seed) cfg.train.seed = *a.seed;
    cfg.train.validate();
    const AblationAxis axis = parse_ablation_axis(a.axis);
    with_precision(cfg, [&](auto t) { cmd_ablate<decltype(t)>(cfg, axis, out, &std::cout); });
  } else if (verb == "gradcheck") {
    std::vector<GradScope> scopes;
    if (a.scope == "all")
      scopes = {GradScope::kOps, GradScope::kBlocks, GradScope::kModel};
    else
      scopes = {parse_grad_scope(a.scope)};
    if (!cmd_gradcheck(scopes, out, &std::cout)) {
      std::cerr << "gradcheck: one or more cases failed\n";
      return 2;
    }
  } else if (verb == "params") {
    cmd_params(cfg, out, &std::cout);
  }
  std::cout << "wrote " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual-domain MRI reconstruction with an optional reference contrast"};
  app.require_subcommand(1);
  Args a;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "JSON run configuration")->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "output directory (overrides output_dir)");
    sub->add_option("--precision", a.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { a.seed = s; }, "seed");
  };
  auto* simulate = app.add_subcommand("simulate", "write one simulated case and its zero-filled reconstruction");
  auto* train = app.add_subcommand("train", "train a model and write a checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out cases");
  auto* ablate = app.add_subcommand("ablate", "train and evaluate every variant along one axis");
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient suites");
  auto* params = app.add_subcommand("params", "parameter counts per submodule");
  for (auto* s : {simulate, train, eval, ablate, gradcheck, params}) common(s);
  eval->add_option("--checkpoint", a.checkpoint, "checkpoint directory")->required();
  ablate->add_option("--axis", a.axis, "fusion, layout, encoder, backbone or alpha")->required();
  gradcheck->add_option("--scope", a.scope, "ops, blocks, model or all")
      ->check(CLI::IsMember({"ops", "blocks", "model", "all"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  const std::string verb = app.get_subcommands().front()->get_name();
  try {
    return run(verb, a);
  } catch (const dudo::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const dudo::IoError& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
