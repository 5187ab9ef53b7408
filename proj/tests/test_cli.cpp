// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <set>

#include "dudo/cli/checkpoint.hpp"
#include "dudo/cli/commands.hpp"

using namespace dudo;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::path(testing::TempDir()) / ("dudo_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(DUDO_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

RunConfig toy_config() {
  RunConfig c;
  c.model.n_recurrent = 1;
  c.model.image = {8, 4, 1, 1, 0.5, 8, 2, BlockVariant::kXBB};
  c.model.kspace = {8, 4, 1, 1, 0.5, 8, 2, BlockVariant::kXBB};
  c.model.c2f_windows = {8, 4};
  c.model.c2f_heads = 2;
  c.model.cb_depth = 1;
  c.train.image_size = 16;
  c.train.accel_min = 2.0;
  c.train.accel_max = 4.0;
  c.train.steps = 2;
  c.eval.n_cases = 2;
  c.eval.accels = {4.0};
  return c;
}

nlohmann::json manifest(const fs::path& dir) { return nlohmann::json::parse(slurp(dir / "manifest.json")); }

}  // namespace

// --- configuration ---------------------------------------------------------------

TEST(Config, EmptyDocumentGivesDefaults) { EXPECT_EQ(parse_run_config("{}"), RunConfig{}); }

TEST(Config, RoundTrip) {
  RunConfig c = toy_config();
  c.model.fusion = Fusion::kHeMIS;
  c.model.layout = Layout::kK_UniI;
  c.model.encoder = Encoder::kDistinct;
  c.train.ref_probs = {0.5, 0.25, 0.25};
  c.eval.conditions = {RefQuality::kAbsent};
  c.precision = Precision::kF64;
  const RunConfig back = parse_run_config(serialize(c));
  EXPECT_EQ(back, c);
  EXPECT_EQ(serialize(back), serialize(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_NE(config_hash(c), config_hash(RunConfig{}));
}

TEST(Config, UnknownKeyNamesTheLine) {
  const std::string doc = "{\n  \"train\": {\n    \"steps\": 3,\n    \"stepz\": 4\n  }\n}\n";
  try {
    parse_run_config(doc);
    FAIL() << "expected rejection";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("line 4"), std::string::npos) << msg;
    EXPECT_NE(msg.find("stepz"), std::string::npos) << msg;
  }
  EXPECT_THROW(parse_run_config("{\"modle\": {}}"), ConfigError);
  EXPECT_THROW(parse_run_config("{\"model\": {\"image\": {\"GO\": 8}}}"), ConfigError);
}

TEST(Config, TypeAndValueErrors) {
  EXPECT_THROW(parse_run_config("{\"train\": {\"steps\": -1}}"), ConfigError);
  EXPECT_THROW(parse_run_config("{\"train\": {\"lr\": \"fast\"}}"), ConfigError);
  EXPECT_THROW(parse_run_config("{\"model\": {\"fusion\": \"Mean\"}}"), ConfigError);
  EXPECT_THROW(parse_run_config("{\"train\": {\"image_size\": 48}}"), ConfigError);
  EXPECT_THROW(parse_run_config("{\"precision\": \"f16\"}"), ConfigError);
  EXPECT_THROW(parse_run_config("[1, 2"), ConfigError);
}

// --- commands in-process ----------------------------------------------------------

TEST(Simulate, ByteIdenticalRerunsAndManifest) {
  const RunConfig cfg = toy_config();
  const fs::path a = scratch("sim_a"), b = scratch("sim_b");
  const auto ra = cmd_simulate<float>(cfg, 7, a);
  cmd_simulate<float>(cfg, 7, b);
  std::set<std::string> names;
  for (const auto& e : fs::directory_iterator(a)) {
    names.insert(e.path().filename().string());
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path();
  }
  EXPECT_EQ(names.size(), 10u);  // 5 tensors, 4 previews, manifest
  const auto m = manifest(a);
  ASSERT_EQ(m["artifacts"].size(), 5u);
  EXPECT_EQ(m["seed"].get<std::uint64_t>(), 7u);
  EXPECT_EQ(m["accel"].get<double>(), 4.0);
  EXPECT_EQ(load_tensor_as<double>(a / "mask.ddut").shape(), (Shape{16, 16}));

  EvalConfig ec = cfg.eval;
  ec.seed = 7;
  ec.n_cases = 1;
  ec.conditions = {RefQuality::kHQ};
  auto params = make_model<float>(cfg.model, 0);
  const auto er = evaluate(params, cfg.model, ec, cfg.train.image_size, cfg.train.acs_frac);
  EXPECT_EQ(er.zero_filled.front().psnr_db, ra.zf_psnr);
  EXPECT_EQ(m["zero_filled_psnr_db"].get<std::string>(), fmt_num(er.zero_filled.front().psnr_db));
}

TEST(Train, ZeroStepsCheckpointEqualsInitialisation) {
  RunConfig cfg = toy_config();
  cfg.train.steps = 0;
  cfg.train.seed = 12;
  const fs::path out = scratch("train0");
  cmd_train<float>(cfg, out);
  EXPECT_EQ(load_checkpoint<float>(out / "checkpoint", cfg), make_model<float>(cfg.model, 12));
  EXPECT_EQ(slurp(out / "losses.csv"), "step,loss\n");
  EXPECT_EQ(manifest(out)["command"], "train");
}

TEST(Eval, FreshAndReloadedCheckpointAgree) {
  const RunConfig cfg = toy_config();
  const fs::path out = scratch("eval");
  auto tr = cmd_train<float>(cfg, out / "train");
  const auto reloaded = cmd_eval<float>(cfg, out / "train" / "checkpoint", out / "eval");
  const auto fresh = evaluate(tr.params, cfg.model, cfg.eval, cfg.train.image_size, cfg.train.acs_frac);
  ASSERT_EQ(fresh.records.size(), reloaded.records.size());
  for (std::size_t i = 0; i < fresh.records.size(); ++i) {
    EXPECT_EQ(fresh.records[i].psnr_db, reloaded.records[i].psnr_db);
    EXPECT_EQ(fresh.records[i].ssim, reloaded.records[i].ssim);
  }
  const std::string csv = slurp(out / "eval" / "metrics.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "condition,accel,seed,psnr_db,ssim");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 * 2);
  EXPECT_EQ(csv.find('\r'), std::string::npos);
}

TEST(Eval, CheckpointErrors) {
  const RunConfig cfg = toy_config();
  const fs::path out = scratch("ckpt_err");
  EXPECT_THROW(load_checkpoint<float>(out / "missing", cfg), IoError);
  cmd_train<float>(cfg, out);
  RunConfig other = cfg;
  other.model.image.G0 = 16;
  EXPECT_THROW(load_checkpoint<float>(out / "checkpoint", other), ConfigError);
  write_text(out / "checkpoint" / "p00000.ddut", "DDUT");
  EXPECT_THROW(load_checkpoint<float>(out / "checkpoint", cfg), IoError);
  write_text(out / "checkpoint" / kCheckpointIndex, "{ not json");
  EXPECT_THROW(load_checkpoint<float>(out / "checkpoint", cfg), IoError);
}

TEST(Ablate, VariantGrids) {
  const ModelConfig base;
  EXPECT_EQ(ablation_variants(AblationAxis::kFusion, base).size(), 4u);
  EXPECT_EQ(ablation_variants(AblationAxis::kLayout, base).size(), 4u);
  EXPECT_EQ(ablation_variants(AblationAxis::kEncoder, base).size(), 3u);
  std::vector<std::string> backbones;
  for (const auto& v : ablation_variants(AblationAxis::kBackbone, base)) backbones.push_back(v.label);
  EXPECT_EQ(backbones, (std::vector<std::string>{"DRDN", "RSTB", "XBB", "IH1", "IH2", "IH3"}));
  std::vector<double> alphas;
  for (const auto& v : ablation_variants(AblationAxis::kAlpha, base)) alphas.push_back(v.model.image.alpha);
  EXPECT_EQ(alphas, (std::vector<double>{0.25, 0.5, 0.75, 1.0}));
  for (const auto& v : ablation_variants(AblationAxis::kFusion, base)) {
    if (v.model.fusion == Fusion::kAdaF2C) {
      auto w = base.c2f_windows;
      std::reverse(w.begin(), w.end());
      EXPECT_EQ(v.model.fusion_windows(), w);
    } else if (v.model.fusion == Fusion::kAdaC2F) {
      EXPECT_EQ(v.model.fusion_windows(), base.c2f_windows);
    }
  }
  EXPECT_THROW(parse_ablation_axis("depth"), ConfigError);
}

TEST(Ablate, VariantsShareTheDataStream) {
  RunConfig cfg = toy_config();
  cfg.eval.n_cases = 1;
  const fs::path out = scratch("ablate");
  const auto rows = cmd_ablate<float>(cfg, AblationAxis::kEncoder, out);
  ASSERT_EQ(rows.size(), 3u * 3u);
  for (const auto& r : rows) EXPECT_EQ(r.stream_hash, training_stream_hash(cfg.train));
  const std::string csv = slurp(out / "ablation.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 9);
}

TEST(Params, SubtotalsAndAlphaOrdering) {
  const fs::path out = scratch("params");
  const auto b = cmd_params(RunConfig{}, out);
  EXPECT_GT(b.image_total, b.kspace_total);
  EXPECT_EQ(b.total(), b.image_total + b.kspace_total);
  const std::string csv = slurp(out / "params.csv");
  EXPECT_NE(csv.find("\ntotal," + std::to_string(b.total()) + "\n"), std::string::npos);
  std::size_t prev = 0;
  for (double a : kAlphaGrid) {
    RunConfig c;
    c.model.image.alpha = a;
    c.model.kspace.alpha = a;
    const std::size_t n = count_params(c.model).total();
    EXPECT_GT(n, prev);
    prev = n;
  }
}

TEST(Gradcheck, OpsScopeWritesReport) {
  const fs::path out = scratch("gradcheck");
  EXPECT_TRUE(cmd_gradcheck({GradScope::kOps}, out));
  const std::string csv = slurp(out / "gradcheck.csv");
  std::istringstream lines(csv);
  std::string line;
  std::getline(lines, line);
  std::size_t n = 0;
  for (; std::getline(lines, line); ++n) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 7u) << line;
    EXPECT_EQ(cells[5], "1") << line;
  }
  EXPECT_GT(n, 0u);
}

// --- binary -------------------------------------------------------------------------

TEST(Binary, ExitCodes) {
  const fs::path dir = scratch("bin");
  write_text(dir / "toy.json", serialize(toy_config()));
  write_text(dir / "bad.json", "{\n  \"train\": {\"stepz\": 1}\n}\n");
  const std::string toy = "--config " + (dir / "toy.json").string();
  EXPECT_EQ(run_cli("params --out " + (dir / "p").string()), 0);
  EXPECT_TRUE(fs::exists(dir / "p" / "manifest.json"));
  EXPECT_EQ(run_cli("simulate " + toy + " --seed 3 --out " + (dir / "s").string()), 0);
  EXPECT_EQ(run_cli("params --config " + (dir / "bad.json").string() + " --out " + (dir / "x").string()), 1);
  EXPECT_EQ(run_cli("params --config " + (dir / "nope.json").string()), 1);
  EXPECT_EQ(run_cli("ablate " + toy + " --axis depth --out " + (dir / "x").string()), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("eval " + toy + " --checkpoint " + (dir / "none").string() + " --out " + (dir / "e").string()), 3);
  write_text(dir / "file", "");
  EXPECT_EQ(run_cli("params --out " + (dir / "file" / "sub").string()), 3);
}

TEST(Binary, TrainThenEval) {
  const fs::path dir = scratch("bin_train");
  write_text(dir / "toy.json", serialize(toy_config()));
  const std::string toy = "--config " + (dir / "toy.json").string();
  ASSERT_EQ(run_cli("train " + toy + " --out " + (dir / "t").string()), 0);
  ASSERT_EQ(run_cli("eval " + toy + " --checkpoint " + (dir / "t" / "checkpoint").string() + " --out " +
                    (dir / "e").string()),
            0);
  EXPECT_EQ(load_checkpoint<float>(dir / "t" / "checkpoint", toy_config()),
            cmd_train<float>(toy_config(), dir / "again").params);
  EXPECT_EQ(slurp(dir / "e" / "metrics.csv").substr(0, 9), "condition");
}
