// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the dudo executable. Each command writes its
// artifacts plus a manifest.json into one output directory.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dudo/cli/checkpoint.hpp"
#include "dudo/cli/config.hpp"
#include "dudo/cli/gradcheck_suites.hpp"

namespace dudo {

namespace fs = std::filesystem;

/// Shortest round-tripping decimal form; "inf" / "-inf" / "nan" for non-finite values.
inline std::string fmt_num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const fs::path& path, const std::vector<std::string>& header) : path_(path), out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    if (!out_) throw IoError("write failed on '" + path_.string() + "'");
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

struct Manifest {
  std::string command;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::vector<std::string> artifacts;
  nlohmann::ordered_json extra = nlohmann::ordered_json::object();

  void write(const fs::path& dir, const RunConfig& cfg) const {
    nlohmann::ordered_json j{{"command", command},   {"config_hash", config_hash}, {"seed", seed},
                             {"artifacts", artifacts}, {"config", to_json(cfg)}};
    for (auto it = extra.begin(); it != extra.end(); ++it) j[it.key()] = it.value();
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("cannot write manifest in '" + dir.string() + "'");
  }
};

inline fs::path prepare_output(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

inline std::string windows_str(const std::vector<std::size_t>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? ";" : "") + std::to_string(w[i]);
  return s;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateResult {
  ReconCase sample;
  double zf_psnr = 0.0;
  double zf_ssim = 0.0;
};

/// Held-out case 0 of `seed` at the first evaluation acceleration, with an HQ
/// reference. Matches the first zero-filled record of an evaluation run with
/// eval.seed = seed.
template <class T>
SimulateResult cmd_simulate(const RunConfig& cfg, std::uint64_t seed, const fs::path& out) {
  prepare_output(out);
  const double accel = cfg.eval.accels.front();
  const std::uint64_t case_seed = held_out_case_seed(seed, 0);
  SimulateResult r{make_case(case_seed, cfg.train.image_size, accel, cfg.train.acs_frac, RefQuality::kHQ)};
  const PhantomPair pair = gen_phantom_pair(cfg.train.image_size, mix_seed(case_seed, kStreamPhantom));
  const Tensor<double> zf = zero_filled(r.sample);
  r.zf_psnr = psnr(zf, r.sample.i_gt);
  r.zf_ssim = ssim(zf, r.sample.i_gt);

  const std::vector<std::pair<std::string, Tensor<double>>> tensors{
      {"target", r.sample.i_gt},
      {"reference", pair.contrast_b},
      {"mask", r.sample.mask.as_tensor<double>()},
      {"kspace_under", r.sample.k_sub},
      {"zero_filled", zf}};
  Manifest m{"simulate", config_hash(cfg), seed, {}};
  nlohmann::ordered_json previews = nlohmann::ordered_json::array();
  for (const auto& [name, t] : tensors) {
    save_tensor(out / (name + ".ddut"), t.template cast<T>());
    m.artifacts.push_back(name + ".ddut");
    if (name != "kspace_under") {
      save_pgm(out / (name + ".pgm"), t);
      previews.push_back(name + ".pgm");
    }
  }
  m.extra["case_seed"] = case_seed;
  m.extra["accel"] = accel;
  m.extra["sampled_columns"] = r.sample.mask.sampled_count();
  m.extra["zero_filled_psnr_db"] = fmt_num(r.zf_psnr);
  m.extra["zero_filled_ssim"] = fmt_num(r.zf_ssim);
  m.extra["previews"] = previews;
  m.extra["precision"] = to_string(cfg.precision);
  m.write(out, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// train

inline void write_losses(const fs::path& path, const std::vector<double>& losses) {
  CsvWriter csv(path, {"step", "loss"});
  for (std::size_t i = 0; i < losses.size(); ++i) csv.row({std::to_string(i), fmt_num(losses[i])});
}

template <class T>
TrainResult<T> cmd_train(const RunConfig& cfg, const fs::path& out, std::ostream* log = nullptr) {
  prepare_output(out);
  const std::size_t every = std::max<std::size_t>(1, cfg.train.steps / 20);
  StepCallback cb;
  if (log) {
    cb = [&](std::size_t step, double loss) {
      if (step % every == 0 || step + 1 == cfg.train.steps) *log << "step " << step << " loss " << fmt_num(loss) << "\n";
    };
  }
  TrainResult<T> r = train(cfg.model, cfg.train, make_model<T>(cfg.model, cfg.train.seed), cb);
  save_checkpoint(out / "checkpoint", r.params, cfg);
  write_losses(out / "losses.csv", r.losses);
  Manifest m{"train", config_hash(cfg), cfg.train.seed, {"checkpoint/index.json", "losses.csv"}};
  m.extra["stream_hash"] = hex64(r.stream_hash);
  m.extra["params"] = r.params.scalar_count();
  m.extra["condition_counts"] = {{"HQ", r.condition_counts[0]}, {"LQ", r.condition_counts[1]}, {"absent", r.condition_counts[2]}};
  m.extra["final_loss"] = r.losses.empty() ? "nan" : fmt_num(r.losses.back());
  m.write(out, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// eval

inline std::vector<std::string> metric_header() { return {"condition", "accel", "seed", "psnr_db", "ssim"}; }

inline void write_metric_rows(const fs::path& path, const std::vector<MetricRecord>& rows) {
  CsvWriter csv(path, metric_header());
  for (const auto& r : rows)
    csv.row({to_string(r.condition), fmt_num(r.accel), std::to_string(r.seed), fmt_num(r.psnr_db), fmt_num(r.ssim)});
}

inline std::vector<std::string> summary_header() {
  return {"condition", "accel", "n", "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "zf_psnr_mean", "zf_ssim_mean"};
}

inline std::vector<std::string> summary_cells(const SummaryRow& s) {
  return {to_string(s.condition), fmt_num(s.accel),     std::to_string(s.n),      fmt_num(s.psnr_mean), fmt_num(s.psnr_std),
          fmt_num(s.ssim_mean),   fmt_num(s.ssim_std), fmt_num(s.zf_psnr_mean), fmt_num(s.zf_ssim_mean)};
}

template <class T>
EvalResult cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out) {
  prepare_output(out);
  ParamStore<T> params = load_checkpoint<T>(checkpoint, cfg);
  EvalResult r = evaluate(params, cfg.model, cfg.eval, cfg.train.image_size, cfg.train.acs_frac,
                          training_seed_range(cfg.train.seed, cfg.train.steps));
  write_metric_rows(out / "metrics.csv", r.records);
  write_metric_rows(out / "zero_filled.csv", r.zero_filled);
  CsvWriter csv(out / "summary.csv", summary_header());
  for (const auto& s : r.summary) csv.row(summary_cells(s));
  Manifest m{"eval", config_hash(cfg), cfg.eval.seed, {"metrics.csv", "zero_filled.csv", "summary.csv"}};
  m.extra["checkpoint"] = checkpoint.string();
  m.write(out, cfg);
  return r;
}

// ---------------------------------------------------------------------------
// ablate

enum class AblationAxis { kFusion, kLayout, kEncoder, kBackbone, kAlpha };

inline std::string to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::kFusion: return "fusion";
    case AblationAxis::kLayout: return "layout";
    case AblationAxis::kEncoder: return "encoder";
    case AblationAxis::kBackbone: return "backbone";
    case AblationAxis::kAlpha: return "alpha";
  }
  return "?";
}

inline AblationAxis parse_ablation_axis(const std::string& s) {
  for (AblationAxis a : {AblationAxis::kFusion, AblationAxis::kLayout, AblationAxis::kEncoder, AblationAxis::kBackbone,
                         AblationAxis::kAlpha})
    if (to_string(a) == s) return a;
  throw ConfigError("unknown ablation axis '" + s + "' (expected fusion, layout, encoder, backbone or alpha)");
}

inline constexpr double kAlphaGrid[] = {0.25, 0.5, 0.75, 1.0};

struct AblationVariant {
  std::string label;
  ModelConfig model;
};

/// The variant grid of one axis; everything else comes from `base`. Backbone
/// and alpha variants apply to both the image and the k-space network.
inline std::vector<AblationVariant> ablation_variants(AblationAxis axis, const ModelConfig& base) {
  std::vector<AblationVariant> out;
  auto add = [&](std::string label, ModelConfig m) { out.push_back({std::move(label), std::move(m)}); };
  switch (axis) {
    case AblationAxis::kFusion:
      for (Fusion f : all_fusions()) {
        ModelConfig m = base;
        m.fusion = f;
        add(to_string(f), m);
      }
      break;
    case AblationAxis::kLayout:
      for (Layout l : all_layouts()) {
        ModelConfig m = base;
        m.layout = l;
        add(to_string(l), m);
      }
      break;
    case AblationAxis::kEncoder:
      for (Encoder e : all_encoders()) {
        ModelConfig m = base;
        m.encoder = e;
        add(to_string(e), m);
      }
      break;
    case AblationAxis::kBackbone:
      for (BlockVariant v : all_block_variants()) {
        ModelConfig m = base;
        m.image.variant = v;
        m.kspace.variant = v;
        add(to_string(v), m);
      }
      break;
    case AblationAxis::kAlpha:
      for (double a : kAlphaGrid) {
        ModelConfig m = base;
        m.image.alpha = a;
        m.kspace.alpha = a;
        add(fmt_num(a), m);
      }
      break;
  }
  for (const auto& v : out) {
    try {
      v.model.validate();
    } catch (const ConfigError& e) {
      throw ConfigError("ablation variant " + v.label + ": " + e.what());
    }
  }
  return out;
}

struct AblationRow {
  std::string variant;
  std::size_t params = 0;
  std::uint64_t stream_hash = 0;
  double final_loss = 0.0;
  std::vector<std::size_t> fusion_windows;
  SummaryRow summary;
};

inline std::vector<std::string> ablation_header() {
  std::vector<std::string> h{"axis", "variant", "params", "fusion_windows", "stream_hash", "final_loss"};
  for (const auto& s : summary_header()) h.push_back(s);
  return h;
}

/// Trains and evaluates every variant of `axis` on the same data stream.
template <class T>
std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, AblationAxis axis, const fs::path& out,
                                    std::ostream* log = nullptr) {
  prepare_output(out);
  const auto variants = ablation_variants(axis, cfg.model);
  std::vector<AblationRow> rows;
  CsvWriter csv(out / "ablation.csv", ablation_header());
  for (const auto& v : variants) {
    if (log) *log << "variant " << v.label << "\n";
    TrainResult<T> tr = train(v.model, cfg.train, make_model<T>(v.model, cfg.train.seed));
    EvalResult er = evaluate(tr.params, v.model, cfg.eval, cfg.train.image_size, cfg.train.acs_frac,
                             training_seed_range(cfg.train.seed, cfg.train.steps));
    for (const auto& s : er.summary) {
      AblationRow row{v.label, tr.params.scalar_count(), tr.stream_hash,
                      tr.losses.empty() ? std::nan("") : tr.losses.back(), v.model.fusion_windows(), s};
      std::vector<std::string> cells{to_string(axis),          row.variant,
                                     std::to_string(row.params), windows_str(row.fusion_windows),
                                     hex64(row.stream_hash),     fmt_num(row.final_loss)};
      for (auto& c : summary_cells(s)) cells.push_back(std::move(c));
      csv.row(cells);
      rows.push_back(std::move(row));
    }
  }
  Manifest m{"ablate", config_hash(cfg), cfg.train.seed, {"ablation.csv"}};
  m.extra["axis"] = to_string(axis);
  nlohmann::ordered_json labels = nlohmann::ordered_json::array();
  for (const auto& v : variants) labels.push_back(v.label);
  m.extra["variants"] = labels;
  m.write(out, cfg);
  return rows;
}

// ---------------------------------------------------------------------------
// gradcheck

/// Runs the suites and writes gradcheck.csv. Returns true when every case passes.
inline bool cmd_gradcheck(const std::vector<GradScope>& scopes, const fs::path& out, std::ostream* log = nullptr) {
  prepare_output(out);
  CsvWriter csv(out / "gradcheck.csv", {"scope", "case", "tol", "max_rel_err", "kinks", "passed", "seconds"});
  bool all = true;
  for (GradScope s : scopes)
    for (const auto& r : run_gradcheck(s)) {
      all = all && r.report.passed;
      csv.row({to_string(s), r.name, fmt_num(r.tol), fmt_num(r.report.max_rel_err), std::to_string(r.report.kinks),
               r.report.passed ? "1" : "0", fmt_num(r.seconds)});
      if (log) {
        char line[160];
        std::snprintf(line, sizeof line, "%-7s %-20s max_rel_err %.3e  tol %.0e  %s", to_string(s).c_str(),
                      r.name.c_str(), r.report.max_rel_err, r.tol, r.report.passed ? "ok" : "FAIL");
        *log << line << "\n";
      }
    }
  return all;
}

// ---------------------------------------------------------------------------
// params

inline ParamBreakdown cmd_params(const RunConfig& cfg, const fs::path& out, std::ostream* log = nullptr) {
  prepare_output(out);
  const ParamBreakdown b = count_params(cfg.model);
  CsvWriter csv(out / "params.csv", {"submodule", "params"});
  for (const auto& [name, n] : b.parts) csv.row({name, std::to_string(n)});
  csv.row({"image_total", std::to_string(b.image_total)});
  csv.row({"kspace_total", std::to_string(b.kspace_total)});
  csv.row({"total", std::to_string(b.total())});
  if (log) {
    for (const auto& [name, n] : b.parts) {
      char line[96];
      std::snprintf(line, sizeof line, "%-16s %12zu", name.c_str(), n);
      *log << line << "\n";
    }
    char line[160];
    std::snprintf(line, sizeof line, "image network  %zu\nk-space network %zu\ntotal          %zu (%.2fM)",
                  b.image_total, b.kspace_total, b.total(), static_cast<double>(b.total()) / 1e6);
    *log << line << "\n";
  }
  Manifest m{"params", config_hash(cfg), 0, {"params.csv"}};
  m.extra["image_total"] = b.image_total;
  m.extra["kspace_total"] = b.kspace_total;
  m.extra["total"] = b.total();
  m.write(out, cfg);
  return b;
}

}  // namespace dudo
