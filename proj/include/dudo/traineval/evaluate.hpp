// SPDX-License-Identifier: Apache-2.0
//
// Held-out evaluation over a grid of reference conditions and accelerations.

#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dudo/traineval/metrics.hpp"
#include "dudo/traineval/train.hpp"

namespace dudo {

struct EvalConfig {
  std::size_t n_cases = 50;
  std::vector<RefQuality> conditions{RefQuality::kHQ, RefQuality::kLQ, RefQuality::kAbsent};
  std::vector<double> accels{4.0, 8.0};
  std::uint64_t seed = 0;

  void validate() const {
    if (n_cases < 1 || n_cases > kMaxEvalCases) throw ConfigError("eval.n_cases must be in [1, 2^20]");
    if (conditions.empty()) throw ConfigError("eval.conditions must not be empty");
    if (accels.empty()) throw ConfigError("eval.accels must not be empty");
    for (double a : accels)
      if (!(a >= 1.0)) throw ConfigError("eval.accels entries must be >= 1");
    if (seed > kMaxEvalSeed) throw ConfigError("eval.seed must be < 2^43");
  }

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct MetricRecord {
  RefQuality condition = RefQuality::kAbsent;
  double accel = 0.0;
  std::uint64_t seed = 0;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct SummaryRow {
  RefQuality condition = RefQuality::kAbsent;
  double accel = 0.0;
  std::size_t n = 0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
  double zf_psnr_mean = 0.0, zf_ssim_mean = 0.0;
};

struct EvalResult {
  std::vector<MetricRecord> records;      // model, one per (condition, accel, case)
  std::vector<MetricRecord> zero_filled;  // baseline, same order
  std::vector<SummaryRow> summary;        // one per (condition, accel)
};

/// Mean and population standard deviation; infinities propagate.
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  const double mean = s / static_cast<double>(v.size());
  if (!std::isfinite(mean)) return {mean, std::numeric_limits<double>::quiet_NaN()};
  double q = 0.0;
  for (double x : v) q += (x - mean) * (x - mean);
  return {mean, std::sqrt(q / static_cast<double>(v.size()))};
}

/// Reconstruction for one case with frozen parameters.
template <class T>
Tensor<T> reconstruct(ParamStore<T>& params, const ModelConfig& model, const ReconCase& c) {
  Tape<T> tape(false);
  Net<T> net{tape, params};
  return recurrent_forward(net, model, c.k_sub.cast<T>(), c.mask, c.reference.cast<T>(), c.ac).i_rec.value();
}

inline Tensor<double> zero_filled(const ReconCase& c) { return ifft2c(c.k_sub); }

/// Evaluates on held-out seeds. `train_range`, when given, must not overlap them.
template <class T>
EvalResult evaluate(ParamStore<T>& params, const ModelConfig& model, const EvalConfig& cfg, std::size_t image_size,
                    double acs_frac = kDefaultAcsFraction, std::optional<SeedRange> train_range = std::nullopt) {
  model.validate();
  cfg.validate();
  const SeedRange held_out = held_out_seed_range(cfg.seed, cfg.n_cases);
  if (train_range && train_range->overlaps(held_out)) {
    throw ConfigError("evaluation seeds overlap the training seed range");
  }
  EvalResult r;
  for (RefQuality q : cfg.conditions)
    for (double accel : cfg.accels) {
      std::vector<double> p, s, zp, zs;
      for (std::size_t i = 0; i < cfg.n_cases; ++i) {
        const std::uint64_t seed = held_out_case_seed(cfg.seed, i);
        const ReconCase c = make_case(seed, image_size, accel, acs_frac, q);
        const Tensor<T> rec = reconstruct(params, model, c);
        const Tensor<double> zf = zero_filled(c);
        r.records.push_back({q, accel, seed, psnr(rec, c.i_gt), ssim(rec, c.i_gt)});
        r.zero_filled.push_back({q, accel, seed, psnr(zf, c.i_gt), ssim(zf, c.i_gt)});
        p.push_back(r.records.back().psnr_db);
        s.push_back(r.records.back().ssim);
        zp.push_back(r.zero_filled.back().psnr_db);
        zs.push_back(r.zero_filled.back().ssim);
      }
      SummaryRow row{q, accel, cfg.n_cases};
      std::tie(row.psnr_mean, row.psnr_std) = mean_std(p);
      std::tie(row.ssim_mean, row.ssim_std) = mean_std(s);
      row.zf_psnr_mean = mean_std(zp).first;
      row.zf_ssim_mean = mean_std(zs).first;
      r.summary.push_back(row);
    }
  return r;
}

}  // namespace dudo
