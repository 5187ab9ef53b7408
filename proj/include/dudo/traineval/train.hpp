// SPDX-License-Identifier: Apache-2.0
//
// Batch-size-1 training with random acceleration and random reference condition.

#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "dudo/traineval/data.hpp"
#include "dudo/traineval/loss.hpp"
#include "dudo/traineval/optim.hpp"

namespace dudo {

struct TrainConfig {
  double lr = 1e-4;
  double beta1 = 0.5;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 1;
  std::size_t steps = 500;
  double accel_min = 4.0;
  double accel_max = 8.0;
  double acs_frac = kDefaultAcsFraction;
  std::array<double, 3> ref_probs{1.0 / 3, 1.0 / 3, 1.0 / 3};  // HQ, LQ, absent
  std::uint64_t seed = 0;
  std::size_t image_size = 64;
  LossKind loss = LossKind::kL2;
  double clip_norm = 0.0;

  AdamConfig adam() const { return {lr, beta1, beta2, eps, clip_norm}; }

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("train.lr must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("train.beta1 and train.beta2 must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("train.eps must be positive");
    if (batch_size != 1) throw ConfigError("train.batch_size must be 1");
    if (image_size != 16 && image_size != 32 && image_size != 64) {
      throw ConfigError("train.image_size must be 16, 32 or 64");
    }
    if (!(accel_min >= 1.0 && accel_max >= accel_min)) throw ConfigError("train.accel_range must satisfy 1 <= min <= max");
    if (!(acs_frac > 0.0 && acs_frac <= 1.0)) throw ConfigError("train.acs_frac must lie in (0, 1]");
    const std::size_t acs = acs_columns(image_size, acs_frac);
    const auto budget = static_cast<std::size_t>(std::lround(static_cast<double>(image_size) / accel_max));
    if (budget < acs) {
      throw ConfigError("train.accel_range: " + std::to_string(accel_max) + "x leaves " + std::to_string(budget) +
                        " columns, fewer than the " + std::to_string(acs) + " ACS columns");
    }
    double s = 0.0;
    for (double p : ref_probs) {
      if (p < 0.0) throw ConfigError("train.ref_probs must be non-negative");
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ConfigError("train.ref_probs must sum to 1");
    if (seed > kMaxTrainSeed) throw ConfigError("train.seed must be < 2^31");
    if (steps >= (std::uint64_t{1} << 32)) throw ConfigError("train.steps must be < 2^32");
    if (clip_norm < 0.0) throw ConfigError("train.clip_norm must be >= 0");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// The case consumed at a given training step.
inline ReconCase draw_training_case(const TrainConfig& cfg, std::uint64_t step) {
  const std::uint64_t s = training_case_seed(cfg.seed, step);
  Rng accel_rng(mix_seed(s, kStreamAccel));
  const double accel = accel_rng.uniform(cfg.accel_min, cfg.accel_max);
  Rng cond_rng(mix_seed(s, kStreamCondition));
  const RefQuality q = draw_condition(cond_rng, cfg.ref_probs);
  return make_case(s, cfg.image_size, accel, cfg.acs_frac, q);
}

/// Fingerprint of everything a case feeds to the model.
inline void hash_case(Fnv1a& h, const ReconCase& c) {
  h.update_value(c.seed);
  h.update_value(c.accel);
  h.update_value(static_cast<int>(c.quality));
  h.update_value(c.ac);
  for (bool b : c.mask.columns()) h.update_value(static_cast<std::uint8_t>(b));
  h.update(c.k_sub.ptr(), c.k_sub.size() * sizeof(double));
  h.update(c.k_gt.ptr(), c.k_gt.size() * sizeof(double));
  h.update(c.reference.ptr(), c.reference.size() * sizeof(double));
}

template <class T>
struct TrainResult {
  ParamStore<T> params;
  std::vector<double> losses;
  std::array<std::size_t, 3> condition_counts{};  // HQ, LQ, absent
  std::uint64_t stream_hash = 0;
};

inline std::size_t condition_slot(RefQuality q) {
  return q == RefQuality::kHQ ? 0 : q == RefQuality::kLQ ? 1 : 2;
}

/// Loss of one case on a recording tape; gradients land in `params`.
template <class T>
double train_step_loss(ParamStore<T>& params, const ModelConfig& model, const ReconCase& c, LossKind kind) {
  Tape<T> tape;
  Net<T> net{tape, params};
  const auto out = recurrent_forward(net, model, c.k_sub.cast<T>(), c.mask, c.reference.cast<T>(), c.ac);
  Var<T> loss = dudo_loss(out.blocks, c.k_gt.cast<T>(), c.i_gt.cast<T>(), model.n_recurrent, kind);
  tape.backward(loss);
  return static_cast<double>(loss.value().item());
}

using StepCallback = std::function<void(std::size_t step, double loss)>;

template <class T>
TrainResult<T> train(const ModelConfig& model, const TrainConfig& cfg, ParamStore<T> init,
                     const StepCallback& on_step = {}) {
  model.validate();
  cfg.validate();
  TrainResult<T> r{std::move(init), {}, {}, 0};
  AdamState<T> state;
  Fnv1a stream;
  const AdamConfig adam = cfg.adam();
  r.params.zero_grad();
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    const ReconCase c = draw_training_case(cfg, step);
    hash_case(stream, c);
    ++r.condition_counts[condition_slot(c.quality)];
    double loss;
    try {
      loss = train_step_loss(r.params, model, c, cfg.loss);
    } catch (const NumericError& e) {
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw NumericError("training step " + std::to_string(step) + ": loss is not finite");
    adam_step(r.params, state, adam);
    r.params.zero_grad();
    r.losses.push_back(loss);
    if (on_step) on_step(step, loss);
  }
  r.stream_hash = stream.digest();
  return r;
}

/// Stream hash of the first `steps` training cases, without training.
inline std::uint64_t training_stream_hash(const TrainConfig& cfg) {
  Fnv1a stream;
  for (std::size_t step = 0; step < cfg.steps; ++step) hash_case(stream, draw_training_case(cfg, step));
  return stream.digest();
}

}  // namespace dudo
