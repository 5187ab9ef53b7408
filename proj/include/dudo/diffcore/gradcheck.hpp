// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient oracle. Only meaningful in 64-bit.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dudo/diffcore/tape.hpp"

namespace dudo {

struct GradCheckOptions {
  double step = 1e-4;
  double tol = 1e-4;
  /// Entries probed per parameter tensor; 0 checks every entry. When sampling,
  /// the entry with the largest analytic gradient is always included.
  std::size_t max_entries = 0;
  std::uint64_t seed = 0;
};

struct ParamGradError {
  std::string name;
  double max_rel_err = 0.0;
  std::size_t checked = 0;
};

struct GradCheckReport {
  std::vector<ParamGradError> params;
  double max_rel_err = 0.0;
  /// Entries re-probed with 100x smaller steps because their quotient changed
  /// with the step or missed the analytic value (a ReLU or max kink nearby).
  std::size_t kinks = 0;
  bool passed = false;
};

/// (|a - n|) / max(1, |a|, |n|)
inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

/// Adds N(0, stddev^2) noise to every parameter. Zero-initialised biases over
/// zero-valued inputs sit exactly on ReLU kinks, where the one-sided
/// derivatives disagree; checks should be run at a generic point.
template <class T>
void jitter_params(ParamStore<T>& params, std::uint64_t seed, double stddev) {
  Rng rng(seed);
  for (std::size_t p = 0; p < params.size(); ++p)
    for (auto& v : params.value_at(p).data()) v += static_cast<T>(stddev * rng.normal());
}

/// Scalar objective built on a fresh tape from the given parameters.
using Objective = std::function<Var<double>(Tape<double>&, ParamStore<double>&)>;

inline GradCheckReport finite_diff_check(const Objective& f, ParamStore<double>& params,
                                         const GradCheckOptions& opts = {}) {
  params.zero_grad();
  {
    Tape<double> tape;
    Var<double> loss = f(tape, params);
    if (loss.value().size() != 1) throw ShapeError("finite_diff_check: objective must be scalar");
    tape.backward(loss);
  }

  auto eval = [&]() {
    Tape<double> tape(false);
    const double v = f(tape, params).value().item();
    if (!std::isfinite(v)) throw NumericError("finite_diff_check: objective is not finite");
    return v;
  };
  auto quotient = [&](double& slot, double h) {
    const double saved = slot;
    slot = saved + h;
    const double up = eval();
    slot = saved - h;
    const double down = eval();
    slot = saved;
    return (up - down) / (2.0 * h);
  };

  GradCheckReport report;
  Rng rng(opts.seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor<double>& value = params.value_at(p);
    const Tensor<double>& grad = params.grad_at(p);
    std::vector<std::size_t> entries;
    if (opts.max_entries == 0 || value.size() <= opts.max_entries) {
      entries.resize(value.size());
      for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = i;
    } else {
      std::size_t top = 0;
      for (std::size_t i = 1; i < grad.size(); ++i)
        if (std::abs(grad[i]) > std::abs(grad[top])) top = i;
      entries.push_back(top);
      while (entries.size() < opts.max_entries) {
        const auto i = static_cast<std::size_t>(rng.index(value.size()));
        if (std::find(entries.begin(), entries.end(), i) == entries.end()) entries.push_back(i);
      }
    }

    ParamGradError err{params.names()[p], 0.0, entries.size()};
    for (std::size_t i : entries) {
      double h = opts.step;
      double numeric = quotient(value[i], h);
      double half = quotient(value[i], h / 2);
      // a kink inside the stencil shows up as a step-dependent quotient, or as a
      // mismatch when both stencils straddle it alike; a wrong rule fails at every step
      auto suspect = [&] {
        return grad_rel_err(numeric, half) > opts.tol / 10 || grad_rel_err(grad[i], numeric) >= opts.tol;
      };
      if (suspect()) {
        ++report.kinks;
        for (int round = 0; round < 3 && suspect(); ++round) {
          h /= 100;
          numeric = quotient(value[i], h);
          half = quotient(value[i], h / 2);
        }
      }
      err.max_rel_err = std::max(err.max_rel_err, grad_rel_err(grad[i], numeric));
    }
    report.max_rel_err = std::max(report.max_rel_err, err.max_rel_err);
    report.params.push_back(std::move(err));
  }
  report.passed = report.max_rel_err < opts.tol;
  params.zero_grad();
  return report;
}

}  // namespace dudo
