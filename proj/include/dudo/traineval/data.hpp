// SPDX-License-Identifier: Apache-2.0
//
// Seeded reconstruction cases: phantom pair, mask, measurements and a
// reference under one availability condition.

#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "dudo/mrisim/phantom.hpp"

namespace dudo {

/// One supervised example. Everything is 64-bit; callers cast as needed.
struct ReconCase {
  std::uint64_t seed = 0;
  double accel = 1.0;
  RefQuality quality = RefQuality::kAbsent;
  int ac = 0;
  SamplingMask mask{std::vector<bool>(1, true), 1};
  Tensor<double> k_gt;       // fully sampled target k-space
  Tensor<double> i_gt;       // ifft2c(k_gt)
  Tensor<double> k_sub;      // undersampled target k-space
  Tensor<double> reference;  // degraded reference image (zeros when absent)
};

// sub-streams derived from a case seed
enum CaseStream : std::uint64_t { kStreamPhantom = 0, kStreamAccel, kStreamMask, kStreamCondition, kStreamRefMask };

/// Builds the case for a given seed, acceleration and reference condition.
/// The phantom and the target mask depend only on (seed, accel), so the same
/// seed yields identical measurements under every reference condition.
inline ReconCase make_case(std::uint64_t seed, std::size_t size, double accel, double acs_frac, RefQuality quality) {
  ReconCase c;
  c.seed = seed;
  c.accel = accel;
  c.quality = quality;
  const PhantomPair pair = gen_phantom_pair(size, mix_seed(seed, kStreamPhantom));
  c.k_gt = fft2c(pair.contrast_a);
  c.i_gt = ifft2c(c.k_gt);
  c.mask = make_cartesian_mask(size, size, accel, acs_frac, mix_seed(seed, kStreamMask));
  c.k_sub = undersample(c.k_gt, c.mask);
  auto [ref, cond] = degrade_reference(pair.contrast_b, quality, mix_seed(seed, kStreamRefMask));
  c.reference = std::move(ref);
  c.ac = cond.value;
  return c;
}

/// Reference condition drawn with probabilities (HQ, LQ, absent).
inline RefQuality draw_condition(Rng& rng, const std::array<double, 3>& probs) {
  const double u = rng.uniform();
  if (u < probs[0]) return RefQuality::kHQ;
  if (u < probs[0] + probs[1]) return RefQuality::kLQ;
  return RefQuality::kAbsent;
}

/// Half-open range of case seeds.
struct SeedRange {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  bool overlaps(const SeedRange& o) const { return begin < o.end && o.begin < end; }
};

/// Training case seeds are (seed << 32) + step; held-out seeds have the top
/// bit set, so the two families never meet for admissible inputs.
inline constexpr std::uint64_t kHeldOutBase = std::uint64_t{1} << 63;
inline constexpr std::uint64_t kMaxTrainSeed = (std::uint64_t{1} << 31) - 1;
inline constexpr std::uint64_t kMaxEvalCases = std::uint64_t{1} << 20;
inline constexpr std::uint64_t kMaxEvalSeed = (std::uint64_t{1} << 43) - 1;

inline std::uint64_t training_case_seed(std::uint64_t seed, std::uint64_t step) { return (seed << 32) + step; }

inline SeedRange training_seed_range(std::uint64_t seed, std::uint64_t steps) {
  return {training_case_seed(seed, 0), training_case_seed(seed, 0) + steps};
}

inline std::uint64_t held_out_case_seed(std::uint64_t seed, std::uint64_t index) {
  return kHeldOutBase | ((seed << 20) + index);
}

inline SeedRange held_out_seed_range(std::uint64_t seed, std::uint64_t n_cases) {
  return {held_out_case_seed(seed, 0), held_out_case_seed(seed, 0) + n_cases};
}

}  // namespace dudo
