// SPDX-License-Identifier: Apache-2.0
//
// 1-D Cartesian undersampling and hard data consistency.

#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "dudo/diffcore/ops.hpp"

namespace dudo {

/// Column mask of an H x W k-space grid; every row shares the same columns.
class SamplingMask {
 public:
  SamplingMask(std::vector<bool> columns, std::size_t height) : columns_(std::move(columns)), height_(height) {
    if (columns_.empty() || height_ == 0) throw ShapeError("sampling mask must be non-empty");
  }

  std::size_t width() const { return columns_.size(); }
  std::size_t height() const { return height_; }
  bool column(std::size_t c) const { return columns_.at(c); }
  bool at(std::size_t /*row*/, std::size_t c) const { return columns_.at(c); }
  const std::vector<bool>& columns() const { return columns_; }

  std::size_t sampled_count() const {
    std::size_t n = 0;
    for (bool b : columns_) n += b;
    return n;
  }

  /// Selection flags over a `channels` x H x W grid.
  std::shared_ptr<const std::vector<std::uint8_t>> expand(std::size_t channels = 2) const {
    auto flags = std::make_shared<std::vector<std::uint8_t>>(channels * height_ * width());
    for (std::size_t ch = 0; ch < channels; ++ch)
      for (std::size_t r = 0; r < height_; ++r)
        for (std::size_t c = 0; c < width(); ++c) (*flags)[(ch * height_ + r) * width() + c] = columns_[c];
    return flags;
  }

  template <class T>
  Tensor<T> as_tensor() const {
    Tensor<T> t(Shape{height_, width()});
    for (std::size_t r = 0; r < height_; ++r)
      for (std::size_t c = 0; c < width(); ++c) t[r * width() + c] = columns_[c] ? T(1) : T(0);
    return t;
  }

  friend bool operator==(const SamplingMask&, const SamplingMask&) = default;

 private:
  std::vector<bool> columns_;
  std::size_t height_;
};

/// Number of centered auto-calibration columns, ceil(acs_frac * W).
inline std::size_t acs_columns(std::size_t width, double acs_frac) {
  return static_cast<std::size_t>(std::ceil(acs_frac * static_cast<double>(width) - 1e-9));
}

/// First index of the centered ACS block.
inline std::size_t acs_start(std::size_t width, std::size_t acs) { return width / 2 - acs / 2; }

/// Always samples the centered ACS block, then draws the remaining
/// round(W / accel) - ACS columns uniformly without replacement.
inline SamplingMask make_cartesian_mask(std::size_t width, std::size_t height, double accel, double acs_frac,
                                        std::uint64_t seed) {
  if (!(accel >= 1.0)) throw ShapeError("make_cartesian_mask: acceleration must be >= 1");
  if (!(acs_frac > 0.0 && acs_frac <= 1.0)) throw ShapeError("make_cartesian_mask: acs_frac must be in (0, 1]");
  const std::size_t acs = acs_columns(width, acs_frac);
  const auto total = static_cast<std::size_t>(std::lround(static_cast<double>(width) / accel));
  if (total < acs) {
    throw ShapeError("make_cartesian_mask: " + std::to_string(acs) + " ACS columns exceed the budget of " +
                     std::to_string(total) + " sampled columns");
  }
  std::vector<bool> cols(width, false);
  const std::size_t start = acs_start(width, acs);
  for (std::size_t c = start; c < start + acs; ++c) cols[c] = true;

  std::vector<std::size_t> pool;
  for (std::size_t c = 0; c < width; ++c)
    if (!cols[c]) pool.push_back(c);
  Rng rng(seed);
  // partial Fisher-Yates
  for (std::size_t i = 0; i < total - acs; ++i) {
    const auto j = i + static_cast<std::size_t>(rng.index(pool.size() - i));
    std::swap(pool[i], pool[j]);
    cols[pool[i]] = true;
  }
  return SamplingMask(std::move(cols), height);
}

inline void check_mask_shape(const Shape& grid, const SamplingMask& mask, const char* op) {
  if (grid.size() != 3 || grid[0] != 2 || grid[1] != mask.height() || grid[2] != mask.width()) {
    throw ShapeError(std::string(op) + ": grid " + shape_str(grid) + " does not match mask " +
                     std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
  }
}

/// Zeroes unsampled entries of both channels.
template <class T>
Tensor<T> undersample(const Tensor<T>& kspace, const SamplingMask& mask) {
  check_mask_shape(kspace.shape(), mask, "undersample");
  Tensor<T> out = kspace;
  const std::size_t h = mask.height(), w = mask.width();
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        if (!mask.column(c)) out[(ch * h + r) * w + c] = T(0);
  return out;
}

/// Hard data consistency: measured values on sampled entries, predictions elsewhere.
template <class T>
Tensor<T> data_consistency(const Tensor<T>& k_pred, const Tensor<T>& k_meas, const SamplingMask& mask) {
  check_mask_shape(k_pred.shape(), mask, "data_consistency");
  check_mask_shape(k_meas.shape(), mask, "data_consistency");
  Tensor<T> out = k_pred;
  const std::size_t h = mask.height(), w = mask.width();
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c)
        if (mask.column(c)) out[(ch * h + r) * w + c] = k_meas[(ch * h + r) * w + c];
  return out;
}

/// Differentiable in k_pred; the gradient is masked to unsampled entries.
template <class T>
Var<T> data_consistency(Var<T> k_pred, const Tensor<T>& k_meas, const SamplingMask& mask) {
  check_mask_shape(k_pred.shape(), mask, "data_consistency");
  check_mask_shape(k_meas.shape(), mask, "data_consistency");
  return select(k_pred, k_pred.tape().constant(k_meas), mask.expand(2));
}

}  // namespace dudo
