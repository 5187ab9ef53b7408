// SPDX-License-Identifier: Apache-2.0
//
// Procedural paired-contrast phantoms and reference degradation.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "dudo/mrisim/fft.hpp"
#include "dudo/mrisim/sampling.hpp"

namespace dudo {

/// Two contrasts of one anatomy, each a 2 x S x S grid with zero imaginary part
/// and magnitudes normalised to [0, 1].
struct PhantomPair {
  Tensor<double> contrast_a;  // target-like
  Tensor<double> contrast_b;  // reference-like
};

enum class RefQuality { kAbsent, kLQ, kHQ };

inline std::string to_string(RefQuality q) {
  switch (q) {
    case RefQuality::kAbsent: return "absent";
    case RefQuality::kLQ: return "LQ";
    case RefQuality::kHQ: return "HQ";
  }
  return "?";
}

inline RefQuality parse_ref_quality(const std::string& s) {
  if (s == "absent") return RefQuality::kAbsent;
  if (s == "LQ") return RefQuality::kLQ;
  if (s == "HQ") return RefQuality::kHQ;
  throw ConfigError("unknown reference condition '" + s + "' (expected HQ, LQ or absent)");
}

struct AvailabilityCondition {
  int value = 0;
  RefQuality quality = RefQuality::kAbsent;

  static AvailabilityCondition of(RefQuality q) { return {q == RefQuality::kAbsent ? 0 : 1, q}; }
};

inline constexpr double kSupportThreshold = 0.02;
inline constexpr double kMinContrastGap = 0.05;

namespace detail {

struct LabelMap {
  std::size_t size;
  std::vector<int> labels;  // 0 = outside the head
  int count = 1;

  int& at(std::ptrdiff_t y, std::ptrdiff_t x) {
    return labels[static_cast<std::size_t>(y) * size + static_cast<std::size_t>(x)];
  }
  bool inside(std::ptrdiff_t y, std::ptrdiff_t x) const {
    const auto n = static_cast<std::ptrdiff_t>(size);
    return y >= 0 && x >= 0 && y < n && x < n && labels[static_cast<std::size_t>(y * n + x)] != 0;
  }
};

inline bool in_ellipse(double y, double x, double cy, double cx, double ay, double ax, double theta) {
  const double dy = y - cy, dx = x - cx;
  const double c = std::cos(theta), s = std::sin(theta);
  const double u = (c * dx + s * dy) / ax;
  const double v = (-s * dx + c * dy) / ay;
  return u * u + v * v <= 1.0;
}

}  // namespace detail

/// Ellipse head, 3-8 ellipses/rectangles, 1-3 thin lines and 1-3 isolated dots.
/// Both contrasts share the geometry; every region draws its own intensity per
/// contrast. Deterministic in `seed`.
inline PhantomPair gen_phantom_pair(std::size_t size, std::uint64_t seed) {
  if (size != 16 && size != 32 && size != 64) {
    throw ShapeError("gen_phantom_pair: size must be 16, 32 or 64, got " + std::to_string(size));
  }
  Rng rng(seed);
  const double s = static_cast<double>(size);
  const auto n = static_cast<std::ptrdiff_t>(size);
  detail::LabelMap map{size, std::vector<int>(size * size, 0)};

  const double cy = s / 2 + rng.uniform(-0.03, 0.03) * s, cx = s / 2 + rng.uniform(-0.03, 0.03) * s;
  const double ay = rng.uniform(0.38, 0.46) * s, ax = rng.uniform(0.32, 0.42) * s;
  const double tilt = rng.uniform(-0.3, 0.3);
  for (std::ptrdiff_t y = 0; y < n; ++y)
    for (std::ptrdiff_t x = 0; x < n; ++x)
      if (detail::in_ellipse(static_cast<double>(y) + 0.5, static_cast<double>(x) + 0.5, cy, cx, ay, ax, tilt))
        map.at(y, x) = 1;

  auto paint = [&](std::ptrdiff_t y, std::ptrdiff_t x, int label) {
    if (map.inside(y, x)) map.at(y, x) = label;
  };
  auto point_in_head = [&](double frac) {
    const double r = frac * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    return std::pair{cy + r * ay * std::sin(phi), cx + r * ax * std::cos(phi)};
  };

  const auto shapes = rng.integer(3, 8);
  for (std::int64_t i = 0; i < shapes; ++i) {
    const int label = ++map.count;
    const auto [py, px] = point_in_head(0.65);
    const double ry = rng.uniform(0.05, 0.2) * s, rx = rng.uniform(0.05, 0.2) * s;
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const bool rect = rng.uniform() < 0.4;
    for (std::ptrdiff_t y = 0; y < n; ++y)
      for (std::ptrdiff_t x = 0; x < n; ++x) {
        const double fy = static_cast<double>(y) + 0.5, fx = static_cast<double>(x) + 0.5;
        bool hit;
        if (rect) {
          const double c = std::cos(theta), sn = std::sin(theta);
          const double u = c * (fx - px) + sn * (fy - py), v = -sn * (fx - px) + c * (fy - py);
          hit = std::abs(u) <= rx && std::abs(v) <= ry;
        } else {
          hit = detail::in_ellipse(fy, fx, py, px, ry, rx, theta);
        }
        if (hit) paint(y, x, label);
      }
  }

  const auto lines = rng.integer(1, 3);
  for (std::int64_t i = 0; i < lines; ++i) {
    const int label = ++map.count;
    const auto [y0, x0] = point_in_head(0.8);
    const auto [y1, x1] = point_in_head(0.8);
    const bool thick = rng.uniform() < 0.5;
    const double len = std::hypot(y1 - y0, x1 - x0);
    const auto steps = static_cast<std::ptrdiff_t>(std::ceil(len * 4)) + 1;
    const bool steep = std::abs(y1 - y0) > std::abs(x1 - x0);
    for (std::ptrdiff_t k = 0; k <= steps; ++k) {
      const double t = static_cast<double>(k) / static_cast<double>(steps);
      const auto y = static_cast<std::ptrdiff_t>(std::floor(y0 + t * (y1 - y0)));
      const auto x = static_cast<std::ptrdiff_t>(std::floor(x0 + t * (x1 - x0)));
      paint(y, x, label);
      if (thick) steep ? paint(y, x + 1, label) : paint(y + 1, x, label);
    }
  }

  const auto dots = rng.integer(1, 3);
  for (std::int64_t i = 0; i < dots; ++i) {
    const int label = ++map.count;
    const auto [py, px] = point_in_head(0.8);
    paint(static_cast<std::ptrdiff_t>(std::floor(py)), static_cast<std::ptrdiff_t>(std::floor(px)), label);
  }

  auto draw = [&](std::vector<double>& intensity) {
    intensity.assign(static_cast<std::size_t>(map.count) + 1, 0.0);
    for (int l = 1; l <= map.count; ++l) intensity[static_cast<std::size_t>(l)] = rng.uniform(0.1, 1.0);
  };
  auto render = [&](const std::vector<double>& intensity) {
    Tensor<double> img(Shape{2, size, size});
    double mx = 0.0;
    for (std::size_t i = 0; i < size * size; ++i) mx = std::max(mx, intensity[static_cast<std::size_t>(map.labels[i])]);
    for (std::size_t i = 0; i < size * size; ++i) img[i] = intensity[static_cast<std::size_t>(map.labels[i])] / mx;
    return img;
  };

  std::vector<double> ia, ib;
  draw(ia);
  PhantomPair pair{render(ia), Tensor<double>()};
  // redraw the second contrast until it differs enough on the support
  for (;;) {
    draw(ib);
    pair.contrast_b = render(ib);
    double diff = 0.0;
    std::size_t support = 0;
    for (std::size_t i = 0; i < size * size; ++i) {
      if (map.labels[i] == 0) continue;
      diff += std::abs(pair.contrast_a[i] - pair.contrast_b[i]);
      ++support;
    }
    if (diff / static_cast<double>(support) > kMinContrastGap) break;
  }
  return pair;
}

/// Magnitude of a 2 x H x W grid.
template <class T>
std::vector<double> magnitude(const Tensor<T>& grid) {
  const std::size_t hw = grid.size() / 2;
  std::vector<double> m(hw);
  for (std::size_t i = 0; i < hw; ++i) m[i] = std::hypot(static_cast<double>(grid[i]), static_cast<double>(grid[hw + i]));
  return m;
}

inline constexpr double kLowQualityAccel = 2.0;
inline constexpr double kDefaultAcsFraction = 0.125;

/// HQ keeps the reference, LQ is a 2x undersampled zero-filled copy, absent is a black image.
template <class T>
std::pair<Tensor<T>, AvailabilityCondition> degrade_reference(const Tensor<T>& ref, RefQuality quality,
                                                               std::uint64_t seed) {
  switch (quality) {
    case RefQuality::kHQ:
      return {ref, AvailabilityCondition::of(quality)};
    case RefQuality::kLQ: {
      const auto mask = make_cartesian_mask(ref.dim(2), ref.dim(1), kLowQualityAccel, kDefaultAcsFraction, seed);
      return {ifft2c(undersample(fft2c(ref), mask)), AvailabilityCondition::of(quality)};
    }
    case RefQuality::kAbsent:
      break;
  }
  return {Tensor<T>(ref.shape()), AvailabilityCondition::of(RefQuality::kAbsent)};
}

}  // namespace dudo
