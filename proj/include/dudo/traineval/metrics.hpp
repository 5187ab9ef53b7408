// SPDX-License-Identifier: Apache-2.0
//
// PSNR and SSIM on magnitude images, both normalised by the reference maximum.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "dudo/mrisim/phantom.hpp"

namespace dudo {

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// 10 log10(1 / MSE) for images already on a unit peak scale; +inf when equal.
inline double psnr_magnitude(const std::vector<double>& x, const std::vector<double>& ref) {
  if (x.size() != ref.size() || x.empty()) throw ShapeError("psnr: image sizes differ");
  double se = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) se += (x[i] - ref[i]) * (x[i] - ref[i]);
  if (se == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(static_cast<double>(x.size()) / se);
}

/// Normalised 11-tap Gaussian, sigma 1.5.
inline std::vector<double> ssim_kernel() {
  std::vector<double> k(kSsimWindow);
  const double c = static_cast<double>(kSsimWindow / 2);
  double s = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double d = static_cast<double>(i) - c;
    k[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
    s += k[i];
  }
  for (auto& v : k) v /= s;
  return k;
}

/// Mean local SSIM over every position where the window fits (no padding), L = 1.
inline double ssim_magnitude(const std::vector<double>& x, const std::vector<double>& y, std::size_t h,
                             std::size_t w) {
  if (x.size() != h * w || y.size() != h * w) throw ShapeError("ssim: image sizes differ");
  if (h < kSsimWindow || w < kSsimWindow) throw ShapeError("ssim: image smaller than the 11 x 11 window");
  const auto g = ssim_kernel();
  const double c1 = kSsimK1 * kSsimK1, c2 = kSsimK2 * kSsimK2;
  const std::size_t oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;

  // separable Gaussian moments: blur rows, then columns
  auto blur = [&](const std::vector<double>& img) {
    std::vector<double> rows(h * ow, 0.0), out(oh * ow, 0.0);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) s += g[k] * img[r * w + c + k];
        rows[r * ow + c] = s;
      }
    for (std::size_t r = 0; r < oh; ++r)
      for (std::size_t c = 0; c < ow; ++c) {
        double s = 0.0;
        for (std::size_t k = 0; k < kSsimWindow; ++k) s += g[k] * rows[(r + k) * ow + c];
        out[r * ow + c] = s;
      }
    return out;
  };
  std::vector<double> xx(h * w), yy(h * w), xy(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = blur(x), my = blur(y), sxx = blur(xx), syy = blur(yy), sxy = blur(xy);
  double total = 0.0;
  for (std::size_t i = 0; i < oh * ow; ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cxy = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(oh * ow);
}

namespace detail {

template <class T, class U>
std::pair<std::vector<double>, std::vector<double>> normalised_magnitudes(const Tensor<T>& x, const Tensor<U>& ref) {
  if (x.rank() != 3 || x.dim(0) != 2 || x.shape() != ref.shape()) {
    throw ShapeError("metrics: expected matching 2 x H x W grids, got " + shape_str(x.shape()) + " and " +
                     shape_str(ref.shape()));
  }
  auto mx = magnitude(x), mr = magnitude(ref);
  const double peak = *std::max_element(mr.begin(), mr.end());
  if (peak > 0.0) {
    for (auto& v : mx) v /= peak;
    for (auto& v : mr) v /= peak;
  }
  return {std::move(mx), std::move(mr)};
}

}  // namespace detail

/// PSNR of complex grid x against ref.
template <class T, class U>
double psnr(const Tensor<T>& x, const Tensor<U>& ref) {
  const auto [a, b] = detail::normalised_magnitudes(x, ref);
  return psnr_magnitude(a, b);
}

template <class T, class U>
double ssim(const Tensor<T>& x, const Tensor<U>& ref) {
  const auto [a, b] = detail::normalised_magnitudes(x, ref);
  return ssim_magnitude(a, b, x.dim(1), x.dim(2));
}

}  // namespace dudo
