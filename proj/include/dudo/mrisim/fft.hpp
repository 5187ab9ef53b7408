// SPDX-License-Identifier: Apache-2.0
//
// Centered, orthonormal 2-D DFT over 2 x H x W (real, imaginary) grids.
//
// The centered transform puts the zero frequency at (H/2, W/2) and treats the
// image origin as sitting at the same index, i.e. fftshift(fft(ifftshift(x)))
// scaled by 1/sqrt(HW). Grid sizes here are at most 64, so the transform is a
// pair of dense matrix products.

#pragma once

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "dudo/diffcore/ops.hpp"

namespace dudo {

namespace detail {

/// n x n centered unitary DFT matrix, split into real and imaginary parts.
template <class T>
struct CenteredDft {
  std::vector<T> re, im;

  CenteredDft(std::size_t n, bool inverse) : re(n * n), im(n * n) {
    const auto c = static_cast<long long>(n / 2);
    const auto nn = static_cast<long long>(n);
    const double norm = 1.0 / std::sqrt(static_cast<double>(n));
    const double sign = inverse ? 1.0 : -1.0;
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t j = 0; j < n; ++j) {
        long long p = ((static_cast<long long>(k) - c) * (static_cast<long long>(j) - c)) % nn;
        if (p < 0) p += nn;
        const double phase = sign * 2.0 * std::numbers::pi * static_cast<double>(p) / static_cast<double>(n);
        re[k * n + j] = static_cast<T>(norm * std::cos(phase));
        im[k * n + j] = static_cast<T>(norm * std::sin(phase));
      }
  }
};

template <class T>
Tensor<T> dft2(const Tensor<T>& x, bool inverse) {
  if (x.rank() != 3 || x.dim(0) != 2) throw ShapeError("fft2c: expected a 2 x H x W complex grid");
  const std::size_t h = x.dim(1), w = x.dim(2);
  if (h < 2 || w < 2) throw ShapeError("fft2c: grid must be at least 2 x 2");
  if (!x.all_finite()) throw NumericError("fft2c: non-finite input");
  const CenteredDft<T> fh(h, inverse), fw(w, inverse);
  const T* xr = x.ptr();
  const T* xi = x.ptr() + h * w;

  // rows: Z[y][k] = sum_x X[y][x] Fw[k][x]
  std::vector<T> zr(h * w, T(0)), zi(h * w, T(0));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t k = 0; k < w; ++k) {
      T ar{0}, ai{0};
      for (std::size_t j = 0; j < w; ++j) {
        const T a = xr[y * w + j], b = xi[y * w + j];
        const T c = fw.re[k * w + j], d = fw.im[k * w + j];
        ar += a * c - b * d;
        ai += a * d + b * c;
      }
      zr[y * w + k] = ar;
      zi[y * w + k] = ai;
    }
  // columns: out[k][l] = sum_y Fh[k][y] Z[y][l]
  Tensor<T> out(Shape{2, h, w});
  T* orr = out.ptr();
  T* oi = out.ptr() + h * w;
  for (std::size_t k = 0; k < h; ++k)
    for (std::size_t y = 0; y < h; ++y) {
      const T c = fh.re[k * h + y], d = fh.im[k * h + y];
      for (std::size_t l = 0; l < w; ++l) {
        const T a = zr[y * w + l], b = zi[y * w + l];
        orr[k * w + l] += c * a - d * b;
        oi[k * w + l] += c * b + d * a;
      }
    }
  return out;
}

}  // namespace detail

template <class T>
Tensor<T> fft2c(const Tensor<T>& image) {
  return detail::dft2(image, false);
}

template <class T>
Tensor<T> ifft2c(const Tensor<T>& kspace) {
  return detail::dft2(kspace, true);
}

// The transforms are unitary, so each one's adjoint is the other.

template <class T>
Var<T> fft2c(Var<T> image) {
  return image.tape().push(fft2c(image.value()), {image},
                           [image](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                             detail::accumulate(t, image, ifft2c(g));
                           },
                           "fft2c");
}

template <class T>
Var<T> ifft2c(Var<T> kspace) {
  return kspace.tape().push(ifft2c(kspace.value()), {kspace},
                            [kspace](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                              detail::accumulate(t, kspace, fft2c(g));
                            },
                            "ifft2c");
}

}  // namespace dudo
