// SPDX-License-Identifier: Apache-2.0
//
// Differentiable primitives. Each op validates shapes, computes its output
// eagerly and records a backward rule on the owning tape.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "dudo/diffcore/tape.hpp"

namespace dudo {

enum class Activation { kRelu, kGelu, kSigmoid };

/// Index map for gather(): entry i names the source element, or -1 for zero.
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <class T>
void accumulate(Tape<T>& tape, const Var<T>& v, const Tensor<T>& g) {
  if (!v.requires_grad()) return;
  auto dst = tape.grad_buffer(v.id()).data();
  auto src = g.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
}

template <class T>
T gelu_grad(T x) {
  const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
  const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
  return cdf + x * pdf;
}

template <class T>
T sigmoid(T x) {
  if (x >= 0) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return a.tape().push(std::move(out), {a, b},
                       [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         detail::accumulate(t, a, g);
                         detail::accumulate(t, b, g);
                       },
                       "add");
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return a.tape().push(std::move(out), {a, b},
                       [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         detail::accumulate(t, a, g);
                         if (b.requires_grad()) {
                           auto dst = t.grad_buffer(b.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= g[i];
                         }
                       },
                       "sub");
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape().push(std::move(out), {a, b},
                       [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const auto& av = a.value();
                         const auto& bv = b.value();
                         if (a.requires_grad()) {
                           auto dst = t.grad_buffer(a.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * bv[i];
                         }
                         if (b.requires_grad()) {
                           auto dst = t.grad_buffer(b.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * av[i];
                         }
                       },
                       "mul");
}

/// Elementwise max. Ties route the gradient to `a`.
template <class T>
Var<T> maximum(Var<T> a, Var<T> b) {
  detail::require_same_shape(a, b, "maximum");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::max(out[i], bv[i]);
  return a.tape().push(std::move(out), {a, b},
                       [a, b](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const auto& av = a.value();
                         const auto& bv = b.value();
                         if (a.requires_grad()) {
                           auto dst = t.grad_buffer(a.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i)
                             if (av[i] >= bv[i]) dst[i] += g[i];
                         }
                         if (b.requires_grad()) {
                           auto dst = t.grad_buffer(b.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i)
                             if (av[i] < bv[i]) dst[i] += g[i];
                         }
                       },
                       "maximum");
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v *= s;
  return a.tape().push(std::move(out), {a},
                       [a, s](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         auto dst = t.grad_buffer(a.id()).data();
                         for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s * g[i];
                       },
                       "scale");
}

/// a + b where b's shape equals the trailing dimensions of a.
template <class T>
Var<T> add_broadcast(Var<T> a, Var<T> b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.rbegin(), bs.rend(), as.rbegin())) {
    throw ShapeError("add_broadcast: " + shape_str(bs) + " is not a suffix of " + shape_str(as));
  }
  const std::size_t inner = b.value().size();
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % inner];
  return a.tape().push(std::move(out), {a, b},
                       [a, b, inner](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         detail::accumulate(t, a, g);
                         if (b.requires_grad()) {
                           auto dst = t.grad_buffer(b.id()).data();
                           for (std::size_t i = 0; i < g.size(); ++i) dst[i % inner] += g[i];
                         }
                       },
                       "add_broadcast");
}

template <class T>
Var<T> pointwise(Var<T> x, Activation kind) {
  Tensor<T> out = x.value();
  switch (kind) {
    case Activation::kRelu:
      for (auto& v : out.data()) v = v > T(0) ? v : T(0);
      break;
    case Activation::kGelu:
      for (auto& v : out.data()) v = detail::gelu(v);
      break;
    case Activation::kSigmoid:
      for (auto& v : out.data()) v = detail::sigmoid(v);
      break;
  }
  return x.tape().push(
      std::move(out), {x},
      [x, kind](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
        const auto& xv = x.value();
        auto dst = t.grad_buffer(x.id()).data();
        switch (kind) {
          case Activation::kRelu:
            for (std::size_t i = 0; i < dst.size(); ++i)
              if (xv[i] > T(0)) dst[i] += g[i];
            break;
          case Activation::kGelu:
            for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i] * detail::gelu_grad(xv[i]);
            break;
          case Activation::kSigmoid:
            for (std::size_t i = 0; i < dst.size(); ++i) {
              dst[i] += g[i] * y[i] * (T(1) - y[i]);
            }
            break;
        }
      },
      "pointwise");
}

template <class T>
Var<T> relu(Var<T> x) {
  return pointwise(x, Activation::kRelu);
}
template <class T>
Var<T> gelu(Var<T> x) {
  return pointwise(x, Activation::kGelu);
}
template <class T>
Var<T> sigmoid(Var<T> x) {
  return pointwise(x, Activation::kSigmoid);
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Var<T> sum(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v;
  return x.tape().push(Tensor<T>::scalar(s), {x},
                       [x](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         auto dst = t.grad_buffer(x.id()).data();
                         for (auto& d : dst) d += g[0];
                       },
                       "sum");
}

template <class T>
Var<T> sum_squares(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v * v;
  return x.tape().push(Tensor<T>::scalar(s), {x},
                       [x](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const auto& xv = x.value();
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += T(2) * xv[i] * g[0];
                       },
                       "sum_squares");
}

/// Euclidean norm over all entries. The gradient at the origin is taken as zero.
template <class T>
Var<T> l2_norm(Var<T> x) {
  T s{0};
  for (T v : x.value().data()) s += v * v;
  const T n = std::sqrt(s);
  return x.tape().push(Tensor<T>::scalar(n), {x},
                       [x, n](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         if (n == T(0)) return;
                         const auto& xv = x.value();
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0] * xv[i] / n;
                       },
                       "l2_norm");
}

/// Mean over H x W of a C x H x W map, giving [C].
template <class T>
Var<T> mean_spatial(Var<T> x) {
  if (x.value().rank() != 3) throw ShapeError("mean_spatial expects C x H x W");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out(Shape{c});
  const auto& xv = x.value();
  for (std::size_t ch = 0; ch < c; ++ch) {
    T s{0};
    for (std::size_t i = 0; i < hw; ++i) s += xv[ch * hw + i];
    out[ch] = s / static_cast<T>(hw);
  }
  return x.tape().push(std::move(out), {x},
                       [x, c, hw](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t ch = 0; ch < c; ++ch) {
                           const T gv = g[ch] / static_cast<T>(hw);
                           for (std::size_t i = 0; i < hw; ++i) dst[ch * hw + i] += gv;
                         }
                       },
                       "mean_spatial");
}

/// x[c, y, x] * s[c].
template <class T>
Var<T> channel_scale(Var<T> x, Var<T> s) {
  if (x.value().rank() != 3 || s.value().size() != x.dim(0)) {
    throw ShapeError("channel_scale: expected C x H x W and [C], got " + shape_str(x.shape()) + " and " +
                     shape_str(s.shape()));
  }
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor<T> out = x.value();
  const auto& sv = s.value();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] *= sv[ch];
  return x.tape().push(std::move(out), {x, s},
                       [x, s, c, hw](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const auto& xv = x.value();
                         const auto& sv = s.value();
                         if (x.requires_grad()) {
                           auto dst = t.grad_buffer(x.id()).data();
                           for (std::size_t ch = 0; ch < c; ++ch)
                             for (std::size_t i = 0; i < hw; ++i) dst[ch * hw + i] += g[ch * hw + i] * sv[ch];
                         }
                         if (s.requires_grad()) {
                           auto dst = t.grad_buffer(s.id()).data();
                           for (std::size_t ch = 0; ch < c; ++ch) {
                             T acc{0};
                             for (std::size_t i = 0; i < hw; ++i) acc += g[ch * hw + i] * xv[ch * hw + i];
                             dst[ch] += acc;
                           }
                         }
                       },
                       "channel_scale");
}

// ---------------------------------------------------------------------------
// layout

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape().push(std::move(out), {x},
                       [x](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
                       },
                       "reshape");
}

/// out[i] = x[index[i]], or 0 where index[i] < 0. Covers permutation, padding,
/// cropping and broadcasting; the backward rule is the adjoint scatter-add.
template <class T>
Var<T> gather(Var<T> x, IndexMap index, Shape out_shape) {
  if (index->size() != shape_size(out_shape)) {
    throw ShapeError("gather: index map length does not match output shape " + shape_str(out_shape));
  }
  const auto& xv = x.value();
  const auto n = static_cast<std::int64_t>(xv.size());
  Tensor<T> out(std::move(out_shape));
  const auto& idx = *index;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::int64_t j = idx[i];
    if (j >= n) throw ShapeError("gather: index out of range");
    out[i] = j >= 0 ? xv[static_cast<std::size_t>(j)] : T(0);
  }
  return x.tape().push(std::move(out), {x},
                       [x, index](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         auto dst = t.grad_buffer(x.id()).data();
                         const auto& idx = *index;
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           if (idx[i] >= 0) dst[static_cast<std::size_t>(idx[i])] += g[i];
                       },
                       "gather");
}

/// Concatenation along the leading axis; all other dimensions must agree.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  std::size_t lead = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != shape.size() || !std::equal(s.begin() + 1, s.end(), shape.begin() + 1)) {
      throw ShapeError("concat: incompatible shapes " + shape_str(shape) + " and " + shape_str(s));
    }
    lead += s[0];
  }
  shape[0] = lead;
  Tensor<T> out(shape);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const auto& pv = p.value();
    std::copy(pv.data().begin(), pv.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(off));
    off += pv.size();
  }
  return parts[0].tape().push(std::move(out), parts,
                              [parts](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                                std::size_t off = 0;
                                for (const auto& p : parts) {
                                  const std::size_t n = p.value().size();
                                  if (p.requires_grad()) {
                                    auto dst = t.grad_buffer(p.id()).data();
                                    for (std::size_t i = 0; i < n; ++i) dst[i] += g[off + i];
                                  }
                                  off += n;
                                }
                              },
                              "concat");
}

/// Leading-axis slice [begin, begin + count).
template <class T>
Var<T> slice_leading(Var<T> x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (count == 0 || begin + count > s[0]) throw ShapeError("slice_leading: range out of bounds");
  Shape out_shape = s;
  out_shape[0] = count;
  const std::size_t inner = x.value().size() / s[0];
  const auto& xv = x.value();
  std::vector<T> data(xv.data().begin() + static_cast<std::ptrdiff_t>(begin * inner),
                      xv.data().begin() + static_cast<std::ptrdiff_t>((begin + count) * inner));
  return x.tape().push(Tensor<T>(out_shape, std::move(data)), {x},
                       [x, begin, inner](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t i = 0; i < g.size(); ++i) dst[begin * inner + i] += g[i];
                       },
                       "slice_leading");
}

/// out = mask[i] ? b[i] : a[i].
template <class T>
Var<T> select(Var<T> a, Var<T> b, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  detail::require_same_shape(a, b, "select");
  if (mask->size() != a.value().size()) throw ShapeError("select: mask length mismatch");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i)
    if ((*mask)[i]) out[i] = bv[i];
  return a.tape().push(std::move(out), {a, b},
                       [a, b, mask](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         if (a.requires_grad()) {
                           auto dst = t.grad_buffer(a.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i)
                             if (!(*mask)[i]) dst[i] += g[i];
                         }
                         if (b.requires_grad()) {
                           auto dst = t.grad_buffer(b.id()).data();
                           for (std::size_t i = 0; i < dst.size(); ++i)
                             if ((*mask)[i]) dst[i] += g[i];
                         }
                       },
                       "select");
}

// ---------------------------------------------------------------------------
// linear maps

/// 2-D convolution of a C x H x W map with zero "same" padding of (k-1)*dilation/2.
template <class T>
Var<T> conv2d(Var<T> x, Var<T> w, std::optional<Var<T>> b, std::size_t dilation = 1) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3) throw ShapeError("conv2d: input must be C x H x W, got " + shape_str(xs));
  if (ws.size() != 4 || ws[2] != ws[3]) throw ShapeError("conv2d: weight must be Cout x Cin x k x k");
  if (ws[2] % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  if (dilation < 1) throw ShapeError("conv2d: dilation must be positive");
  if (ws[1] != xs[0]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[0]) + " channels, weight expects " +
                     std::to_string(ws[1]));
  }
  if (b && b->value().size() != ws[0]) throw ShapeError("conv2d: bias length must equal Cout");

  const std::size_t cin = xs[0], h = xs[1], wd = xs[2], cout = ws[0], k = ws[2];
  const auto r = static_cast<std::ptrdiff_t>((k - 1) / 2);
  const auto dil = static_cast<std::ptrdiff_t>(dilation);
  const auto H = static_cast<std::ptrdiff_t>(h), W = static_cast<std::ptrdiff_t>(wd);

  // Visits every (co, ci, ky, kx) tap with its valid output row/column ranges.
  auto for_each_tap = [=](auto&& fn) {
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t dy = (static_cast<std::ptrdiff_t>(ky) - r) * dil;
          const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, -dy), y1 = std::min(H, H - dy);
          if (y0 >= y1) continue;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t dx = (static_cast<std::ptrdiff_t>(kx) - r) * dil;
            const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, -dx), x1 = std::min(W, W - dx);
            if (x0 >= x1) continue;
            fn(co, ci, ((co * cin + ci) * k + ky) * k + kx, dy, y0, y1, dx, x0, x1);
          }
        }
  };

  Tensor<T> out(Shape{cout, h, wd});
  {
    const T* in = x.value().ptr();
    const T* wt = w.value().ptr();
    T* o = out.ptr();
    if (b) {
      const auto& bv = b->value();
      for (std::size_t co = 0; co < cout; ++co) std::fill_n(o + co * h * wd, h * wd, bv[co]);
    }
    for_each_tap([&](std::size_t co, std::size_t ci, std::size_t wi, std::ptrdiff_t dy, std::ptrdiff_t y0,
                     std::ptrdiff_t y1, std::ptrdiff_t dx, std::ptrdiff_t x0, std::ptrdiff_t x1) {
      const T wv = wt[wi];
      for (std::ptrdiff_t y = y0; y < y1; ++y) {
        const T* src = in + (static_cast<std::ptrdiff_t>(ci) * H + y + dy) * W + dx;
        T* dst = o + (static_cast<std::ptrdiff_t>(co) * H + y) * W;
        for (std::ptrdiff_t xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
      }
    });
  }

  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape().push(
      std::move(out), inputs,
      [x, w, b, for_each_tap, H, W, cout, h, wd](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        const T* gp = g.ptr();
        const T* in = x.value().ptr();
        const T* wt = w.value().ptr();
        T* gx = x.requires_grad() ? t.grad_buffer(x.id()).ptr() : nullptr;
        T* gw = w.requires_grad() ? t.grad_buffer(w.id()).ptr() : nullptr;
        for_each_tap([&](std::size_t co, std::size_t ci, std::size_t wi, std::ptrdiff_t dy, std::ptrdiff_t y0,
                         std::ptrdiff_t y1, std::ptrdiff_t dx, std::ptrdiff_t x0, std::ptrdiff_t x1) {
          const T wv = wt[wi];
          T acc{0};
          for (std::ptrdiff_t y = y0; y < y1; ++y) {
            const std::ptrdiff_t src_off = (static_cast<std::ptrdiff_t>(ci) * H + y + dy) * W + dx;
            const T* grow = gp + (static_cast<std::ptrdiff_t>(co) * H + y) * W;
            if (gx) {
              T* dst = gx + src_off;
              for (std::ptrdiff_t xx = x0; xx < x1; ++xx) dst[xx] += wv * grow[xx];
            }
            if (gw) {
              const T* src = in + src_off;
              for (std::ptrdiff_t xx = x0; xx < x1; ++xx) acc += grow[xx] * src[xx];
            }
          }
          if (gw) gw[wi] += acc;
        });
        if (b && b->requires_grad()) {
          auto gb = t.grad_buffer(b->id()).data();
          for (std::size_t co = 0; co < cout; ++co) {
            T acc{0};
            for (std::size_t i = 0; i < h * wd; ++i) acc += gp[co * h * wd + i];
            gb[co] += acc;
          }
        }
      },
      "conv2d");
}

/// Affine map over the trailing axis: x[..., Din] * W[Din, Dout] + b[Dout].
template <class T>
Var<T> dense(Var<T> x, Var<T> w, std::optional<Var<T>> b) {
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (ws.size() != 2 || xs.back() != ws[0]) {
    throw ShapeError("dense: input " + shape_str(xs) + " incompatible with weight " + shape_str(ws));
  }
  if (b && b->value().size() != ws[1]) throw ShapeError("dense: bias length must equal Dout");
  const std::size_t din = ws[0], dout = ws[1], rows = x.value().size() / din;
  Shape out_shape = xs;
  out_shape.back() = dout;
  Tensor<T> out(out_shape);
  {
    const T* xp = x.value().ptr();
    const T* wp = w.value().ptr();
    T* op = out.ptr();
    for (std::size_t n = 0; n < rows; ++n) {
      T* orow = op + n * dout;
      if (b) std::copy_n(b->value().ptr(), dout, orow);
      for (std::size_t i = 0; i < din; ++i) {
        const T xv = xp[n * din + i];
        const T* wrow = wp + i * dout;
        for (std::size_t o = 0; o < dout; ++o) orow[o] += xv * wrow[o];
      }
    }
  }
  std::vector<Var<T>> inputs{x, w};
  if (b) inputs.push_back(*b);
  return x.tape().push(std::move(out), inputs,
                       [x, w, b, din, dout, rows](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const T* gp = g.ptr();
                         const T* xp = x.value().ptr();
                         const T* wp = w.value().ptr();
                         if (x.requires_grad()) {
                           T* gx = t.grad_buffer(x.id()).ptr();
                           for (std::size_t n = 0; n < rows; ++n)
                             for (std::size_t i = 0; i < din; ++i) {
                               T acc{0};
                               const T* wrow = wp + i * dout;
                               const T* grow = gp + n * dout;
                               for (std::size_t o = 0; o < dout; ++o) acc += grow[o] * wrow[o];
                               gx[n * din + i] += acc;
                             }
                         }
                         if (w.requires_grad()) {
                           T* gw = t.grad_buffer(w.id()).ptr();
                           for (std::size_t n = 0; n < rows; ++n)
                             for (std::size_t i = 0; i < din; ++i) {
                               const T xv = xp[n * din + i];
                               T* gwrow = gw + i * dout;
                               const T* grow = gp + n * dout;
                               for (std::size_t o = 0; o < dout; ++o) gwrow[o] += xv * grow[o];
                             }
                         }
                         if (b && b->requires_grad()) {
                           T* gb = t.grad_buffer(b->id()).ptr();
                           for (std::size_t n = 0; n < rows; ++n)
                             for (std::size_t o = 0; o < dout; ++o) gb[o] += gp[n * dout + o];
                         }
                       },
                       "dense");
}

/// Batched product of [B, M, K] with [B, K, N] (or [B, N, K] when transpose_b).
template <class T>
Var<T> matmul(Var<T> a, Var<T> b, bool transpose_b = false) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0]) throw ShapeError("matmul: expects rank-3 batches");
  const std::size_t batch = as[0], m = as[1], kk = as[2];
  const std::size_t n = transpose_b ? bs[1] : bs[2];
  if ((transpose_b ? bs[2] : bs[1]) != kk) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(as) + " vs " + shape_str(bs));
  }
  Tensor<T> out(Shape{batch, m, n});
  {
    const T* ap = a.value().ptr();
    const T* bp = b.value().ptr();
    T* op = out.ptr();
    for (std::size_t bi = 0; bi < batch; ++bi) {
      const T* A = ap + bi * m * kk;
      const T* B = bp + bi * kk * n;
      T* C = op + bi * m * n;
      for (std::size_t i = 0; i < m; ++i) {
        if (transpose_b) {
          for (std::size_t j = 0; j < n; ++j) {
            T acc{0};
            for (std::size_t q = 0; q < kk; ++q) acc += A[i * kk + q] * B[j * kk + q];
            C[i * n + j] = acc;
          }
        } else {
          for (std::size_t q = 0; q < kk; ++q) {
            const T av = A[i * kk + q];
            for (std::size_t j = 0; j < n; ++j) C[i * n + j] += av * B[q * n + j];
          }
        }
      }
    }
  }
  return a.tape().push(std::move(out), {a, b},
                       [a, b, transpose_b, batch, m, kk, n](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const T* ap = a.value().ptr();
                         const T* bp = b.value().ptr();
                         const T* gp = g.ptr();
                         T* ga = a.requires_grad() ? t.grad_buffer(a.id()).ptr() : nullptr;
                         T* gb = b.requires_grad() ? t.grad_buffer(b.id()).ptr() : nullptr;
                         for (std::size_t bi = 0; bi < batch; ++bi) {
                           const T* A = ap + bi * m * kk;
                           const T* B = bp + bi * kk * n;
                           const T* G = gp + bi * m * n;
                           for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < n; ++j) {
                               const T gv = G[i * n + j];
                               if (gv == T(0)) continue;
                               for (std::size_t q = 0; q < kk; ++q) {
                                 const std::size_t bidx = transpose_b ? j * kk + q : q * n + j;
                                 if (ga) ga[bi * m * kk + i * kk + q] += gv * B[bidx];
                                 if (gb) gb[bi * kk * n + bidx] += gv * A[i * kk + q];
                               }
                             }
                           }
                         }
                       },
                       "matmul");
}

// ---------------------------------------------------------------------------
// normalisation

/// Softmax along `axis`.
template <class T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("softmax: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor<T> out(s);
  const auto& xv = x.value();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      T mx = xv[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      T z{0};
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(xv[base + i * inner] - mx);
        out[base + i * inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  return x.tape().push(std::move(out), {x},
                       [x, outer, inner, n](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& yv) {
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t o = 0; o < outer; ++o)
                           for (std::size_t j = 0; j < inner; ++j) {
                             const std::size_t base = o * n * inner + j;
                             T dot{0};
                             for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * yv[base + i * inner];
                             for (std::size_t i = 0; i < n; ++i) {
                               const std::size_t k = base + i * inner;
                               dst[k] += yv[k] * (g[k] - dot);
                             }
                           }
                       },
                       "softmax");
}

/// Layer normalisation over the trailing axis.
template <class T>
Var<T> layernorm(Var<T> x, Var<T> gain, Var<T> shift, T eps = T(1e-5)) {
  const std::size_t c = x.shape().back();
  if (c == 0) throw ShapeError("layernorm: empty trailing axis");
  if (gain.value().size() != c || shift.value().size() != c) {
    throw ShapeError("layernorm: gain/shift length must equal trailing dimension");
  }
  const std::size_t rows = x.value().size() / c;
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const auto& sv = shift.value();
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(xv.size());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T mean{0};
    for (std::size_t i = 0; i < c; ++i) mean += xv[r * c + i];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t i = 0; i < c; ++i) {
      const T d = xv[r * c + i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t i = 0; i < c; ++i) {
      const T xh = (xv[r * c + i] - mean) * is;
      (*xhat)[r * c + i] = xh;
      out[r * c + i] = xh * gv[i] + sv[i];
    }
  }
  return x.tape().push(std::move(out), {x, gain, shift},
                       [x, gain, shift, xhat, inv_std, rows, c](Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
                         const auto& gv = gain.value();
                         if (gain.requires_grad() || shift.requires_grad()) {
                           T* gg = gain.requires_grad() ? t.grad_buffer(gain.id()).ptr() : nullptr;
                           T* gs = shift.requires_grad() ? t.grad_buffer(shift.id()).ptr() : nullptr;
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t i = 0; i < c; ++i) {
                               if (gg) gg[i] += g[r * c + i] * (*xhat)[r * c + i];
                               if (gs) gs[i] += g[r * c + i];
                             }
                         }
                         if (!x.requires_grad()) return;
                         auto dst = t.grad_buffer(x.id()).data();
                         for (std::size_t r = 0; r < rows; ++r) {
                           T mean_d{0}, mean_dx{0};
                           for (std::size_t i = 0; i < c; ++i) {
                             const T d = g[r * c + i] * gv[i];
                             mean_d += d;
                             mean_dx += d * (*xhat)[r * c + i];
                           }
                           mean_d /= static_cast<T>(c);
                           mean_dx /= static_cast<T>(c);
                           for (std::size_t i = 0; i < c; ++i) {
                             const T d = g[r * c + i] * gv[i];
                             dst[r * c + i] += (*inv_std)[r] * (d - mean_d - (*xhat)[r * c + i] * mean_dx);
                           }
                         }
                       },
                       "layernorm");
}

}  // namespace dudo
