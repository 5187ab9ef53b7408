// SPDX-License-Identifier: Apache-2.0
//
// Window multi-head self-attention over C x H x W feature maps.
//
// A map is split into non-overlapping window x window token groups (zero
// padded up to a multiple of the window and cropped afterwards). Tokens are
// C-vectors; each group attends only within itself.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <tuple>
#include <vector>

#include "dudo/backbone/layers.hpp"

namespace dudo {

namespace detail {

struct WindowLayout {
  std::size_t c, h, w, ws, ny, nx;
  std::size_t windows() const { return ny * nx; }
  std::size_t tokens() const { return ws * ws; }
};

inline WindowLayout window_layout(std::size_t c, std::size_t h, std::size_t w, std::size_t ws) {
  return {c, h, w, ws, (h + ws - 1) / ws, (w + ws - 1) / ws};
}

/// [C, H, W] -> [windows, tokens, C]; padded tokens read as zero.
inline IndexMap partition_index(const WindowLayout& l) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(l.windows() * l.tokens() * l.c);
  std::size_t o = 0;
  for (std::size_t wy = 0; wy < l.ny; ++wy)
    for (std::size_t wx = 0; wx < l.nx; ++wx)
      for (std::size_t ty = 0; ty < l.ws; ++ty)
        for (std::size_t tx = 0; tx < l.ws; ++tx) {
          const std::size_t y = wy * l.ws + ty, x = wx * l.ws + tx;
          const bool inside = y < l.h && x < l.w;
          for (std::size_t ch = 0; ch < l.c; ++ch)
            (*idx)[o++] = inside ? static_cast<std::int64_t>((ch * l.h + y) * l.w + x) : -1;
        }
  return idx;
}

/// Inverse of partition_index restricted to the unpadded area.
inline IndexMap merge_index(const WindowLayout& l) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(l.c * l.h * l.w);
  for (std::size_t ch = 0; ch < l.c; ++ch)
    for (std::size_t y = 0; y < l.h; ++y)
      for (std::size_t x = 0; x < l.w; ++x) {
        const std::size_t win = (y / l.ws) * l.nx + x / l.ws;
        const std::size_t tok = (y % l.ws) * l.ws + x % l.ws;
        (*idx)[(ch * l.h + y) * l.w + x] = static_cast<std::int64_t>((win * l.tokens() + tok) * l.c + ch);
      }
  return idx;
}

/// [B, L, 3C] -> [B * heads, L, d] for part 0 (q), 1 (k) or 2 (v).
inline IndexMap split_heads_index(std::size_t b, std::size_t l, std::size_t c, std::size_t heads, std::size_t part) {
  const std::size_t d = c / heads;
  auto idx = std::make_shared<std::vector<std::int64_t>>(b * heads * l * d);
  std::size_t o = 0;
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hd = 0; hd < heads; ++hd)
      for (std::size_t t = 0; t < l; ++t)
        for (std::size_t j = 0; j < d; ++j)
          (*idx)[o++] = static_cast<std::int64_t>((bi * l + t) * 3 * c + part * c + hd * d + j);
  return idx;
}

/// [B * heads, L, d] -> [B, L, C].
inline IndexMap merge_heads_index(std::size_t b, std::size_t l, std::size_t c, std::size_t heads) {
  const std::size_t d = c / heads;
  auto idx = std::make_shared<std::vector<std::int64_t>>(b * l * c);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t hd = 0; hd < heads; ++hd)
        for (std::size_t j = 0; j < d; ++j)
          (*idx)[(bi * l + t) * c + hd * d + j] = static_cast<std::int64_t>(((bi * heads + hd) * l + t) * d + j);
  return idx;
}

/// Table row for every (query, key) pair of a window, giving [heads, L, L] gathers.
inline IndexMap rel_bias_index(std::size_t ws, std::size_t heads) {
  const std::size_t l = ws * ws, span = 2 * ws - 1;
  auto idx = std::make_shared<std::vector<std::int64_t>>(heads * l * l);
  for (std::size_t hd = 0; hd < heads; ++hd)
    for (std::size_t i = 0; i < l; ++i)
      for (std::size_t j = 0; j < l; ++j) {
        const std::size_t dy = i / ws + ws - 1 - j / ws;
        const std::size_t dx = i % ws + ws - 1 - j % ws;
        (*idx)[(hd * l + i) * l + j] = static_cast<std::int64_t>((dy * span + dx) * heads + hd);
      }
  return idx;
}

/// Index maps depend only on sizes; each thread keeps its own cache.
template <class Key, class Make>
IndexMap cached_index(std::map<Key, IndexMap>& cache, const Key& key, Make&& make) {
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  return cache.emplace(key, make()).first->second;
}

}  // namespace detail

struct WmsaSpec {
  std::size_t channels;
  std::size_t window;
  std::size_t heads;
  bool rel_bias = true;
};

template <class T>
void init_wmsa(ParamStore<T>& store, const std::string& name, const WmsaSpec& s, Rng& rng, bool zero_proj = false) {
  if (s.heads == 0 || s.channels % s.heads != 0) {
    throw ConfigError("wmsa: channels (" + std::to_string(s.channels) + ") not divisible by heads (" +
                      std::to_string(s.heads) + ")");
  }
  init_dense(store, name + ".qkv", s.channels, 3 * s.channels, rng);
  init_dense(store, name + ".proj", s.channels, s.channels, rng, zero_proj);
  if (s.rel_bias) {
    const std::size_t span = 2 * s.window - 1;
    store.add(name + ".rpb", random_normal<T>({span * span, s.heads}, rng, 0.02));
  }
}

inline std::size_t wmsa_param_count(const WmsaSpec& s) {
  const std::size_t span = 2 * s.window - 1;
  return dense_param_count(s.channels, 3 * s.channels) + dense_param_count(s.channels, s.channels) +
         (s.rel_bias ? span * span * s.heads : 0);
}

/// Multi-head self-attention over token groups [B, L, C]. `bias`, if given, is
/// [heads, L, L] and is added to the scaled scores of every group.
template <class T>
Var<T> attention_core(const Net<T>& net, const std::string& name, Var<T> tokens, std::size_t heads,
                      std::optional<Var<T>> bias = std::nullopt) {
  const Shape& s = tokens.shape();
  if (s.size() != 3) throw ShapeError("attention: tokens must be [B, L, C], got " + shape_str(s));
  const std::size_t b = s[0], l = s[1], c = s[2];
  if (heads == 0 || c % heads != 0) {
    throw ShapeError("attention: channels (" + std::to_string(c) + ") not divisible by heads (" +
                     std::to_string(heads) + ")");
  }
  const std::size_t d = c / heads;
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t, std::size_t>, IndexMap> split;
  thread_local std::map<std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>, IndexMap> merge;

  Var<T> qkv = linear(net, name + ".qkv", tokens);
  auto part = [&](std::size_t which) {
    auto idx = detail::cached_index(split, std::tuple{b, l, c, heads, which},
                                    [&] { return detail::split_heads_index(b, l, c, heads, which); });
    return gather(qkv, idx, Shape{b * heads, l, d});
  };
  Var<T> q = part(0), k = part(1), v = part(2);
  Var<T> scores = scale(matmul(q, k, true), T(1) / std::sqrt(static_cast<T>(d)));
  if (bias) {
    scores = reshape(add_broadcast(reshape(scores, Shape{b, heads, l, l}), *bias), Shape{b * heads, l, l});
  }
  Var<T> attn = softmax(scores, 2);
  Var<T> mixed = matmul(attn, v);
  auto midx = detail::cached_index(merge, std::tuple{b, l, c, heads},
                                   [&] { return detail::merge_heads_index(b, l, c, heads); });
  return linear(net, name + ".proj", gather(mixed, midx, Shape{b, l, c}));
}

/// Windowed MSA on a C x H x W map; channels and spatial size are preserved.
template <class T>
Var<T> wmsa(const Net<T>& net, const std::string& name, Var<T> x, const WmsaSpec& s) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("wmsa: input must be C x H x W, got " + shape_str(xs));
  if (xs[0] != s.channels) {
    throw ShapeError("wmsa: input has " + std::to_string(xs[0]) + " channels, expected " +
                     std::to_string(s.channels));
  }
  if (s.heads == 0 || s.channels % s.heads != 0) throw ShapeError("wmsa: channels not divisible by heads");
  if (s.window < 1) throw ShapeError("wmsa: window must be >= 1");
  const auto lay = detail::window_layout(xs[0], xs[1], xs[2], s.window);
  using Key = std::tuple<std::size_t, std::size_t, std::size_t, std::size_t>;
  thread_local std::map<Key, IndexMap> parts, merges, biases;
  const Key key{lay.c, lay.h, lay.w, lay.ws};

  Var<T> tokens = gather(x, detail::cached_index(parts, key, [&] { return detail::partition_index(lay); }),
                         Shape{lay.windows(), lay.tokens(), lay.c});
  std::optional<Var<T>> bias;
  if (s.rel_bias) {
    const auto bidx = detail::cached_index(biases, Key{s.window, s.heads, 0, 0},
                                           [&] { return detail::rel_bias_index(s.window, s.heads); });
    bias = gather(net.p(name + ".rpb"), bidx, Shape{s.heads, lay.tokens(), lay.tokens()});
  }
  Var<T> out = attention_core(net, name, tokens, s.heads, bias);
  return gather(out, detail::cached_index(merges, key, [&] { return detail::merge_index(lay); }),
                Shape{lay.c, lay.h, lay.w});
}

}  // namespace dudo
