// SPDX-License-Identifier: Apache-2.0
//
// DRDB, STL, X-TL, XBB, RSTB, SE and the backbone chain with global feature fusion.

#pragma once

#include <string>
#include <vector>

#include "dudo/backbone/attention.hpp"
#include "dudo/backbone/config.hpp"

namespace dudo {

// ---------------------------------------------------------------------------
// DRDB: C dense 3x3 dilated layers of G channels, 1x1 local fusion, residual.

template <class T>
void init_drdb(ParamStore<T>& store, const std::string& name, std::size_t G0, std::size_t G, std::size_t C, Rng& rng,
               const InitOptions& opt = {}) {
  for (std::size_t i = 0; i < C; ++i) init_conv(store, name + ".l" + std::to_string(i), G0 + i * G, G, 3, rng);
  init_conv(store, name + ".lff", G0 + C * G, G0, 1, rng, opt.zero_block_tails);
}

inline std::size_t drdb_param_count(std::size_t G0, std::size_t G, std::size_t C) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < C; ++i) n += conv_param_count(G0 + i * G, G, 3);
  return n + conv_param_count(G0 + C * G, G0, 1);
}

template <class T>
Var<T> drdb_forward(const Net<T>& net, const std::string& name, Var<T> x, std::size_t C) {
  std::vector<Var<T>> feats{x};
  for (std::size_t i = 0; i < C; ++i) {
    Var<T> in = feats.size() == 1 ? x : concat(feats);
    feats.push_back(relu(conv(net, name + ".l" + std::to_string(i), in, drdb_dilation(i))));
  }
  return add(conv(net, name + ".lff", concat(feats)), x);
}

// ---------------------------------------------------------------------------
// STL: pre-norm W-MSA and a ratio-2 gelu MLP, each with a residual.

inline constexpr std::size_t kMlpRatio = 2;

template <class T>
void init_stl(ParamStore<T>& store, const std::string& name, std::size_t c, std::size_t window, std::size_t heads,
              Rng& rng, const InitOptions& opt = {}) {
  init_layernorm(store, name + ".ln1", c);
  init_wmsa(store, name + ".attn", WmsaSpec{c, window, heads, true}, rng, opt.zero_block_tails);
  init_layernorm(store, name + ".ln2", c);
  init_dense(store, name + ".fc1", c, kMlpRatio * c, rng);
  init_dense(store, name + ".fc2", kMlpRatio * c, c, rng, opt.zero_block_tails);
}

inline std::size_t stl_param_count(std::size_t c, std::size_t window, std::size_t heads) {
  return 4 * c + wmsa_param_count(WmsaSpec{c, window, heads, true}) + dense_param_count(c, kMlpRatio * c) +
         dense_param_count(kMlpRatio * c, c);
}

/// C x H x W -> H*W x C tokens and back.
namespace detail {

inline IndexMap to_tokens_index(std::size_t c, std::size_t hw) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(c * hw);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) (*idx)[p * c + ch] = static_cast<std::int64_t>(ch * hw + p);
  return idx;
}

inline IndexMap from_tokens_index(std::size_t c, std::size_t hw) {
  auto idx = std::make_shared<std::vector<std::int64_t>>(c * hw);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) (*idx)[ch * hw + p] = static_cast<std::int64_t>(p * c + ch);
  return idx;
}

}  // namespace detail

template <class T>
Var<T> stl_forward(const Net<T>& net, const std::string& name, Var<T> x, std::size_t window, std::size_t heads) {
  const Shape& xs = x.shape();
  if (xs.size() != 3) throw ShapeError("stl: input must be C x H x W");
  const std::size_t c = xs[0], h = xs[1], w = xs[2], hw = h * w;
  using Key = std::pair<std::size_t, std::size_t>;
  thread_local std::map<Key, IndexMap> to_tok, from_tok;
  auto tok_idx = detail::cached_index(to_tok, Key{c, hw}, [&] { return detail::to_tokens_index(c, hw); });
  auto map_idx = detail::cached_index(from_tok, Key{c, hw}, [&] { return detail::from_tokens_index(c, hw); });

  Var<T> t = gather(x, tok_idx, Shape{hw, c});
  Var<T> n1 = gather(norm(net, name + ".ln1", t), map_idx, Shape{c, h, w});
  Var<T> a = wmsa(net, name + ".attn", n1, WmsaSpec{c, window, heads, true});
  t = add(t, gather(a, tok_idx, Shape{hw, c}));
  Var<T> m = linear(net, name + ".fc2", gelu(linear(net, name + ".fc1", norm(net, name + ".ln2", t))));
  t = add(t, m);
  return gather(t, map_idx, Shape{c, h, w});
}

// ---------------------------------------------------------------------------
// X-TL: 1x1 compression of c maps to floor(alpha*c).

inline std::size_t xtl_channels(std::size_t c, double alpha) {
  const auto a = static_cast<std::size_t>(std::floor(alpha * static_cast<double>(c) + 1e-9));
  if (a < 1) {
    throw ConfigError("x_tl: floor(alpha*c) = 0 for c = " + std::to_string(c) + ", alpha = " + std::to_string(alpha));
  }
  return a;
}

template <class T>
void init_xtl(ParamStore<T>& store, const std::string& name, std::size_t c, double alpha, Rng& rng) {
  init_conv(store, name, c, xtl_channels(c, alpha), 1, rng);
}

template <class T>
Var<T> x_tl(const Net<T>& net, const std::string& name, Var<T> x) {
  return conv(net, name, x);
}

// ---------------------------------------------------------------------------
// XBB: parallel DRDB and X-TL -> STL branches fused by a 1x1 conv.

template <class T>
struct BlockOutput {
  Var<T> fused;
  Var<T> cnn_branch;
  Var<T> vit_branch;
};

template <class T>
void init_xbb(ParamStore<T>& store, const std::string& name, const XBBConfig& cfg, Rng& rng,
              const InitOptions& opt = {}) {
  const std::size_t a = xtl_channels(cfg.G0, cfg.alpha);
  init_drdb(store, name + ".drdb", cfg.G0, cfg.G, cfg.C, rng, opt);
  init_xtl(store, name + ".xtl", cfg.G0, cfg.alpha, rng);
  init_stl(store, name + ".stl", a, cfg.window, cfg.heads, rng, opt);
  init_conv(store, name + ".fuse", cfg.G0 + a, cfg.G0, 1, rng);
}

inline std::size_t xbb_param_count(const XBBConfig& cfg) {
  const std::size_t a = xtl_channels(cfg.G0, cfg.alpha);
  return drdb_param_count(cfg.G0, cfg.G, cfg.C) + conv_param_count(cfg.G0, a, 1) +
         stl_param_count(a, cfg.window, cfg.heads) + conv_param_count(cfg.G0 + a, cfg.G0, 1);
}

template <class T>
BlockOutput<T> xbb_forward(const Net<T>& net, const std::string& name, Var<T> x, const XBBConfig& cfg) {
  if (x.shape().size() != 3 || x.dim(0) != cfg.G0) {
    throw ShapeError("xbb: input must have G0 = " + std::to_string(cfg.G0) + " channels, got " +
                     shape_str(x.shape()));
  }
  Var<T> fc = drdb_forward(net, name + ".drdb", x, cfg.C);
  Var<T> fv = stl_forward(net, name + ".stl", x_tl(net, name + ".xtl", x), cfg.window, cfg.heads);
  return {conv(net, name + ".fuse", concat<T>({fc, fv})), fc, fv};
}

// ---------------------------------------------------------------------------
// RSTB: two STLs, a 3x3 conv and a block residual.

template <class T>
void init_rstb(ParamStore<T>& store, const std::string& name, std::size_t c, std::size_t window, std::size_t heads,
               Rng& rng, const InitOptions& opt = {}) {
  init_stl(store, name + ".stl0", c, window, heads, rng, opt);
  init_stl(store, name + ".stl1", c, window, heads, rng, opt);
  init_conv(store, name + ".conv", c, c, 3, rng, opt.zero_block_tails);
}

inline std::size_t rstb_param_count(std::size_t c, std::size_t window, std::size_t heads) {
  return 2 * stl_param_count(c, window, heads) + conv_param_count(c, c, 3);
}

template <class T>
Var<T> rstb_forward(const Net<T>& net, const std::string& name, Var<T> x, std::size_t window, std::size_t heads) {
  Var<T> y = stl_forward(net, name + ".stl0", x, window, heads);
  y = stl_forward(net, name + ".stl1", y, window, heads);
  return add(conv(net, name + ".conv", y), x);
}

// ---------------------------------------------------------------------------
// SE: squeeze (spatial mean), excite (c -> c/r -> c, sigmoid), rescale.

inline constexpr std::size_t kSeReduction = 4;

template <class T>
void init_se(ParamStore<T>& store, const std::string& name, std::size_t c, Rng& rng, std::size_t reduction = kSeReduction,
             bool zero_gate = false) {
  if (c < reduction) throw ConfigError("se: channels (" + std::to_string(c) + ") below reduction " + std::to_string(reduction));
  init_dense(store, name + ".fc1", c, c / reduction, rng);
  init_dense(store, name + ".fc2", c / reduction, c, rng, zero_gate);
}

inline std::size_t se_param_count(std::size_t c, std::size_t reduction = kSeReduction) {
  return dense_param_count(c, c / reduction) + dense_param_count(c / reduction, c);
}

template <class T>
Var<T> se_forward(const Net<T>& net, const std::string& name, Var<T> x) {
  Var<T> pooled = mean_spatial(x);
  Var<T> gate = sigmoid(linear(net, name + ".fc2", relu(linear(net, name + ".fc1", pooled))));
  return channel_scale(x, gate);
}

// ---------------------------------------------------------------------------
// Backbone: D chained blocks, F_GF = conv1x1(concat(F_1..F_D)).

inline std::string block_name(const std::string& prefix, std::size_t j) { return prefix + ".b" + std::to_string(j); }

template <class T>
void init_backbone(ParamStore<T>& store, const std::string& name, const XBBConfig& cfg, Rng& rng,
                   const InitOptions& opt = {}) {
  cfg.validate(name);
  const auto kinds = block_types(cfg);
  for (std::size_t j = 0; j < cfg.D; ++j) {
    const std::string bn = block_name(name, j);
    switch (kinds[j]) {
      case BlockKind::kDRDB: init_drdb(store, bn, cfg.G0, cfg.G, cfg.C, rng, opt); break;
      case BlockKind::kRSTB: init_rstb(store, bn, cfg.G0, cfg.window, cfg.heads, rng, opt); break;
      case BlockKind::kXBB: init_xbb(store, bn, cfg, rng, opt); break;
    }
  }
  init_conv(store, name + ".gff", cfg.D * cfg.G0, cfg.G0, 1, rng);
}

inline std::size_t backbone_param_count(const XBBConfig& cfg) {
  std::size_t n = 0;
  for (BlockKind k : block_types(cfg)) {
    switch (k) {
      case BlockKind::kDRDB: n += drdb_param_count(cfg.G0, cfg.G, cfg.C); break;
      case BlockKind::kRSTB: n += rstb_param_count(cfg.G0, cfg.window, cfg.heads); break;
      case BlockKind::kXBB: n += xbb_param_count(cfg); break;
    }
  }
  return n + conv_param_count(cfg.D * cfg.G0, cfg.G0, 1);
}

template <class T>
Var<T> backbone_forward(const Net<T>& net, const std::string& name, Var<T> x, const XBBConfig& cfg) {
  if (x.shape().size() != 3 || x.dim(0) != cfg.G0) {
    throw ShapeError("backbone: input must have G0 = " + std::to_string(cfg.G0) + " channels, got " +
                     shape_str(x.shape()));
  }
  const auto kinds = block_types(cfg);
  std::vector<Var<T>> outs;
  Var<T> f = x;
  for (std::size_t j = 0; j < cfg.D; ++j) {
    const std::string bn = block_name(name, j);
    switch (kinds[j]) {
      case BlockKind::kDRDB: f = drdb_forward(net, bn, f, cfg.C); break;
      case BlockKind::kRSTB: f = rstb_forward(net, bn, f, cfg.window, cfg.heads); break;
      case BlockKind::kXBB: f = xbb_forward(net, bn, f, cfg).fused; break;
    }
    outs.push_back(f);
  }
  return conv(net, name + ".gff", outs.size() == 1 ? outs[0] : concat(outs));
}

}  // namespace dudo
