// SPDX-License-Identifier: Apache-2.0
//
// Shallow encoders, reference fusion, the image and k-space networks and the
// recurrent dual-domain pipeline.

#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dudo/backbone/blocks.hpp"
#include "dudo/mrisim/fft.hpp"
#include "dudo/mrisim/sampling.hpp"
#include "dudo/uninext/config.hpp"

namespace dudo {

inline constexpr std::size_t kGridChannels = 2;

// ---------------------------------------------------------------------------
// Conv blocks: `depth` 3x3 conv + relu layers.

template <class T>
void init_cb(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t depth,
             Rng& rng) {
  for (std::size_t d = 0; d < depth; ++d) init_conv(store, name + ".c" + std::to_string(d), d == 0 ? cin : cout, cout, 3, rng);
}

template <class T>
Var<T> cb_forward(const Net<T>& net, const std::string& name, Var<T> x, std::size_t depth) {
  for (std::size_t d = 0; d < depth; ++d) x = relu(conv(net, name + ".c" + std::to_string(d), x));
  return x;
}

// ---------------------------------------------------------------------------
// Shallow encoder (PaSS and its Shared / Distinct ablations).

enum class Branch { kTarget, kReference };

template <class T>
void init_pass(ParamStore<T>& store, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  const std::size_t g0 = cfg.image.G0, depth = cfg.cb_depth;
  auto chain = [&](const std::string& prefix, std::size_t blocks) {
    for (std::size_t i = 0; i < blocks; ++i)
      init_cb(store, prefix + ".cb" + std::to_string(i + 1), i == 0 ? kGridChannels : g0, g0, depth, rng);
  };
  switch (cfg.encoder) {
    case Encoder::kShared:
      chain(name + ".s", 4);
      break;
    case Encoder::kDistinct:
      chain(name + ".t", 4);
      chain(name + ".r", 4);
      break;
    case Encoder::kPaSS:
      chain(name + ".s", 3);
      for (const char* b : {".t", ".r"}) {
        chain(name + b, 3);
        for (std::size_t i = 1; i <= 3; ++i) init_conv(store, name + b + ".mix" + std::to_string(i), 2 * g0, g0, 1, rng);
      }
      init_cb(store, name + ".cb4", g0, g0, depth, rng);
      break;
  }
}

/// Shallow features of one modality.
template <class T>
Var<T> pass_branch(const Net<T>& net, const std::string& name, const ModelConfig& cfg, Var<T> img, Branch branch) {
  if (img.shape().size() != 3 || img.dim(0) != kGridChannels) {
    throw ShapeError("pass: expected a 2 x H x W image, got " + shape_str(img.shape()));
  }
  const std::size_t depth = cfg.cb_depth;
  const std::string own = name + (branch == Branch::kTarget ? ".t" : ".r");
  auto chain = [&](const std::string& prefix, Var<T> x) {
    for (std::size_t i = 1; i <= 4; ++i) x = cb_forward(net, prefix + ".cb" + std::to_string(i), x, depth);
    return x;
  };
  switch (cfg.encoder) {
    case Encoder::kShared: return chain(name + ".s", img);
    case Encoder::kDistinct: return chain(own, img);
    case Encoder::kPaSS: break;
  }
  Var<T> shared = img, specific = img;
  for (std::size_t i = 1; i <= 3; ++i) {
    const std::string cb = ".cb" + std::to_string(i);
    shared = cb_forward(net, name + ".s" + cb, shared, depth);
    specific = cb_forward(net, own + cb, specific, depth);
    specific = conv(net, own + ".mix" + std::to_string(i), concat<T>({specific, shared}));
  }
  return cb_forward(net, name + ".cb4", specific, depth);
}

template <class T>
std::pair<Var<T>, Var<T>> pass_forward(const Net<T>& net, const std::string& name, const ModelConfig& cfg,
                                       Var<T> i_tar, Var<T> i_ref) {
  if (i_tar.shape() != i_ref.shape()) {
    throw ShapeError("pass: target " + shape_str(i_tar.shape()) + " and reference " + shape_str(i_ref.shape()) +
                     " differ");
  }
  return {pass_branch(net, name, cfg, i_tar, Branch::kTarget), pass_branch(net, name, cfg, i_ref, Branch::kReference)};
}

// ---------------------------------------------------------------------------
// Fusion into F_0.

inline std::string c2f_name(const std::string& name, Branch b, std::size_t stage) {
  return name + (b == Branch::kTarget ? ".tar" : ".ref") + ".w" + std::to_string(stage);
}

template <class T>
void init_fusion(ParamStore<T>& store, const std::string& name, const ModelConfig& cfg, Rng& rng) {
  const std::size_t g0 = cfg.image.G0;
  switch (cfg.fusion) {
    case Fusion::kMax: break;
    case Fusion::kHeMIS: init_conv(store, name + ".mix", 2 * g0, g0, 1, rng); break;
    case Fusion::kAdaF2C:
    case Fusion::kAdaC2F: {
      const auto windows = cfg.fusion_windows();
      for (Branch b : {Branch::kTarget, Branch::kReference})
        for (std::size_t s = 0; s < windows.size(); ++s)
          init_wmsa(store, c2f_name(name, b, s), WmsaSpec{g0, windows[s], cfg.c2f_heads, true}, rng);
      break;
    }
  }
}

/// A = WMSA_{w1}(WMSA_{w0}(f)) with the branch's own parameters.
template <class T>
Var<T> c2f_attention(const Net<T>& net, const std::string& name, Var<T> f, Branch branch,
                     const std::vector<std::size_t>& windows, std::size_t heads) {
  const std::size_t c = f.dim(0);
  for (std::size_t s = 0; s < windows.size(); ++s) f = wmsa(net, c2f_name(name, branch, s), f, WmsaSpec{c, windows[s], heads, true});
  return f;
}

/// F_0 from the branch features. With ac == 0 the reference is never read.
template <class T>
Var<T> fuse(const Net<T>& net, const std::string& name, const ModelConfig& cfg, Var<T> f_tar,
            std::optional<Var<T>> f_ref, int ac) {
  const bool use_ref = ac != 0;
  if (use_ref && !f_ref) throw ShapeError("fuse: ac = 1 needs reference features");
  if (use_ref && f_ref->shape() != f_tar.shape()) throw ShapeError("fuse: branch shapes differ");
  switch (cfg.fusion) {
    case Fusion::kMax:
      return use_ref ? maximum(f_tar, *f_ref) : f_tar;
    case Fusion::kHeMIS: {
      if (!use_ref) {
        Var<T> zeros = net.tape.constant(Tensor<T>(f_tar.shape()));
        return conv(net, name + ".mix", concat<T>({f_tar, zeros}));
      }
      Var<T> mean = scale(add(f_tar, *f_ref), T(0.5));
      Var<T> half_gap = scale(sub(f_tar, *f_ref), T(0.5));
      return conv(net, name + ".mix", concat<T>({mean, mul(half_gap, half_gap)}));
    }
    case Fusion::kAdaF2C:
    case Fusion::kAdaC2F: {
      const auto windows = cfg.fusion_windows();
      auto enhance = [&](Var<T> f, Branch b) {
        return mul(f, softmax(c2f_attention(net, name, f, b, windows, cfg.c2f_heads), 0));
      };
      Var<T> tar = enhance(f_tar, Branch::kTarget);
      return use_ref ? maximum(tar, enhance(*f_ref, Branch::kReference)) : tar;
    }
  }
  throw ConfigError("fuse: unknown fusion variant");
}

// ---------------------------------------------------------------------------
// I-UniNeXt: I = proj(SE(F_0)) + CB5(F_GF).

template <class T>
void init_i_uninext(ParamStore<T>& store, const std::string& name, const ModelConfig& cfg, Rng& rng,
                    const InitOptions& opt = {}) {
  const std::size_t g0 = cfg.image.G0;
  init_pass(store, name + ".pass", cfg, rng);
  init_fusion(store, name + ".fuse", cfg, rng);
  init_backbone(store, name + ".bb", cfg.image, rng, opt);
  init_se(store, name + ".se", g0, rng);
  init_conv(store, name + ".se_proj", g0, kGridChannels, 1, rng, opt.zero_output_tails);
  init_conv(store, name + ".cb5a", g0, g0, 3, rng);
  init_conv(store, name + ".cb5b", g0, kGridChannels, 3, rng, opt.zero_output_tails);
}

template <class T>
Var<T> i_uninext_forward(const Net<T>& net, const std::string& name, const ModelConfig& cfg, Var<T> i_k, Var<T> i_ref,
                         int ac) {
  if (i_k.shape() != i_ref.shape()) throw ShapeError("i_uninext: image and reference shapes differ");
  Var<T> f_tar = pass_branch(net, name + ".pass", cfg, i_k, Branch::kTarget);
  std::optional<Var<T>> f_ref;
  if (ac != 0) f_ref = pass_branch(net, name + ".pass", cfg, i_ref, Branch::kReference);
  Var<T> f0 = fuse(net, name + ".fuse", cfg, f_tar, f_ref, ac);
  Var<T> fgf = backbone_forward(net, name + ".bb", f0, cfg.image);
  Var<T> head = conv(net, name + ".se_proj", se_forward(net, name + ".se", f0));
  Var<T> tail = conv(net, name + ".cb5b", relu(conv(net, name + ".cb5a", fgf)));
  return add(head, tail);
}

// ---------------------------------------------------------------------------
// K-NeXt: shallow conv, backbone, CB5, global residual of the input k-space.

template <class T>
void init_k_next(ParamStore<T>& store, const std::string& name, const ModelConfig& cfg, std::size_t in_channels,
                 Rng& rng, const InitOptions& opt = {}) {
  const std::size_t g0 = cfg.kspace.G0;
  init_conv(store, name + ".sfe", in_channels, g0, 3, rng);
  init_backbone(store, name + ".bb", cfg.kspace, rng, opt);
  init_conv(store, name + ".cb5a", g0, g0, 3, rng);
  init_conv(store, name + ".cb5b", g0, kGridChannels, 3, rng, opt.zero_output_tails);
}

/// `k_in` is 2 x H x W, or 4 x H x W with the reference k-space stacked behind it.
template <class T>
Var<T> k_next_forward(const Net<T>& net, const std::string& name, const ModelConfig& cfg, Var<T> k_in) {
  if (k_in.shape().size() != 3 || (k_in.dim(0) != 2 && k_in.dim(0) != 4)) {
    throw ShapeError("k_next: expected 2 or 4 x H x W, got " + shape_str(k_in.shape()));
  }
  Var<T> f = conv(net, name + ".sfe", k_in);
  f = backbone_forward(net, name + ".bb", f, cfg.kspace);
  Var<T> out = conv(net, name + ".cb5b", relu(conv(net, name + ".cb5a", f)));
  Var<T> skip = k_in.dim(0) == kGridChannels ? k_in : slice_leading(k_in, 0, kGridChannels);
  return add(out, skip);
}

// ---------------------------------------------------------------------------
// Whole model.

inline std::string image_net_name(const ModelConfig& cfg, std::size_t block) {
  return cfg.share_recurrent_params ? "img" : "img.r" + std::to_string(block);
}
inline std::string kspace_net_name(const ModelConfig& cfg, std::size_t block) {
  return cfg.share_recurrent_params ? "ksp" : "ksp.r" + std::to_string(block);
}

template <class T>
void init_model(ParamStore<T>& store, const ModelConfig& cfg, std::uint64_t seed, const InitOptions& opt = {}) {
  cfg.validate();
  Rng rng(seed);
  const std::size_t copies = cfg.share_recurrent_params ? 1 : cfg.n_recurrent;
  const std::size_t k_in = kspace_takes_reference(cfg.layout) ? 2 * kGridChannels : kGridChannels;
  for (std::size_t i = 0; i < copies; ++i) init_i_uninext(store, image_net_name(cfg, i), cfg, rng, opt);
  for (std::size_t i = 0; i < copies; ++i) init_k_next(store, kspace_net_name(cfg, i), cfg, k_in, rng, opt);
}

template <class T>
ParamStore<T> make_model(const ModelConfig& cfg, std::uint64_t seed, const InitOptions& opt = {}) {
  ParamStore<T> store;
  init_model(store, cfg, seed, opt);
  return store;
}

/// Per-block outputs entering the loss. For the default K_UniI layout these are
/// K_K^i (data-consistent k-space network output) and K_dc^i (block output);
/// other layouts report their first and second subnetwork in the same slots.
template <class T>
struct BlockIntermediates {
  Var<T> k_stage;
  Var<T> k_block;
};

template <class T>
struct RecurrentOutput {
  Var<T> i_rec;
  std::vector<BlockIntermediates<T>> blocks;
};

template <class T>
RecurrentOutput<T> recurrent_forward(const Net<T>& net, const ModelConfig& cfg, const Tensor<T>& k_sub,
                                     const SamplingMask& mask, const Tensor<T>& i_ref, int ac) {
  check_mask_shape(k_sub.shape(), mask, "recurrent_forward");
  if (i_ref.shape() != k_sub.shape()) throw ShapeError("recurrent_forward: reference shape differs from k-space");
  Tape<T>& tape = net.tape;
  // the reference is only ever read when it is declared available
  const Tensor<T> ref = ac != 0 ? i_ref : Tensor<T>(i_ref.shape());
  Var<T> ref_img = tape.constant(ref);
  std::optional<Var<T>> ref_k;
  if (kspace_takes_reference(cfg.layout)) ref_k = tape.constant(fft2c(ref));

  auto k_net = [&](std::size_t i, Var<T> k) {
    Var<T> in = ref_k ? concat<T>({k, *ref_k}) : k;
    return data_consistency(k_next_forward(net, kspace_net_name(cfg, i), cfg, in), k_sub, mask);
  };
  auto i_net = [&](std::size_t i, Var<T> k) {
    Var<T> img = i_uninext_forward(net, image_net_name(cfg, i), cfg, ifft2c(k), ref_img, ac);
    return data_consistency(fft2c(img), k_sub, mask);
  };

  RecurrentOutput<T> out;
  Var<T> k = tape.constant(k_sub);
  for (std::size_t i = 0; i < cfg.n_recurrent; ++i) {
    const std::size_t p = cfg.share_recurrent_params ? 0 : i;
    BlockIntermediates<T> b;
    if (image_first(cfg.layout)) {
      b.k_stage = i_net(p, k);
      b.k_block = k_net(p, b.k_stage);
    } else {
      b.k_stage = k_net(p, k);
      b.k_block = i_net(p, b.k_stage);
    }
    k = b.k_block;
    out.blocks.push_back(b);
  }
  out.i_rec = ifft2c(k);
  return out;
}

// ---------------------------------------------------------------------------
// Parameter accounting.

struct ParamBreakdown {
  std::vector<std::pair<std::string, std::size_t>> parts;  // submodule -> scalars, in build order
  std::size_t image_total = 0;
  std::size_t kspace_total = 0;
  std::size_t total() const { return image_total + kspace_total; }
};

/// Submodule key of a parameter name: "img.bb", "ksp.r1.sfe", ...
inline std::string submodule_of(const std::string& param) {
  std::vector<std::string> seg;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= param.size(); ++i) {
    if (i == param.size() || param[i] == '.') {
      seg.push_back(param.substr(start, i - start));
      start = i + 1;
    }
  }
  const bool per_block = seg.size() > 2 && seg[1].size() > 1 && seg[1][0] == 'r' &&
                         seg[1].find_first_not_of("0123456789", 1) == std::string::npos;
  const std::size_t keep = std::min(seg.size(), per_block ? std::size_t{3} : std::size_t{2});
  std::string key = seg[0];
  for (std::size_t i = 1; i < keep; ++i) key += "." + seg[i];
  return key;
}

template <class T>
ParamBreakdown breakdown(const ParamStore<T>& store) {
  ParamBreakdown out;
  std::map<std::string, std::size_t> slot;
  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store.names()[i];
    const std::size_t n = store.value_at(i).size();
    const std::string key = submodule_of(name);
    auto it = slot.find(key);
    if (it == slot.end()) {
      slot.emplace(key, out.parts.size());
      out.parts.emplace_back(key, n);
    } else {
      out.parts[it->second].second += n;
    }
    (name.rfind("img", 0) == 0 ? out.image_total : out.kspace_total) += n;
  }
  return out;
}

/// Exact learnable-scalar count of the model the builders create.
inline ParamBreakdown count_params(const ModelConfig& cfg) {
  return breakdown(make_model<float>(cfg, 0));
}

}  // namespace dudo
