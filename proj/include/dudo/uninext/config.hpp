// SPDX-License-Identifier: Apache-2.0
//
// Whole-model hyperparameters and the ablation selectors.

#pragma once

#include <string>
#include <vector>

#include "dudo/backbone/config.hpp"

namespace dudo {

enum class Fusion { kMax, kHeMIS, kAdaF2C, kAdaC2F };
enum class Encoder { kShared, kDistinct, kPaSS };
enum class Layout { kK_UniI, kUniI_K, kUniK_UniI, kUniI_UniK };

inline const std::vector<Fusion>& all_fusions() {
  static const std::vector<Fusion> v{Fusion::kMax, Fusion::kHeMIS, Fusion::kAdaF2C, Fusion::kAdaC2F};
  return v;
}
inline const std::vector<Encoder>& all_encoders() {
  static const std::vector<Encoder> v{Encoder::kShared, Encoder::kDistinct, Encoder::kPaSS};
  return v;
}
inline const std::vector<Layout>& all_layouts() {
  static const std::vector<Layout> v{Layout::kUniI_UniK, Layout::kUniK_UniI, Layout::kUniI_K, Layout::kK_UniI};
  return v;
}

inline std::string to_string(Fusion f) {
  switch (f) {
    case Fusion::kMax: return "Max";
    case Fusion::kHeMIS: return "HeMIS";
    case Fusion::kAdaF2C: return "AdaF2C";
    case Fusion::kAdaC2F: return "AdaC2F";
  }
  return "?";
}
inline std::string to_string(Encoder e) {
  switch (e) {
    case Encoder::kShared: return "Shared";
    case Encoder::kDistinct: return "Distinct";
    case Encoder::kPaSS: return "PaSS";
  }
  return "?";
}
inline std::string to_string(Layout l) {
  switch (l) {
    case Layout::kK_UniI: return "K_UniI";
    case Layout::kUniI_K: return "UniI_K";
    case Layout::kUniK_UniI: return "UniK_UniI";
    case Layout::kUniI_UniK: return "UniI_UniK";
  }
  return "?";
}

template <class E>
E parse_enum(const std::string& s, const std::vector<E>& all, const char* what) {
  std::string options;
  for (E e : all) {
    if (to_string(e) == s) return e;
    options += (options.empty() ? "" : ", ") + to_string(e);
  }
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected " + options + ")");
}

inline Fusion parse_fusion(const std::string& s) { return parse_enum(s, all_fusions(), "fusion"); }
inline Encoder parse_encoder(const std::string& s) { return parse_enum(s, all_encoders(), "encoder"); }
inline Layout parse_layout(const std::string& s) { return parse_enum(s, all_layouts(), "layout"); }

/// True when the k-space network also sees the reference.
inline bool kspace_takes_reference(Layout l) { return l == Layout::kUniK_UniI || l == Layout::kUniI_UniK; }
/// True when the image network runs before the k-space network inside a block.
inline bool image_first(Layout l) { return l == Layout::kUniI_K || l == Layout::kUniI_UniK; }

struct ModelConfig {
  std::size_t n_recurrent = 2;
  XBBConfig image{64, 48, 4, 5, 0.5, 16, 4, BlockVariant::kXBB};
  XBBConfig kspace{64, 48, 3, 3, 0.5, 16, 4, BlockVariant::kXBB};
  std::vector<std::size_t> c2f_windows{16, 8};
  std::size_t c2f_heads = 4;
  Fusion fusion = Fusion::kAdaC2F;
  Encoder encoder = Encoder::kPaSS;
  Layout layout = Layout::kK_UniI;
  bool share_recurrent_params = true;
  /// 3x3 conv + relu layers inside each shallow-encoder block CB1-CB4.
  std::size_t cb_depth = 2;

  /// C2F windows in application order; AdaF2C runs them fine-to-coarse.
  std::vector<std::size_t> fusion_windows() const {
    if (fusion == Fusion::kAdaF2C) return {c2f_windows.rbegin(), c2f_windows.rend()};
    return c2f_windows;
  }

  void validate() const {
    if (n_recurrent < 1) throw ConfigError("model.n_recurrent must be >= 1");
    image.validate("model.image");
    kspace.validate("model.kspace");
    if (c2f_windows.size() != 2 || c2f_windows[0] < 1 || c2f_windows[1] < 1) {
      throw ConfigError("model.c2f_windows must hold two positive window sizes");
    }
    if (c2f_heads < 1 || image.G0 % c2f_heads != 0) {
      throw ConfigError("model.c2f_heads must divide image G0 (" + std::to_string(image.G0) + ")");
    }
    if (image.G0 < 4) throw ConfigError("model.image.G0 must be >= 4 for the SE reduction");
    if (cb_depth < 1) throw ConfigError("model.cb_depth must be >= 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

}  // namespace dudo
