// SPDX-License-Identifier: Apache-2.0
//
// Backbone hyperparameters.

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "dudo/common.hpp"

namespace dudo {

/// Block family used along the backbone chain. IHk replaces the last k DRDBs
/// of a DRDN chain by residual Swin blocks.
enum class BlockVariant { kDRDN, kRSTB, kXBB, kIH1, kIH2, kIH3 };

inline const std::vector<BlockVariant>& all_block_variants() {
  static const std::vector<BlockVariant> v{BlockVariant::kDRDN, BlockVariant::kRSTB, BlockVariant::kXBB,
                                           BlockVariant::kIH1,  BlockVariant::kIH2,  BlockVariant::kIH3};
  return v;
}

inline std::string to_string(BlockVariant v) {
  switch (v) {
    case BlockVariant::kDRDN: return "DRDN";
    case BlockVariant::kRSTB: return "RSTB";
    case BlockVariant::kXBB: return "XBB";
    case BlockVariant::kIH1: return "IH1";
    case BlockVariant::kIH2: return "IH2";
    case BlockVariant::kIH3: return "IH3";
  }
  return "?";
}

inline BlockVariant parse_block_variant(const std::string& s) {
  for (BlockVariant v : all_block_variants())
    if (to_string(v) == s) return v;
  throw ConfigError("unknown backbone variant '" + s + "' (expected DRDN, RSTB, XBB, IH1, IH2 or IH3)");
}

enum class BlockKind { kDRDB, kRSTB, kXBB };

inline std::string to_string(BlockKind k) {
  switch (k) {
    case BlockKind::kDRDB: return "DRDB";
    case BlockKind::kRSTB: return "RSTB";
    case BlockKind::kXBB: return "XBB";
  }
  return "?";
}

struct XBBConfig {
  std::size_t G0 = 64;
  std::size_t G = 48;
  std::size_t D = 4;
  std::size_t C = 5;
  double alpha = 0.5;
  std::size_t window = 16;
  std::size_t heads = 4;
  BlockVariant variant = BlockVariant::kXBB;

  /// Width of the ViT branch, floor(alpha * G0).
  std::size_t vit_channels() const {
    return static_cast<std::size_t>(std::floor(alpha * static_cast<double>(G0) + 1e-9));
  }

  void validate(const std::string& where = "backbone") const {
    auto fail = [&](const std::string& msg) { throw ConfigError(where + ": " + msg); };
    if (G0 < 1 || G < 1 || D < 1 || C < 1) fail("G0, G, D and C must all be >= 1");
    if (!(alpha > 0.0 && alpha <= 1.0)) fail("alpha must lie in (0, 1]");
    if (window < 1) fail("window must be >= 1");
    if (heads < 1) fail("heads must be >= 1");
    const bool has_xbb = variant == BlockVariant::kXBB;
    const bool has_rstb = variant != BlockVariant::kDRDN && variant != BlockVariant::kXBB;
    if (has_xbb) {
      const std::size_t a = vit_channels();
      if (a < heads || a % heads != 0) {
        fail("floor(alpha*G0) = " + std::to_string(a) + " must be >= heads and divisible by heads (" +
             std::to_string(heads) + ")");
      }
    }
    if (has_rstb && G0 % heads != 0) fail("G0 must be divisible by heads for RSTB blocks");
    const std::size_t k = variant == BlockVariant::kIH1 ? 1 : variant == BlockVariant::kIH2 ? 2
                          : variant == BlockVariant::kIH3 ? 3 : 0;
    if (k > D) fail(to_string(variant) + " needs D >= " + std::to_string(k));
  }

  friend bool operator==(const XBBConfig&, const XBBConfig&) = default;
};

/// Per-position block kinds of a backbone chain.
inline std::vector<BlockKind> block_types(const XBBConfig& cfg) {
  std::vector<BlockKind> kinds(cfg.D);
  std::size_t rstb_tail = 0;
  switch (cfg.variant) {
    case BlockVariant::kDRDN: break;
    case BlockVariant::kXBB:
      for (auto& k : kinds) k = BlockKind::kXBB;
      return kinds;
    case BlockVariant::kRSTB: rstb_tail = cfg.D; break;
    case BlockVariant::kIH1: rstb_tail = 1; break;
    case BlockVariant::kIH2: rstb_tail = 2; break;
    case BlockVariant::kIH3: rstb_tail = 3; break;
  }
  if (rstb_tail > cfg.D) throw ConfigError(to_string(cfg.variant) + " needs D >= " + std::to_string(rstb_tail));
  for (std::size_t j = 0; j < cfg.D; ++j) kinds[j] = j + rstb_tail >= cfg.D ? BlockKind::kRSTB : BlockKind::kDRDB;
  return kinds;
}

/// Dilation of layer i of a DRDB: 1, 2, 4, ...
inline std::size_t drdb_dilation(std::size_t layer) { return std::size_t{1} << layer; }

}  // namespace dudo
