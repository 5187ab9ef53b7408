// SPDX-License-Identifier: Apache-2.0
//
// Dual-domain training loss summed over recurrent blocks.

#pragma once

#include <string>
#include <vector>

#include "dudo/uninext/model.hpp"

namespace dudo {

/// How each domain's discrepancy is measured. kL2 is the plain Euclidean norm.
enum class LossKind { kL2, kSquaredL2, kMse };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::kL2: return "l2";
    case LossKind::kSquaredL2: return "squared_l2";
    case LossKind::kMse: return "mse";
  }
  return "?";
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "l2") return LossKind::kL2;
  if (s == "squared_l2") return LossKind::kSquaredL2;
  if (s == "mse") return LossKind::kMse;
  throw ConfigError("unknown loss '" + s + "' (expected l2, squared_l2 or mse)");
}

template <class T>
Var<T> discrepancy(Var<T> diff, LossKind kind) {
  switch (kind) {
    case LossKind::kL2: return l2_norm(diff);
    case LossKind::kSquaredL2: return sum_squares(diff);
    case LossKind::kMse: return scale(sum_squares(diff), T(1) / static_cast<T>(diff.value().size()));
  }
  throw ConfigError("unknown loss kind");
}

/// sum_i ||K_GT - K_stage^i|| + ||I_GT - ifft(K_block^i)||.
template <class T>
Var<T> dudo_loss(const std::vector<BlockIntermediates<T>>& blocks, const Tensor<T>& k_gt, const Tensor<T>& i_gt,
                 std::size_t n_recurrent, LossKind kind = LossKind::kL2) {
  if (blocks.size() != n_recurrent) {
    throw ShapeError("dudo_loss: got " + std::to_string(blocks.size()) + " block outputs for N = " +
                     std::to_string(n_recurrent));
  }
  if (blocks.empty()) throw ShapeError("dudo_loss: no block outputs");
  Tape<T>& tape = blocks.front().k_stage.tape();
  Var<T> kg = tape.constant(k_gt);
  Var<T> ig = tape.constant(i_gt);
  std::optional<Var<T>> total;
  for (const auto& b : blocks) {
    Var<T> term = add(discrepancy(sub(kg, b.k_stage), kind), discrepancy(sub(ig, ifft2c(b.k_block)), kind));
    total = total ? add(*total, term) : term;
  }
  return *total;
}

}  // namespace dudo
