// SPDX-License-Identifier: Apache-2.0
//
// Parameter builders and thin forward wrappers shared by every block.
//
// Parameters are addressed by dotted names; a block registers everything
// under its own prefix, e.g. "img.bb.b0.drdb.l1.w".

#pragma once

#include <cmath>
#include <string>

#include "dudo/diffcore/ops.hpp"

namespace dudo {

/// Forward context: the tape being recorded and the store parameters come from.
template <class T>
struct Net {
  Tape<T>& tape;
  ParamStore<T>& store;

  Var<T> p(const std::string& name) const { return tape.param(store, name); }
};

struct InitOptions {
  /// Zero the last projection of every residual block (identity at init).
  bool zero_block_tails = false;
  /// Zero the output layers of the image and k-space networks.
  bool zero_output_tails = true;
};

inline std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

/// He-normal weight, zero bias.
template <class T>
void init_conv(ParamStore<T>& store, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
               Rng& rng, bool zero = false) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  store.add(name + ".w", zero ? Tensor<T>(Shape{cout, cin, k, k}) : random_normal<T>({cout, cin, k, k}, rng, stddev));
  store.add(name + ".b", Tensor<T>(Shape{cout}));
}

template <class T>
void init_dense(ParamStore<T>& store, const std::string& name, std::size_t din, std::size_t dout, Rng& rng,
                bool zero = false) {
  const double stddev = std::sqrt(1.0 / static_cast<double>(din));
  store.add(name + ".w", zero ? Tensor<T>(Shape{din, dout}) : random_normal<T>({din, dout}, rng, stddev));
  store.add(name + ".b", Tensor<T>(Shape{dout}));
}

template <class T>
void init_layernorm(ParamStore<T>& store, const std::string& name, std::size_t c) {
  store.add(name + ".g", Tensor<T>(Shape{c}, T(1)));
  store.add(name + ".b", Tensor<T>(Shape{c}));
}

template <class T>
Var<T> conv(const Net<T>& net, const std::string& name, Var<T> x, std::size_t dilation = 1) {
  return conv2d(x, net.p(name + ".w"), std::optional<Var<T>>(net.p(name + ".b")), dilation);
}

template <class T>
Var<T> linear(const Net<T>& net, const std::string& name, Var<T> x) {
  return dense(x, net.p(name + ".w"), std::optional<Var<T>>(net.p(name + ".b")));
}

template <class T>
Var<T> norm(const Net<T>& net, const std::string& name, Var<T> x) {
  return layernorm(x, net.p(name + ".g"), net.p(name + ".b"));
}

inline std::size_t conv_param_count(std::size_t cin, std::size_t cout, std::size_t k) {
  return cout * cin * k * k + cout;
}

inline std::size_t dense_param_count(std::size_t din, std::size_t dout) { return din * dout + dout; }

}  // namespace dudo
