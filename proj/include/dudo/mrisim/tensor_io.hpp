// SPDX-License-Identifier: Apache-2.0
//
// Tensor files:
//   "DDUT" | u8 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 ndim | u8 0 |
//   ndim x u32 LE shape | row-major LE payload
// and 8-bit binary PGM previews of magnitude images.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "dudo/diffcore/tensor.hpp"

namespace dudo {

inline constexpr char kTensorMagic[4] = {'D', 'D', 'U', 'T'};
inline constexpr std::uint8_t kTensorVersion = 1;

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1 };

template <class T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::kF32 : DType::kF64;
}

using AnyTensor = std::variant<Tensor<float>, Tensor<double>>;

namespace detail {

template <class U>
void put_le(std::vector<char>& buf, U v) {
  static_assert(std::is_unsigned_v<U>);
  for (std::size_t i = 0; i < sizeof(U); ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

template <class U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  return std::vector<char>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace detail

template <class T>
std::vector<char> encode_tensor(const Tensor<T>& t) {
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  if (t.rank() > 255) throw ShapeError("tensor rank exceeds the file format limit");
  std::vector<char> buf(kTensorMagic, kTensorMagic + 4);
  buf.push_back(static_cast<char>(kTensorVersion));
  buf.push_back(static_cast<char>(dtype_of<T>()));
  buf.push_back(static_cast<char>(t.rank()));
  buf.push_back(0);
  for (std::size_t d : t.shape()) {
    if (d > UINT32_MAX) throw ShapeError("tensor dimension exceeds u32");
    detail::put_le(buf, static_cast<std::uint32_t>(d));
  }
  buf.reserve(buf.size() + t.size() * sizeof(T));
  for (T v : t.data()) detail::put_le(buf, std::bit_cast<Bits>(v));
  return buf;
}

inline AnyTensor decode_tensor(const std::vector<char>& bytes, const std::string& origin = "<memory>") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 8 || std::memcmp(p, kTensorMagic, 4) != 0) throw IoError(origin + ": bad tensor magic");
  if (p[4] != kTensorVersion) throw IoError(origin + ": unsupported tensor version " + std::to_string(p[4]));
  if (p[5] > 1) throw IoError(origin + ": unknown dtype code " + std::to_string(p[5]));
  const auto dtype = static_cast<DType>(p[5]);
  const std::size_t ndim = p[6];
  if (ndim == 0) throw IoError(origin + ": tensor has zero dimensions");
  if (n < 8 + 4 * ndim) throw IoError(origin + ": truncated shape header");
  Shape shape(ndim);
  for (std::size_t i = 0; i < ndim; ++i) {
    shape[i] = detail::get_le<std::uint32_t>(p + 8 + 4 * i);
    if (shape[i] == 0) throw IoError(origin + ": zero-sized dimension");
  }
  const std::size_t count = shape_size(shape);
  const std::size_t width = dtype == DType::kF32 ? 4 : 8;
  const std::size_t offset = 8 + 4 * ndim;
  if (n - offset != count * width) {
    throw IoError(origin + ": payload is " + std::to_string(n - offset) + " bytes, shape " + shape_str(shape) +
                  " needs " + std::to_string(count * width));
  }
  if (dtype == DType::kF32) {
    std::vector<float> data(count);
    for (std::size_t i = 0; i < count; ++i)
      data[i] = std::bit_cast<float>(detail::get_le<std::uint32_t>(p + offset + 4 * i));
    return Tensor<float>(shape, std::move(data));
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i)
    data[i] = std::bit_cast<double>(detail::get_le<std::uint64_t>(p + offset + 8 * i));
  return Tensor<double>(shape, std::move(data));
}

template <class T>
void save_tensor(const std::filesystem::path& path, const Tensor<T>& t) {
  detail::write_file(path, encode_tensor(t));
}

inline AnyTensor load_tensor(const std::filesystem::path& path) {
  return decode_tensor(detail::read_file(path), path.string());
}

/// Loads and converts to the requested precision.
template <class T>
Tensor<T> load_tensor_as(const std::filesystem::path& path) {
  return std::visit([](const auto& t) { return t.template cast<T>(); }, load_tensor(path));
}

/// Magnitude of a 2 x H x W grid (or values of an H x W grid), clipped to [0, 1], as P5.
template <class T>
void save_pgm(const std::filesystem::path& path, const Tensor<T>& grid) {
  std::size_t h, w;
  bool complex_grid;
  if (grid.rank() == 3 && grid.dim(0) == 2) {
    h = grid.dim(1), w = grid.dim(2), complex_grid = true;
  } else if (grid.rank() == 2) {
    h = grid.dim(0), w = grid.dim(1), complex_grid = false;
  } else {
    throw ShapeError("save_pgm: expected 2 x H x W or H x W, got " + shape_str(grid.shape()));
  }
  const std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  for (std::size_t i = 0; i < h * w; ++i) {
    double v = static_cast<double>(grid[i]);
    if (complex_grid) v = std::hypot(v, static_cast<double>(grid[h * w + i]));
    v = std::clamp(v, 0.0, 1.0);
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  detail::write_file(path, bytes);
}

}  // namespace dudo
