// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace milpath {

/// Dense row-major array of doubles with an explicit shape.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> values;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0)
      : shape(std::move(dims)),
        values(std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>()),
               fill) {}

  std::size_t size() const { return values.size(); }
  std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
  std::size_t cols() const { return shape.size() < 2 ? 1 : size() / shape[0]; }

  double &operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double &operator()(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols(), cols()}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols(), cols()}; }

  void fill(double v) { std::fill(values.begin(), values.end(), v); }
  Tensor zeros_like() const { return Tensor(shape); }

  bool operator==(const Tensor &) const = default;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// "MILW" container: magic, u32 version, then per tensor: u32 name length,
/// name bytes, u32 rank, u64 dims, f64 values; all little-endian. Tensors run
/// to end of file.
void write_tensors(const std::filesystem::path &path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_tensors(const std::filesystem::path &path);

std::vector<std::uint8_t> encode_tensors(std::span<const NamedTensor> tensors);
std::vector<NamedTensor> decode_tensors(std::span<const std::uint8_t> bytes);

inline constexpr std::uint32_t kTensorFormatVersion = 1;

}  // namespace milpath
