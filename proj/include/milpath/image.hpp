// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace milpath {

/// Dense row-major RGB raster. data holds width * height byte triplets.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h, std::uint8_t r = 0, std::uint8_t g = 0, std::uint8_t b = 0);

  bool empty() const { return width <= 0 || height <= 0; }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }

  std::uint8_t &at(int x, int y, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    auto *p = &data[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  /// Copy of the w x h window whose top-left corner is (x, y).
  RgbImage crop(int x, int y, int w, int h) const;

  bool operator==(const RgbImage &) const = default;
};

/// One boolean per pixel, true = tissue.
struct TissueMask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  TissueMask() = default;
  TissueMask(int w, int h, bool value = false)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, value ? 1 : 0) {}

  bool at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { bits[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  std::size_t count() const;

  bool operator==(const TissueMask &) const = default;
};

/// Row-major real-valued H x W map (blue ratio, heat maps).
struct RealMap {
  int width = 0;
  int height = 0;
  std::vector<double> values;

  double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

void write_png(const std::filesystem::path &path, const RgbImage &image);
/// Mask written as a single-channel 0/255 PNG.
void write_png(const std::filesystem::path &path, const TissueMask &mask);
RgbImage read_png(const std::filesystem::path &path);

}  // namespace milpath
