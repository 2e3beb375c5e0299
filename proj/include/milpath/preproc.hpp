// SPDX-License-Identifier: Apache-2.0
//
// Slide preprocessing: tissue masking, grid tiling, tissue filtering,
// blue-ratio scoring, Reinhard color normalization and downsampling.
#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "milpath/image.hpp"

namespace milpath {

enum class Scale { Low, High };

const char *to_string(Scale s);

struct TileGrid {
  int tile_size = 0;
  int stride = 0;
  int slide_width = 0;
  int slide_height = 0;
  /// Distinct positions per axis; origins is their row-major product.
  std::vector<int> xs;
  std::vector<int> ys;
  std::vector<std::array<int, 2>> origins;

  std::size_t size() const { return origins.size(); }
};

/// Tile address. (x, y) are always reference (HIGH) magnification pixels, so
/// the LOW and HIGH views of one region share coordinates.
struct TileRef {
  std::string slide_id;
  int x = 0;
  int y = 0;
  Scale scale = Scale::High;
  double tissue_fraction = 0.0;

  bool operator==(const TileRef &) const = default;
};

/// Per-channel statistics in l-alpha-beta opponent space.
struct ColorStats {
  std::array<double, 3> mean{};
  std::array<double, 3> std{1.0, 1.0, 1.0};
};

struct MaskParams {
  double hue_lo = 0.60;
  double hue_hi = 0.98;
  int morph_radius = 2;
};

/// HSV hue in [0, 1); 0 for achromatic pixels.
double hue_of(std::uint8_t r, std::uint8_t g, std::uint8_t b);

/// Hue-band threshold followed by one closing and one opening with a
/// (2r+1)^2 square element. Windows are clipped at the image border.
TissueMask tissue_mask(const RgbImage &image, double hue_lo, double hue_hi, int morph_radius);
inline TissueMask tissue_mask(const RgbImage &image, const MaskParams &p) {
  return tissue_mask(image, p.hue_lo, p.hue_hi, p.morph_radius);
}

TissueMask dilate(const TissueMask &mask, int radius);
TissueMask erode(const TissueMask &mask, int radius);

/// stride = round(tile_size * (1 - overlap)); positions that would overflow
/// the slide are dropped.
TileGrid extract_tile_grid(int slide_w, int slide_h, int tile_size, double overlap_fraction);

/// Fraction of mask pixels set inside the tile at (x, y).
double tissue_fraction(const TissueMask &mask, int x, int y, int tile_size);

/// Keeps grid tiles with tissue_fraction >= min_tissue, in grid order.
std::vector<TileRef> filter_tiles(const TileGrid &grid, const TissueMask &mask, double min_tissue,
                                  const std::string &slide_id = {});

/// Per-pixel BR = (100 B / (1 + R + G)) * (256 / (1 + R + G + B)).
double blue_ratio(std::uint8_t r, std::uint8_t g, std::uint8_t b);
RealMap blue_ratio(const RgbImage &image);
double mean_blue_ratio(const RgbImage &tile);

/// Top ceil(n * p / 100) tiles by mean blue ratio, descending, ties by input order.
std::vector<TileRef> rank_by_blue_ratio(std::span<const TileRef> tiles,
                                        std::span<const RgbImage> images, double top_percentile);
/// Indices of the top `count` tiles by mean blue ratio (same ordering rule).
std::vector<std::size_t> top_blue_ratio_indices(std::span<const RgbImage> images,
                                                std::size_t count);

std::size_t percentile_count(std::size_t n, double top_percentile);

/// l-alpha-beta conversion (RGB -> LMS -> log10 -> decorrelated axes).
std::array<double, 3> rgb_to_lab(double r, double g, double b);
std::array<double, 3> lab_to_rgb(double l, double a, double b);

ColorStats color_stats(const RgbImage &image);
RgbImage reinhard_normalize(const RgbImage &image, const ColorStats &reference);
/// Same transfer with the source statistics supplied, e.g. from tissue pixels only.
RgbImage reinhard_normalize(const RgbImage &image, const ColorStats &source,
                            const ColorStats &reference);

/// Block-mean downsampling, rounding half up.
RgbImage downsample(const RgbImage &image, int factor);

}  // namespace milpath
