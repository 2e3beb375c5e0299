// SPDX-License-Identifier: Apache-2.0
#include "milpath/preproc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "milpath/kernels.hpp"

namespace milpath {

const char *to_string(Scale s) { return s == Scale::Low ? "LOW" : "HIGH"; }

double hue_of(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const double r = r8, g = g8, b = b8;
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double delta = mx - mn;
  if (delta <= 0.0) return 0.0;
  double h;
  if (mx == r)
    h = (g - b) / delta;
  else if (mx == g)
    h = 2.0 + (b - r) / delta;
  else
    h = 4.0 + (r - g) / delta;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
  return h;
}

TissueMask dilate(const TissueMask &mask, int radius) {
  return parallel::morph(mask, radius, true);
}

TissueMask erode(const TissueMask &mask, int radius) {
  return parallel::morph(mask, radius, false);
}

TissueMask tissue_mask(const RgbImage &image, double hue_lo, double hue_hi, int morph_radius) {
  if (image.empty()) throw std::invalid_argument("empty input");
  if (!(hue_lo >= 0.0 && hue_lo < hue_hi && hue_hi <= 1.0))
    throw std::invalid_argument("hue band must satisfy 0 <= lo < hi <= 1");
  if (morph_radius < 0) throw std::invalid_argument("morph radius must be >= 0");

  TissueMask mask(image.width, image.height);
  const auto n = static_cast<std::ptrdiff_t>(image.pixel_count());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto *p = &image.data[static_cast<std::size_t>(i) * 3];
    const double h = hue_of(p[0], p[1], p[2]);
    mask.bits[i] = (h >= hue_lo && h <= hue_hi) ? 1 : 0;
  }
  if (morph_radius == 0) return mask;

  // closing fills holes, opening removes specks
  mask = erode(dilate(mask, morph_radius), morph_radius);
  mask = dilate(erode(mask, morph_radius), morph_radius);
  return mask;
}

TileGrid extract_tile_grid(int slide_w, int slide_h, int tile_size, double overlap_fraction) {
  if (tile_size < 1) throw std::invalid_argument("tile size must be >= 1");
  if (!(overlap_fraction >= 0.0 && overlap_fraction < 1.0))
    throw std::invalid_argument("overlap fraction must be in [0, 1)");
  if (tile_size > std::min(slide_w, slide_h)) throw std::invalid_argument("tile exceeds slide");

  TileGrid grid;
  grid.tile_size = tile_size;
  grid.slide_width = slide_w;
  grid.slide_height = slide_h;
  grid.stride = std::max(1, static_cast<int>(std::lround(tile_size * (1.0 - overlap_fraction))));
  for (int x = 0; x + tile_size <= slide_w; x += grid.stride) grid.xs.push_back(x);
  for (int y = 0; y + tile_size <= slide_h; y += grid.stride) grid.ys.push_back(y);
  grid.origins.reserve(grid.xs.size() * grid.ys.size());
  for (int y : grid.ys)
    for (int x : grid.xs) grid.origins.push_back({x, y});
  return grid;
}

double tissue_fraction(const TissueMask &mask, int x, int y, int tile_size) {
  std::size_t count = 0;
  for (int row = y; row < y + tile_size; ++row) {
    const auto *bits = &mask.bits[static_cast<std::size_t>(row) * mask.width + x];
    count += static_cast<std::size_t>(std::count(bits, bits + tile_size, std::uint8_t{1}));
  }
  return static_cast<double>(count) / (static_cast<double>(tile_size) * tile_size);
}

std::vector<TileRef> filter_tiles(const TileGrid &grid, const TissueMask &mask, double min_tissue,
                                  const std::string &slide_id) {
  if (!(min_tissue >= 0.0 && min_tissue <= 1.0))
    throw std::invalid_argument("min_tissue must be in [0, 1]");
  if (mask.width != grid.slide_width || mask.height != grid.slide_height)
    throw std::invalid_argument("mask and grid dimension mismatch");

  std::vector<TileRef> kept;
  for (const auto &[x, y] : grid.origins) {
    const double frac = tissue_fraction(mask, x, y, grid.tile_size);
    if (frac >= min_tissue) kept.push_back({slide_id, x, y, Scale::High, frac});
  }
  return kept;
}

double blue_ratio(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  const double r = r8, g = g8, b = b8;
  return (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b));
}

RealMap blue_ratio(const RgbImage &image) { return parallel::blue_ratio_map(image); }

double mean_blue_ratio(const RgbImage &tile) {
  const RgbImage one[] = {tile};
  return serial::tile_mean_blue_ratio(one).front();
}

std::size_t percentile_count(std::size_t n, double top_percentile) {
  if (!(top_percentile > 0.0 && top_percentile <= 100.0))
    throw std::invalid_argument("percentile must be in (0, 100]");
  // guard against 3 * 100 / 100 landing a hair above an integer
  const double raw = static_cast<double>(n) * top_percentile / 100.0;
  const auto count = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  return std::min(n, count);
}

std::vector<std::size_t> top_blue_ratio_indices(std::span<const RgbImage> images,
                                                std::size_t count) {
  const auto scores = parallel::tile_mean_blue_ratio(images);
  std::vector<std::size_t> order(images.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(std::min(count, order.size()));
  return order;
}

std::vector<TileRef> rank_by_blue_ratio(std::span<const TileRef> tiles,
                                        std::span<const RgbImage> images, double top_percentile) {
  if (tiles.size() != images.size())
    throw std::invalid_argument("tile and image counts differ");
  if (tiles.empty()) return {};
  const auto idx = top_blue_ratio_indices(images, percentile_count(tiles.size(), top_percentile));
  std::vector<TileRef> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(tiles[i]);
  return out;
}

namespace {

constexpr double kRgbToLms[3][3] = {
    {0.3811, 0.5783, 0.0402},
    {0.1967, 0.7244, 0.0782},
    {0.0241, 0.1288, 0.8444},
};

struct Mat3 {
  double m[3][3];
};

Mat3 invert(const double (&a)[3][3]) {
  const double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                     a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                     a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
  Mat3 inv{};
  inv.m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det;
  inv.m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
  inv.m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
  inv.m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det;
  inv.m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
  inv.m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
  inv.m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det;
  inv.m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
  inv.m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
  return inv;
}

const Mat3 &lms_to_rgb() {
  static const Mat3 inv = invert(kRgbToLms);
  return inv;
}

// LMS floor in byte units; keeps black pixels finite in log space.
constexpr double kLmsFloor = 1.0;

const double kInvSqrt3 = 1.0 / std::sqrt(3.0);
const double kInvSqrt6 = 1.0 / std::sqrt(6.0);
const double kInvSqrt2 = 1.0 / std::sqrt(2.0);

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

}  // namespace

std::array<double, 3> rgb_to_lab(double r, double g, double b) {
  double lms[3];
  for (int i = 0; i < 3; ++i) {
    const double v = kRgbToLms[i][0] * r + kRgbToLms[i][1] * g + kRgbToLms[i][2] * b;
    lms[i] = std::log10(std::max(v, kLmsFloor));
  }
  return {kInvSqrt3 * (lms[0] + lms[1] + lms[2]), kInvSqrt6 * (lms[0] + lms[1] - 2.0 * lms[2]),
          kInvSqrt2 * (lms[0] - lms[1])};
}

std::array<double, 3> lab_to_rgb(double l, double a, double b) {
  const double ls = kInvSqrt3 * l, as = kInvSqrt6 * a, bs = kInvSqrt2 * b;
  const double lms[3] = {std::pow(10.0, ls + as + bs), std::pow(10.0, ls + as - bs),
                         std::pow(10.0, ls - 2.0 * as)};
  const auto &inv = lms_to_rgb().m;
  std::array<double, 3> rgb{};
  for (int i = 0; i < 3; ++i)
    rgb[i] = inv[i][0] * lms[0] + inv[i][1] * lms[1] + inv[i][2] * lms[2];
  return rgb;
}

ColorStats color_stats(const RgbImage &image) {
  if (image.empty()) throw std::invalid_argument("empty input");
  std::array<double, 3> sum{}, sq{};
  const std::size_t n = image.pixel_count();
  for (std::size_t i = 0; i < n; ++i) {
    const auto *p = &image.data[i * 3];
    const auto lab = rgb_to_lab(p[0], p[1], p[2]);
    for (int c = 0; c < 3; ++c) {
      sum[c] += lab[c];
      sq[c] += lab[c] * lab[c];
    }
  }
  ColorStats s;
  for (int c = 0; c < 3; ++c) {
    s.mean[c] = sum[c] / static_cast<double>(n);
    s.std[c] = std::sqrt(std::max(0.0, sq[c] / static_cast<double>(n) - s.mean[c] * s.mean[c]));
  }
  return s;
}

RgbImage reinhard_normalize(const RgbImage &image, const ColorStats &reference) {
  return reinhard_normalize(image, color_stats(image), reference);
}

RgbImage reinhard_normalize(const RgbImage &image, const ColorStats &src,
                            const ColorStats &reference) {
  for (double sd : reference.std)
    if (!(sd > 0.0)) throw std::invalid_argument("reference std must be positive");
  std::array<double, 3> scale{};
  for (int c = 0; c < 3; ++c)
    scale[c] = src.std[c] > 1e-12 ? reference.std[c] / src.std[c] : 1.0;

  RgbImage out(image.width, image.height);
  const auto n = static_cast<std::ptrdiff_t>(image.pixel_count());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto *p = &image.data[static_cast<std::size_t>(i) * 3];
    auto lab = rgb_to_lab(p[0], p[1], p[2]);
    for (int c = 0; c < 3; ++c)
      lab[c] = (lab[c] - src.mean[c]) * scale[c] + reference.mean[c];
    const auto rgb = lab_to_rgb(lab[0], lab[1], lab[2]);
    auto *q = &out.data[static_cast<std::size_t>(i) * 3];
    for (int c = 0; c < 3; ++c) q[c] = to_byte(rgb[c]);
  }
  return out;
}

RgbImage downsample(const RgbImage &image, int factor) {
  return parallel::downsample(image, factor);
}

}  // namespace milpath
