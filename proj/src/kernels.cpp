// SPDX-License-Identifier: Apache-2.0
#include "milpath/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <stdexcept>

#include "milpath/preproc.hpp"

namespace milpath {

namespace {

void check_downsample(const RgbImage &image, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample factor must be >= 1");
  if (image.empty()) throw std::invalid_argument("empty input");
  if (image.width % factor != 0 || image.height % factor != 0)
    throw std::invalid_argument("dimension not divisible");
}

// Rounded block mean of output row `oy`.
void downsample_row(const RgbImage &image, int factor, int oy, RgbImage &out) {
  const unsigned area = static_cast<unsigned>(factor * factor);
  for (int ox = 0; ox < out.width; ++ox) {
    unsigned sum[3] = {0, 0, 0};
    for (int dy = 0; dy < factor; ++dy)
      for (int dx = 0; dx < factor; ++dx)
        for (int c = 0; c < 3; ++c) sum[c] += image.at(ox * factor + dx, oy * factor + dy, c);
    for (int c = 0; c < 3; ++c) out.at(ox, oy, c) = static_cast<std::uint8_t>((sum[c] + area / 2) / area);
  }
}

// Windowed any/all over a clipped (2r+1)^2 square, one output row.
void morph_row(const TissueMask &mask, int radius, bool dilate, int y, TissueMask &out) {
  const int y0 = std::max(0, y - radius), y1 = std::min(mask.height - 1, y + radius);
  for (int x = 0; x < mask.width; ++x) {
    const int x0 = std::max(0, x - radius), x1 = std::min(mask.width - 1, x + radius);
    bool result = !dilate;
    for (int yy = y0; yy <= y1 && result == !dilate; ++yy)
      for (int xx = x0; xx <= x1; ++xx)
        if (mask.at(xx, yy) == dilate) {
          result = dilate;
          break;
        }
    out.set(x, y, result);
  }
}

double tile_mean(const RgbImage &tile) {
  double sum = 0.0;
  for (std::size_t i = 0; i < tile.pixel_count(); ++i)
    sum += blue_ratio(tile.data[i * 3], tile.data[i * 3 + 1], tile.data[i * 3 + 2]);
  return tile.pixel_count() ? sum / static_cast<double>(tile.pixel_count()) : 0.0;
}

Tensor feature_matrix(std::span<const RgbImage> tiles, const ExtractorParams &params) {
  return Tensor({tiles.size(), static_cast<std::size_t>(params.config.feature_dim)});
}

}  // namespace

namespace serial {

RealMap blue_ratio_map(const RgbImage &image) {
  RealMap map{image.width, image.height, std::vector<double>(image.pixel_count())};
  for (std::size_t i = 0; i < image.pixel_count(); ++i)
    map.values[i] = blue_ratio(image.data[i * 3], image.data[i * 3 + 1], image.data[i * 3 + 2]);
  return map;
}

std::vector<double> tile_mean_blue_ratio(std::span<const RgbImage> tiles) {
  std::vector<double> out(tiles.size());
  for (std::size_t i = 0; i < tiles.size(); ++i) out[i] = tile_mean(tiles[i]);
  return out;
}

RgbImage downsample(const RgbImage &image, int factor) {
  check_downsample(image, factor);
  RgbImage out(image.width / factor, image.height / factor);
  for (int oy = 0; oy < out.height; ++oy) downsample_row(image, factor, oy, out);
  return out;
}

TissueMask morph(const TissueMask &mask, int radius, bool dilate) {
  if (radius == 0) return mask;
  TissueMask out(mask.width, mask.height);
  for (int y = 0; y < mask.height; ++y) morph_row(mask, radius, dilate, y, out);
  return out;
}

Tensor extract_features(std::span<const RgbImage> tiles, const ExtractorParams &params) {
  Tensor v = feature_matrix(tiles, params);
  for (std::size_t i = 0; i < tiles.size(); ++i) extract_tile(tiles[i], params, v.row(i));
  return v;
}

}  // namespace serial

namespace parallel {

RealMap blue_ratio_map(const RgbImage &image) {
  RealMap map{image.width, image.height, std::vector<double>(image.pixel_count())};
  const auto n = static_cast<std::ptrdiff_t>(image.pixel_count());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    map.values[i] = blue_ratio(image.data[i * 3], image.data[i * 3 + 1], image.data[i * 3 + 2]);
  return map;
}

std::vector<double> tile_mean_blue_ratio(std::span<const RgbImage> tiles) {
  std::vector<double> out(tiles.size());
  const auto n = static_cast<std::ptrdiff_t>(tiles.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < n; ++i) out[i] = tile_mean(tiles[i]);
  return out;
}

RgbImage downsample(const RgbImage &image, int factor) {
  check_downsample(image, factor);
  RgbImage out(image.width / factor, image.height / factor);
#pragma omp parallel for schedule(static)
  for (int oy = 0; oy < out.height; ++oy) downsample_row(image, factor, oy, out);
  return out;
}

TissueMask morph(const TissueMask &mask, int radius, bool dilate) {
  if (radius == 0) return mask;
  TissueMask out(mask.width, mask.height);
#pragma omp parallel for schedule(static)
  for (int y = 0; y < mask.height; ++y) morph_row(mask, radius, dilate, y, out);
  return out;
}

Tensor extract_features(std::span<const RgbImage> tiles, const ExtractorParams &params) {
  Tensor v = feature_matrix(tiles, params);
  const auto n = static_cast<std::ptrdiff_t>(tiles.size());
  // Exceptions may not cross an OpenMP region; validate up front.
  for (const auto &t : tiles)
    if (t.width != params.config.input_size || t.height != params.config.input_size)
      throw std::invalid_argument("tile dimensions do not match extractor input");
#pragma omp parallel for schedule(dynamic, 4)
  for (std::ptrdiff_t i = 0; i < n; ++i) extract_tile(tiles[i], params, v.row(i));
  return v;
}

}  // namespace parallel

void set_thread_count(int threads) {
  if (threads > 0) omp_set_num_threads(threads);
}

}  // namespace milpath
