// SPDX-License-Identifier: Apache-2.0
#include "milpath/overlay.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace milpath {

RgbImage render_overlay(const RgbImage &slide, std::span<const TileRef> tiles,
                        const AttentionMap &alpha, std::span<const TileRef> selected,
                        int tile_size, const OverlayStyle &style) {
  if (!alpha.weights.empty() && alpha.size() != tiles.size())
    throw std::invalid_argument("attention map does not match the tile list");
  RgbImage out = slide;
  std::vector<double> opacity(slide.pixel_count(), 0.0);
  double peak = 0.0;
  for (double a : alpha.weights) peak = std::max(peak, a);
  if (peak > 0.0)
    for (std::size_t t = 0; t < tiles.size(); ++t) {
      const double o = style.max_opacity * alpha[t] / peak;
      const int x1 = std::min(slide.width, tiles[t].x + tile_size);
      const int y1 = std::min(slide.height, tiles[t].y + tile_size);
      for (int y = std::max(0, tiles[t].y); y < y1; ++y)
        for (int x = std::max(0, tiles[t].x); x < x1; ++x) {
          double &cell = opacity[static_cast<std::size_t>(y) * slide.width + x];
          cell = std::max(cell, o);
        }
    }
  for (std::size_t i = 0; i < slide.pixel_count(); ++i) {
    if (opacity[i] <= 0.0) continue;
    for (int c = 0; c < 3; ++c) {
      const double v = (1.0 - opacity[i]) * slide.data[i * 3 + c] + opacity[i] * style.heat[c];
      out.data[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
    }
  }
  for (const auto &ref : selected)
    for (int y = ref.y; y < ref.y + tile_size; ++y)
      for (int x = ref.x; x < ref.x + tile_size; ++x) {
        if (x < 0 || y < 0 || x >= slide.width || y >= slide.height) continue;
        const bool edge = x < ref.x + style.box_width || y < ref.y + style.box_width ||
                          x >= ref.x + tile_size - style.box_width ||
                          y >= ref.y + tile_size - style.box_width;
        if (edge) out.set(x, y, style.box[0], style.box[1], style.box[2]);
      }
  return out;
}

}  // namespace milpath
