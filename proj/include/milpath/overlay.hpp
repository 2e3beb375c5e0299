// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

#include "milpath/image.hpp"
#include "milpath/mil.hpp"
#include "milpath/preproc.hpp"

namespace milpath {

struct OverlayStyle {
  double max_opacity = 0.6;  // red opacity of the highest-attention tile
  int box_width = 2;
  std::array<std::uint8_t, 3> heat{255, 0, 0};
  std::array<std::uint8_t, 3> box{0, 0, 255};
};

/// Attention heat map plus selection boxes drawn over the slide. Each tile is
/// tinted red with opacity max_opacity * alpha / max(alpha); where tiles
/// overlap the larger opacity wins. Selected tiles get a box outline whose
/// top-left corner is exactly (x, y). The output has the slide's dimensions.
RgbImage render_overlay(const RgbImage &slide, std::span<const TileRef> tiles,
                        const AttentionMap &alpha, std::span<const TileRef> selected,
                        int tile_size, const OverlayStyle &style = {});

}  // namespace milpath
