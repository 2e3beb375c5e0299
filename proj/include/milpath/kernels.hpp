// SPDX-License-Identifier: Apache-2.0
//
// Data-parallel inner loops. Every kernel exists twice: a plain serial
// reference and an OpenMP version. Both must produce bit-identical output;
// tests/test_kernels.cpp holds them to that and bench/ times them.
#pragma once

#include <span>
#include <vector>

#include "milpath/extractor.hpp"
#include "milpath/image.hpp"

namespace milpath {

namespace serial {

RealMap blue_ratio_map(const RgbImage &image);
std::vector<double> tile_mean_blue_ratio(std::span<const RgbImage> tiles);
RgbImage downsample(const RgbImage &image, int factor);
TissueMask morph(const TissueMask &mask, int radius, bool dilate);
/// k x d feature matrix, one forward pass per tile.
Tensor extract_features(std::span<const RgbImage> tiles, const ExtractorParams &params);

}  // namespace serial

namespace parallel {

RealMap blue_ratio_map(const RgbImage &image);
std::vector<double> tile_mean_blue_ratio(std::span<const RgbImage> tiles);
RgbImage downsample(const RgbImage &image, int factor);
TissueMask morph(const TissueMask &mask, int radius, bool dilate);
Tensor extract_features(std::span<const RgbImage> tiles, const ExtractorParams &params);

}  // namespace parallel

/// Sets the OpenMP worker count used by the parallel kernels (0 = runtime default).
void set_thread_count(int threads);

}  // namespace milpath
