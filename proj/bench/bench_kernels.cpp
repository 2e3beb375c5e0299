// SPDX-License-Identifier: Apache-2.0
//
// Serial reference vs OpenMP kernels on a synthetic slide.
//   bench_kernels [threads] [repeats]
#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>

#include "milpath/kernels.hpp"
#include "milpath/preproc.hpp"
#include "milpath/synth.hpp"

using namespace milpath;

namespace {

double seconds(const std::function<void()> &fn, int repeats) {
  fn();  // warm-up
  const auto t0 = std::chrono::steady_clock::now();
  for (int r = 0; r < repeats; ++r) fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / repeats;
}

void row(const std::string &name, double serial, double parallel, bool same) {
  std::printf("%-22s %10.3f ms %10.3f ms %7.2fx  %s\n", name.c_str(), serial * 1e3, parallel * 1e3,
              serial / parallel, same ? "identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char **argv) {
  const int threads = argc > 1 ? std::atoi(argv[1]) : omp_get_max_threads();
  const int repeats = argc > 2 ? std::atoi(argv[2]) : 5;
  set_thread_count(threads);

  SyntheticSlideSpec spec;
  spec.slide_id = "bench";
  spec.slide_size = 1024;
  spec.slide_class = SlideClass::High;
  spec.lesion_fraction = 0.3;
  spec.seed = 42;
  const RgbImage slide = generate_slide(spec).image;
  const TissueMask mask = tissue_mask(slide, MaskParams{});
  const auto grid = extract_tile_grid(slide.width, slide.height, 32, 0.125);
  std::vector<RgbImage> tiles;
  for (const auto &[x, y] : grid.origins) tiles.push_back(slide.crop(x, y, 32, 32));
  const ExtractorParams extractor = init_extractor(1, ExtractorConfig{});

  std::printf("threads %d, slide %dx%d, %zu tiles, %d repeats\n", threads, slide.width,
              slide.height, tiles.size(), repeats);
  std::printf("%-22s %13s %13s %8s\n", "kernel", "serial", "parallel", "speedup");

  row("blue_ratio_map", seconds([&] { serial::blue_ratio_map(slide); }, repeats),
      seconds([&] { parallel::blue_ratio_map(slide); }, repeats),
      serial::blue_ratio_map(slide).values == parallel::blue_ratio_map(slide).values);
  row("tile_mean_blue_ratio", seconds([&] { serial::tile_mean_blue_ratio(tiles); }, repeats),
      seconds([&] { parallel::tile_mean_blue_ratio(tiles); }, repeats),
      serial::tile_mean_blue_ratio(tiles) == parallel::tile_mean_blue_ratio(tiles));
  row("downsample x2", seconds([&] { serial::downsample(slide, 2); }, repeats),
      seconds([&] { parallel::downsample(slide, 2); }, repeats),
      serial::downsample(slide, 2) == parallel::downsample(slide, 2));
  row("dilate r=2", seconds([&] { serial::morph(mask, 2, true); }, repeats),
      seconds([&] { parallel::morph(mask, 2, true); }, repeats),
      serial::morph(mask, 2, true) == parallel::morph(mask, 2, true));
  row("extract_features", seconds([&] { serial::extract_features(tiles, extractor); }, repeats),
      seconds([&] { parallel::extract_features(tiles, extractor); }, repeats),
      serial::extract_features(tiles, extractor) == parallel::extract_features(tiles, extractor));
  return 0;
}
