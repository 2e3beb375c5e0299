// SPDX-License-Identifier: Apache-2.0
//
// Procedural slides with tile-level ground truth.
//
// Tissue is a pink stained field with sparse purple "benign" nuclei. A lesion
// is a connected patch of tiles: its core carries dense dark-blue nuclei and
// the rest of the patch (the periphery) carries pale lavender nuclei, a weaker
// cue that looks nothing like the core. High-grade lesion nuclei carry a
// one-pixel checkerboard chromatin texture whose 2x2 block mean equals the
// solid low-grade colour, so grade is visible at full resolution and nearly
// erased by 2x downsampling.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "milpath/image.hpp"
#include "milpath/preproc.hpp"
#include "milpath/selection.hpp"

namespace milpath {

enum class SlideClass { Benign = 0, Low = 1, High = 2 };
inline constexpr int kSlideClasses = 3;

const char *to_string(SlideClass c);
SlideClass slide_class_from_string(const std::string &s);

enum class TileLabel { Background = 0, BenignTissue = 1, LowTexture = 2, HighTexture = 3 };

const char *to_string(TileLabel l);
TileLabel tile_label_from_string(const std::string &s);
inline bool is_lesion(TileLabel l) {
  return l == TileLabel::LowTexture || l == TileLabel::HighTexture;
}

struct TextureParams {
  double benign_density = 0.004;     // nucleus centres per tissue pixel
  double core_density = 0.022;
  double periphery_density = 0.008;
  double high_density_factor = 1.1;  // high-grade vs low-grade lesion density
  double benign_radius_lo = 1.2, benign_radius_hi = 2.0;
  double lesion_radius_lo = 1.8, lesion_radius_hi = 3.0;
  double periphery_radius_lo = 1.2, periphery_radius_hi = 2.0;
  std::array<int, 3> background{240, 238, 230};
  std::array<int, 3> stroma{232, 160, 204};
  std::array<int, 3> benign_nucleus{130, 80, 170};
  std::array<int, 3> lesion_nucleus{70, 50, 150};
  std::array<int, 3> periphery_nucleus{200, 140, 230};
  std::array<int, 3> chromatin_contrast{26, 20, 34};
  std::array<int, 3> pen{40, 170, 70};
  double stain_jitter = 0.03;  // per-slide multiplicative colour jitter (sd)
  int brightness_noise = 6;    // per-pixel, shared by the three channels
  int channel_noise = 2;       // per-pixel, per channel
  double core_fraction = 0.2;  // share of lesion tiles painted with core texture
};

struct SyntheticSlideSpec {
  std::string slide_id;
  int slide_size = 256;
  SlideClass slide_class = SlideClass::Benign;
  double lesion_fraction = 0.0;      // of tissue tiles; 0 for benign
  double background_fraction = 0.25;  // approximate share of non-tissue area
  bool pen_marker = false;
  std::string patient_id;
  std::uint64_t seed = 0;
  TextureParams texture{};
  // grid used for ground truth; matches the preprocessing grid
  int tile_size = 32;
  double overlap = 0.125;
  double min_tissue = 0.8;
};

void validate(const SyntheticSlideSpec &spec);

/// Per-tile labels on the slide's tile grid, row-major.
struct GroundTruth {
  TileGrid grid;
  std::vector<TileLabel> labels;
  std::vector<bool> core;  // lesion tiles painted with core texture

  std::size_t cols() const { return grid.xs.size(); }
  std::size_t rows() const { return grid.ys.size(); }
  /// Label of the tile whose origin is (x, y); throws if (x, y) is not on the grid.
  TileLabel at(int x, int y) const;
  std::size_t index_of(int x, int y) const;
  std::size_t lesion_count() const;
  std::size_t tissue_count() const;
};

struct SyntheticSlide {
  RgbImage image;
  GroundTruth truth;
};

/// Pure function of the spec (seed included).
SyntheticSlide generate_slide(const SyntheticSlideSpec &spec);

std::string ground_truth_csv(const GroundTruth &truth);
GroundTruth ground_truth_from_csv(const std::string &csv, const TileGrid &grid);

/// Fraction of lesion tiles present in the selection. Throws "no positives"
/// when the truth has no lesion tiles.
double selection_recall(const SelectionResult &result, const GroundTruth &truth);
double selection_recall(std::span<const TileRef> selected, const GroundTruth &truth);

enum class Split { Train, Val, Test };
const char *to_string(Split s);
Split split_from_string(const std::string &s);

struct DatasetConfig {
  int n_per_class = 40;
  int patients_per_class = 10;
  std::uint64_t seed = 7;
  double train_ratio = 0.6;
  double val_ratio = 0.2;
  int slide_size = 256;
  double lesion_fraction_lo = 0.25;
  double lesion_fraction_hi = 0.4;
  double background_fraction = 0.25;
  double pen_fraction = 0.2;
  TextureParams texture{};
  int tile_size = 32;
  double overlap = 0.125;
  double min_tissue = 0.8;
};

void validate(const DatasetConfig &config);

struct ManifestEntry {
  std::string slide_id;
  std::string path;  // slide PNG, relative to the manifest directory
  SlideClass slide_class = SlideClass::Benign;
  std::string patient;
  std::uint64_t seed = 0;
  Split split = Split::Train;
};

/// Slide specs in manifest order plus split assignment. Splits are drawn per
/// class at patient granularity so no patient spans two splits.
struct DatasetPlan {
  std::vector<SyntheticSlideSpec> specs;
  std::vector<ManifestEntry> entries;
};

DatasetPlan plan_dataset(const DatasetConfig &config);

/// Writes slides/<id>.png, truth/<id>.csv and manifest.jsonl under `dir`.
DatasetPlan generate_dataset(const DatasetConfig &config, const std::filesystem::path &dir);

std::string manifest_line(const ManifestEntry &entry);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path &path);

}  // namespace milpath
