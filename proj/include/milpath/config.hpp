// SPDX-License-Identifier: Apache-2.0
//
// Run configuration. Every field has a default; a JSON file overrides the
// defaults and command-line flags override the file. Keys are snake_case and
// each has a kebab-case flag of the same name (lr_head <-> --lr-head).
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "milpath/pipeline.hpp"
#include "milpath/synth.hpp"

namespace milpath {

/// Thrown for invalid configuration; the CLI maps it to exit code 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  // One seed drives generation, initialization, dropout and clustering
  // through derive_seed(seed, tag).
  std::uint64_t seed = 7;
  std::string dataset_dir = "data";
  std::string run_dir = "run";
  std::string variant = "att-cluster-two-stage";
  int threads = 0;

  // dataset
  int n_per_class = 40;
  int patients_per_class = 10;
  int slide_size = 256;
  double train_ratio = 0.6;
  double val_ratio = 0.2;
  double lesion_fraction_lo = 0.25;
  double lesion_fraction_hi = 0.4;
  double background_fraction = 0.25;
  double pen_fraction = 0.2;

  // preprocessing
  int tile_size = 32;
  double overlap = 0.125;
  double min_tissue = 0.8;
  double hue_lo = 0.60;
  double hue_hi = 0.98;
  int morph_radius = 2;
  int low_factor = 2;
  bool normalize = true;
  double stats_max_blue_ratio = 28.0;

  // training
  double lr_head = 3e-3;
  double lr_extractor = 1e-4;
  int epochs = 30;
  int warmup_epochs = 8;
  double dropout_rate = 0.5;
  double stage2_dropout_rate = 0.0;
  int plateau_patience = 10;
  double plateau_factor = 0.1;
  double plateau_threshold = 1e-4;
  int first_trainable_layer = 1;
  int feature_dim = 64;
  int hidden = 32;

  // pretraining
  int pretrain_epochs = 6;
  double pretrain_lr = 1e-3;
  int pretrain_batch_size = 16;
  int pretrain_slides_per_class = 6;

  // selection
  int budget = 16;
  int pca_dim = 8;
  int clusters = 4;

  // ablation
  int ablation_runs = 5;
};

/// Throws ConfigError naming the offending key.
void validate(const RunConfig &config);

nlohmann::ordered_json to_json(const RunConfig &config);
/// Overrides fields present in `j`; unknown keys and type mismatches throw ConfigError.
void apply_json(RunConfig &config, const nlohmann::json &j);
/// Overrides one field from its textual form (a flag value).
void apply_value(RunConfig &config, const std::string &key, const std::string &value);
std::vector<std::string> config_keys();

RunConfig load_run_config(const std::filesystem::path &path);
void save_run_config(const RunConfig &config, const std::filesystem::path &path);

DatasetConfig dataset_config(const RunConfig &config);
PipelineConfig pipeline_config(const RunConfig &config);
/// ablation_runs seeds derived from the run seed.
std::vector<std::uint64_t> ablation_seeds(const RunConfig &config);

}  // namespace milpath
