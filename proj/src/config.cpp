// SPDX-License-Identifier: Apache-2.0
#include "milpath/config.hpp"

#include <fstream>
#include <set>

#include "milpath/rng.hpp"

namespace milpath {

namespace {

// Calls f(key, field) for every field, in file order.
template <typename Config, typename F>
void visit_fields(Config &c, F &&f) {
  f("seed", c.seed);
  f("dataset_dir", c.dataset_dir);
  f("run_dir", c.run_dir);
  f("variant", c.variant);
  f("threads", c.threads);
  f("n_per_class", c.n_per_class);
  f("patients_per_class", c.patients_per_class);
  f("slide_size", c.slide_size);
  f("train_ratio", c.train_ratio);
  f("val_ratio", c.val_ratio);
  f("lesion_fraction_lo", c.lesion_fraction_lo);
  f("lesion_fraction_hi", c.lesion_fraction_hi);
  f("background_fraction", c.background_fraction);
  f("pen_fraction", c.pen_fraction);
  f("tile_size", c.tile_size);
  f("overlap", c.overlap);
  f("min_tissue", c.min_tissue);
  f("hue_lo", c.hue_lo);
  f("hue_hi", c.hue_hi);
  f("morph_radius", c.morph_radius);
  f("low_factor", c.low_factor);
  f("normalize", c.normalize);
  f("stats_max_blue_ratio", c.stats_max_blue_ratio);
  f("lr_head", c.lr_head);
  f("lr_extractor", c.lr_extractor);
  f("epochs", c.epochs);
  f("warmup_epochs", c.warmup_epochs);
  f("dropout_rate", c.dropout_rate);
  f("stage2_dropout_rate", c.stage2_dropout_rate);
  f("plateau_patience", c.plateau_patience);
  f("plateau_factor", c.plateau_factor);
  f("plateau_threshold", c.plateau_threshold);
  f("first_trainable_layer", c.first_trainable_layer);
  f("feature_dim", c.feature_dim);
  f("hidden", c.hidden);
  f("pretrain_epochs", c.pretrain_epochs);
  f("pretrain_lr", c.pretrain_lr);
  f("pretrain_batch_size", c.pretrain_batch_size);
  f("pretrain_slides_per_class", c.pretrain_slides_per_class);
  f("budget", c.budget);
  f("pca_dim", c.pca_dim);
  f("clusters", c.clusters);
  f("ablation_runs", c.ablation_runs);
}

template <typename T>
void assign_from_json(T &field, const nlohmann::json &v, const std::string &key) {
  const bool ok = [&] {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
    else return v.is_number_integer();
  }();
  if (!ok) throw ConfigError("config key '" + key + "' has the wrong type");
  field = v.get<T>();
}

template <typename T>
void assign_from_text(T &field, const std::string &text, const std::string &key) {
  try {
    std::size_t used = 0;
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") field = true;
      else if (text == "false" || text == "0") field = false;
      else throw std::invalid_argument("bool");
      used = text.size();
    } else if constexpr (std::is_same_v<T, std::string>) {
      field = text;
      used = text.size();
    } else if constexpr (std::is_floating_point_v<T>) {
      field = std::stod(text, &used);
    } else if constexpr (std::is_unsigned_v<T>) {
      if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
      field = std::stoull(text, &used);
    } else {
      field = static_cast<T>(std::stoll(text, &used));
    }
    if (used != text.size()) throw std::invalid_argument("trailing");
  } catch (const std::logic_error &) {
    throw ConfigError("invalid value '" + text + "' for --" + key);
  }
}

void require(bool ok, const std::string &message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void validate(const RunConfig &c) {
  try {
    validate(dataset_config(c));
    validate(pipeline_config(c));
    variant_by_name(c.variant);
  } catch (const std::invalid_argument &e) {
    throw ConfigError(e.what());
  }
  require(c.threads >= 0, "threads must be >= 0");
  require(c.ablation_runs >= 3, "ablation_runs must be >= 3");
  require(c.pretrain_epochs >= 0, "pretrain_epochs must be >= 0");
  require(c.pretrain_batch_size >= 1, "pretrain_batch_size must be >= 1");
  require(c.pretrain_lr > 0.0, "pretrain_lr must be positive");
  require(c.budget >= 1, "empty selection budget");
  require(c.pca_dim >= 1 && c.clusters >= 1, "pca_dim and clusters must be >= 1");
}

nlohmann::ordered_json to_json(const RunConfig &config) {
  nlohmann::ordered_json j;
  visit_fields(config, [&](const char *key, const auto &field) { j[key] = field; });
  return j;
}

void apply_json(RunConfig &config, const nlohmann::json &j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  std::set<std::string> known;
  visit_fields(config, [&](const char *key, auto &field) {
    known.insert(key);
    if (j.contains(key)) assign_from_json(field, j.at(key), key);
  });
  for (const auto &item : j.items())
    if (!known.count(item.key())) throw ConfigError("unknown config key '" + item.key() + "'");
}

void apply_value(RunConfig &config, const std::string &key, const std::string &value) {
  bool found = false;
  visit_fields(config, [&](const char *k, auto &field) {
    if (key == k) {
      assign_from_text(field, value, key);
      found = true;
    }
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  RunConfig c;
  visit_fields(c, [&](const char *key, auto &) { keys.emplace_back(key); });
  return keys;
}

RunConfig load_run_config(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error &e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  RunConfig config;
  apply_json(config, j);
  return config;
}

void save_run_config(const RunConfig &config, const std::filesystem::path &path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  out << to_json(config).dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

DatasetConfig dataset_config(const RunConfig &c) {
  DatasetConfig d;
  d.n_per_class = c.n_per_class;
  d.patients_per_class = c.patients_per_class;
  d.seed = derive_seed(c.seed, "dataset");
  d.train_ratio = c.train_ratio;
  d.val_ratio = c.val_ratio;
  d.slide_size = c.slide_size;
  d.lesion_fraction_lo = c.lesion_fraction_lo;
  d.lesion_fraction_hi = c.lesion_fraction_hi;
  d.background_fraction = c.background_fraction;
  d.pen_fraction = c.pen_fraction;
  d.tile_size = c.tile_size;
  d.overlap = c.overlap;
  d.min_tissue = c.min_tissue;
  return d;
}

PipelineConfig pipeline_config(const RunConfig &c) {
  PipelineConfig p;
  p.train.lr_head = c.lr_head;
  p.train.lr_extractor = c.lr_extractor;
  p.train.epochs = c.epochs;
  p.train.warmup_epochs = c.warmup_epochs;
  p.train.dropout_rate = c.dropout_rate;
  p.train.plateau_patience = c.plateau_patience;
  p.train.plateau_factor = c.plateau_factor;
  p.train.plateau_threshold = c.plateau_threshold;
  p.train.first_trainable_layer = c.first_trainable_layer;
  p.stage2_dropout_rate = c.stage2_dropout_rate;
  p.feature_dim = c.feature_dim;
  p.hidden = c.hidden;
  p.budget = static_cast<std::size_t>(std::max(0, c.budget));
  p.pca_dim = static_cast<std::size_t>(std::max(0, c.pca_dim));
  p.clusters = static_cast<std::size_t>(std::max(0, c.clusters));
  p.pretrain.epochs = c.pretrain_epochs;
  p.pretrain.lr = c.pretrain_lr;
  p.pretrain.batch_size = c.pretrain_batch_size;
  p.pretrain_slides_per_class = c.pretrain_slides_per_class;
  p.seed = c.seed;
  p.preproc.tile_size = c.tile_size;
  p.preproc.overlap = c.overlap;
  p.preproc.min_tissue = c.min_tissue;
  p.preproc.mask = {c.hue_lo, c.hue_hi, c.morph_radius};
  p.preproc.low_factor = c.low_factor;
  p.preproc.normalize = c.normalize;
  p.preproc.stats_max_blue_ratio = c.stats_max_blue_ratio;
  return p;
}

std::vector<std::uint64_t> ablation_seeds(const RunConfig &config) {
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < config.ablation_runs; ++i)
    seeds.push_back(derive_seed(config.seed, "ablation/" + std::to_string(i)));
  return seeds;
}

}  // namespace milpath
