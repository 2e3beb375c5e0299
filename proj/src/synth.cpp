// SPDX-License-Identifier: Apache-2.0
#include "milpath/synth.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "milpath/rng.hpp"

namespace milpath {

const char *to_string(SlideClass c) {
  switch (c) {
    case SlideClass::Benign: return "benign";
    case SlideClass::Low: return "low";
    case SlideClass::High: return "high";
  }
  return "?";
}

SlideClass slide_class_from_string(const std::string &s) {
  if (s == "benign") return SlideClass::Benign;
  if (s == "low") return SlideClass::Low;
  if (s == "high") return SlideClass::High;
  throw std::invalid_argument("unknown slide class '" + s + "'");
}

const char *to_string(TileLabel l) {
  switch (l) {
    case TileLabel::Background: return "background";
    case TileLabel::BenignTissue: return "benign";
    case TileLabel::LowTexture: return "low";
    case TileLabel::HighTexture: return "high";
  }
  return "?";
}

TileLabel tile_label_from_string(const std::string &s) {
  if (s == "background") return TileLabel::Background;
  if (s == "benign") return TileLabel::BenignTissue;
  if (s == "low") return TileLabel::LowTexture;
  if (s == "high") return TileLabel::HighTexture;
  throw std::invalid_argument("unknown tile label '" + s + "'");
}

const char *to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string &s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split '" + s + "'");
}

void validate(const SyntheticSlideSpec &spec) {
  if (spec.slide_size < spec.tile_size) throw std::invalid_argument("slide smaller than tile");
  if (spec.slide_class == SlideClass::Benign) {
    if (spec.lesion_fraction != 0.0)
      throw std::invalid_argument("benign slides must have lesion_fraction 0");
  } else if (!(spec.lesion_fraction > 0.0 && spec.lesion_fraction <= 1.0)) {
    throw std::invalid_argument("lesion_fraction must be in (0, 1] for cancer slides");
  }
  if (!(spec.background_fraction >= 0.0 && spec.background_fraction < 1.0))
    throw std::invalid_argument("background_fraction must be in [0, 1)");
}

std::size_t GroundTruth::index_of(int x, int y) const {
  const auto ix = std::find(grid.xs.begin(), grid.xs.end(), x);
  const auto iy = std::find(grid.ys.begin(), grid.ys.end(), y);
  if (ix == grid.xs.end() || iy == grid.ys.end())
    throw std::invalid_argument("tile origin is not on the ground-truth grid");
  return static_cast<std::size_t>(iy - grid.ys.begin()) * cols() +
         static_cast<std::size_t>(ix - grid.xs.begin());
}

TileLabel GroundTruth::at(int x, int y) const { return labels[index_of(x, y)]; }

std::size_t GroundTruth::lesion_count() const {
  return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), is_lesion));
}

std::size_t GroundTruth::tissue_count() const {
  return static_cast<std::size_t>(std::count_if(
      labels.begin(), labels.end(), [](TileLabel l) { return l != TileLabel::Background; }));
}

namespace {

std::uint8_t clamp_byte(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

struct Ellipse {
  double cx, cy, rx, ry, angle;

  bool contains(double x, double y) const {
    const double c = std::cos(angle), s = std::sin(angle);
    const double dx = x - cx, dy = y - cy;
    const double u = (c * dx + s * dy) / rx, v = (-s * dx + c * dy) / ry;
    return u * u + v * v <= 1.0;
  }
};

// A main lobe plus up to two satellites, scaled so the union covers roughly
// (1 - background_fraction) of the slide.
std::vector<Ellipse> tissue_shape(int size, double background_fraction, Rng &rng) {
  const double target = (1.0 - background_fraction) * size * size;
  const double main_area = 0.8 * target;
  const double aspect = rng.uniform(0.75, 1.0);
  const double rx = std::sqrt(main_area / (std::numbers::pi * aspect));
  std::vector<Ellipse> lobes;
  lobes.push_back({size * rng.uniform(0.45, 0.55), size * rng.uniform(0.45, 0.55),
                   std::min(rx, 0.49 * size), std::min(rx * aspect, 0.49 * size),
                   rng.uniform(0.0, std::numbers::pi)});
  const int satellites = 1 + static_cast<int>(rng.below(2));
  for (int s = 0; s < satellites; ++s) {
    const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double r = 0.5 * rx;
    lobes.push_back({lobes[0].cx + r * std::cos(theta), lobes[0].cy + r * std::sin(theta),
                     0.45 * rx, 0.35 * rx, rng.uniform(0.0, std::numbers::pi)});
  }
  return lobes;
}

void paint_nucleus(RgbImage &img, const std::vector<std::uint8_t> &tissue, double cx, double cy,
                   double radius, double aspect, double angle, std::array<double, 3> color,
                   const std::array<int, 3> *chromatin) {
  const Ellipse e{cx, cy, radius, radius * aspect, angle};
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - radius - 1)));
  const int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - radius - 1)));
  const int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      if (!tissue[static_cast<std::size_t>(y) * img.width + x]) continue;
      if (!e.contains(x + 0.5, y + 0.5)) continue;
      const double sign = ((x + y) & 1) ? 1.0 : -1.0;
      for (int c = 0; c < 3; ++c) {
        const double v = chromatin ? color[c] + sign * (*chromatin)[c] : color[c];
        img.at(x, y, c) = clamp_byte(v);
      }
    }
}

}  // namespace

SyntheticSlide generate_slide(const SyntheticSlideSpec &spec) {
  validate(spec);
  const auto &tex = spec.texture;
  const int size = spec.slide_size;
  Rng rng(spec.seed);

  std::array<double, 3> jitter{};
  for (auto &j : jitter) j = 1.0 + tex.stain_jitter * rng.normal();
  auto stained = [&](const std::array<int, 3> &c) {
    return std::array<double, 3>{c[0] * jitter[0], c[1] * jitter[1], c[2] * jitter[2]};
  };

  // tissue region
  const auto lobes = tissue_shape(size, spec.background_fraction, rng);
  std::vector<std::uint8_t> tissue(static_cast<std::size_t>(size) * size, 0);
  TissueMask true_mask(size, size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool in = std::any_of(lobes.begin(), lobes.end(),
                                  [&](const Ellipse &e) { return e.contains(x + 0.5, y + 0.5); });
      tissue[static_cast<std::size_t>(y) * size + x] = in;
      true_mask.set(x, y, in);
    }

  // ground-truth grid
  SyntheticSlide out;
  auto &truth = out.truth;
  truth.grid = extract_tile_grid(size, size, spec.tile_size, spec.overlap);
  truth.labels.assign(truth.grid.size(), TileLabel::Background);
  truth.core.assign(truth.grid.size(), false);
  std::vector<std::size_t> tissue_tiles;
  for (std::size_t t = 0; t < truth.grid.size(); ++t) {
    const auto [x, y] = truth.grid.origins[t];
    if (tissue_fraction(true_mask, x, y, spec.tile_size) >= spec.min_tissue) {
      truth.labels[t] = TileLabel::BenignTissue;
      tissue_tiles.push_back(t);
    }
  }

  // lesion region: grow a 4-connected patch of tiles from a random seed tile
  std::vector<std::size_t> lesion;
  if (spec.slide_class != SlideClass::Benign && !tissue_tiles.empty()) {
    const auto wanted = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(spec.lesion_fraction * tissue_tiles.size())));
    const std::size_t cols = truth.cols(), rows = truth.rows();
    std::set<std::size_t> in_lesion;
    while (lesion.size() < wanted) {
      std::vector<std::size_t> candidates;
      for (auto t : tissue_tiles)
        if (!in_lesion.count(t)) candidates.push_back(t);
      if (candidates.empty()) break;
      std::deque<std::size_t> frontier{candidates[rng.below(candidates.size())]};
      in_lesion.insert(frontier.front());
      while (!frontier.empty() && lesion.size() < wanted) {
        const std::size_t t = frontier.front();
        frontier.pop_front();
        lesion.push_back(t);
        const std::size_t r = t / cols, c = t % cols;
        std::vector<std::size_t> nbrs;
        if (r > 0) nbrs.push_back(t - cols);
        if (r + 1 < rows) nbrs.push_back(t + cols);
        if (c > 0) nbrs.push_back(t - 1);
        if (c + 1 < cols) nbrs.push_back(t + 1);
        rng.shuffle(nbrs.begin(), nbrs.end());
        for (auto nb : nbrs)
          if (truth.labels[nb] != TileLabel::Background && !in_lesion.count(nb)) {
            in_lesion.insert(nb);
            frontier.push_back(nb);
          }
      }
    }
    const auto cores = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(tex.core_fraction * lesion.size())));
    const TileLabel label =
        spec.slide_class == SlideClass::High ? TileLabel::HighTexture : TileLabel::LowTexture;
    for (std::size_t i = 0; i < lesion.size(); ++i) {
      truth.labels[lesion[i]] = label;
      truth.core[lesion[i]] = i < cores;
    }
  }

  // per-pixel lesion level: 0 none, 1 periphery, 2 core
  std::vector<std::uint8_t> level(static_cast<std::size_t>(size) * size, 0);
  for (auto t : lesion) {
    const auto [x0, y0] = truth.grid.origins[t];
    const std::uint8_t lv = truth.core[t] ? 2 : 1;
    for (int y = y0; y < y0 + spec.tile_size; ++y)
      for (int x = x0; x < x0 + spec.tile_size; ++x) {
        auto &cell = level[static_cast<std::size_t>(y) * size + x];
        cell = std::max(cell, lv);
      }
  }

  // base colours
  RgbImage &img = out.image;
  img = RgbImage(size, size);
  const auto stroma = stained(tex.stroma);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(x, y, c) = clamp_byte(tissue[static_cast<std::size_t>(y) * size + x]
                                         ? stroma[c]
                                         : static_cast<double>(tex.background[c]));

  // nuclei
  const double grade = spec.slide_class == SlideClass::High ? tex.high_density_factor : 1.0;
  const auto benign_color = stained(tex.benign_nucleus);
  const auto lesion_color = stained(tex.lesion_nucleus);
  const auto periphery_color = stained(tex.periphery_nucleus);
  const std::array<int, 3> *chromatin =
      spec.slide_class == SlideClass::High ? &tex.chromatin_contrast : nullptr;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * size + x;
      if (!tissue[i]) continue;
      if (rng.bernoulli(tex.benign_density)) {
        const double r = rng.uniform(tex.benign_radius_lo, tex.benign_radius_hi);
        paint_nucleus(img, tissue, x + rng.uniform(), y + rng.uniform(), r, rng.uniform(0.6, 1.0),
                      rng.uniform(0.0, std::numbers::pi), benign_color, nullptr);
      }
      if (level[i] == 0) continue;
      const bool core = level[i] == 2;
      if (rng.bernoulli(grade * (core ? tex.core_density : tex.periphery_density))) {
        const double r = core ? rng.uniform(tex.lesion_radius_lo, tex.lesion_radius_hi)
                              : rng.uniform(tex.periphery_radius_lo, tex.periphery_radius_hi);
        paint_nucleus(img, tissue, x + rng.uniform(), y + rng.uniform(), r, rng.uniform(0.6, 1.0),
                      rng.uniform(0.0, std::numbers::pi), core ? lesion_color : periphery_color,
                      chromatin);
      }
    }

  // pen stroke: a thick straight line crossing the slide
  if (spec.pen_marker) {
    const double x0 = rng.uniform(0.0, size), x1 = rng.uniform(0.0, size);
    const bool near_top = rng.bernoulli(0.5);
    const double y0 = near_top ? rng.uniform(0.0, 0.15 * size) : rng.uniform(0.85 * size, size);
    const double y1 = near_top ? rng.uniform(0.0, 0.15 * size) : rng.uniform(0.85 * size, size);
    const int steps = 4 * size;
    for (int s = 0; s <= steps; ++s) {
      const double t = static_cast<double>(s) / steps;
      const int px = static_cast<int>(x0 + t * (x1 - x0)), py = static_cast<int>(y0 + t * (y1 - y0));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int qx = px + dx, qy = py + dy;
          if (qx < 0 || qy < 0 || qx >= size || qy >= size) continue;
          img.set(qx, qy, static_cast<std::uint8_t>(tex.pen[0]),
                  static_cast<std::uint8_t>(tex.pen[1]), static_cast<std::uint8_t>(tex.pen[2]));
        }
    }
  }

  // sensor noise
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double shared = rng.uniform(-tex.brightness_noise, tex.brightness_noise);
    for (int c = 0; c < 3; ++c) {
      const double own = rng.uniform(-tex.channel_noise, tex.channel_noise);
      img.data[i * 3 + c] = clamp_byte(img.data[i * 3 + c] + shared + own);
    }
  }
  return out;
}

std::string ground_truth_csv(const GroundTruth &truth) {
  std::ostringstream out;
  for (std::size_t r = 0; r < truth.rows(); ++r) {
    for (std::size_t c = 0; c < truth.cols(); ++c) {
      if (c) out << ',';
      out << to_string(truth.labels[r * truth.cols() + c]);
    }
    out << '\n';
  }
  return out.str();
}

GroundTruth ground_truth_from_csv(const std::string &csv, const TileGrid &grid) {
  GroundTruth truth;
  truth.grid = grid;
  std::istringstream in(csv);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    std::string cell;
    while (std::getline(row, cell, ',')) truth.labels.push_back(tile_label_from_string(cell));
  }
  if (truth.labels.size() != grid.size())
    throw std::invalid_argument("ground truth does not match the tile grid");
  truth.core.assign(truth.labels.size(), false);
  return truth;
}

double selection_recall(std::span<const TileRef> selected, const GroundTruth &truth) {
  const std::size_t positives = truth.lesion_count();
  if (positives == 0) throw std::invalid_argument("no positives");
  std::set<std::size_t> hit;
  for (const auto &ref : selected) {
    const std::size_t i = truth.index_of(ref.x, ref.y);
    if (is_lesion(truth.labels[i])) hit.insert(i);
  }
  return static_cast<double>(hit.size()) / static_cast<double>(positives);
}

double selection_recall(const SelectionResult &result, const GroundTruth &truth) {
  return selection_recall(result.selected, truth);
}

void validate(const DatasetConfig &c) {
  if (c.n_per_class < 1) throw std::invalid_argument("n_per_class must be >= 1");
  if (c.patients_per_class < 3) throw std::invalid_argument("patients_per_class must be >= 3");
  if (c.patients_per_class > c.n_per_class)
    throw std::invalid_argument("patients_per_class cannot exceed n_per_class");
  if (!(c.train_ratio > 0.0 && c.val_ratio > 0.0 && c.train_ratio + c.val_ratio < 1.0))
    throw std::invalid_argument("split ratios must be positive and leave room for test");
  if (!(c.lesion_fraction_lo > 0.0 && c.lesion_fraction_lo <= c.lesion_fraction_hi &&
        c.lesion_fraction_hi <= 1.0))
    throw std::invalid_argument("lesion fraction range must lie in (0, 1]");
  if (!(c.pen_fraction >= 0.0 && c.pen_fraction <= 1.0))
    throw std::invalid_argument("pen_fraction must be in [0, 1]");
}

DatasetPlan plan_dataset(const DatasetConfig &config) {
  validate(config);
  DatasetPlan plan;
  Rng rng(derive_seed(config.seed, "dataset/plan"));
  const int patients = config.patients_per_class;
  const int n_val = std::max(1, static_cast<int>(std::lround(config.val_ratio * patients)));
  const int n_test = std::max(
      1, static_cast<int>(std::lround((1.0 - config.train_ratio - config.val_ratio) * patients)));
  const int n_train = patients - n_val - n_test;
  if (n_train < 1) throw std::invalid_argument("too few patients for a three-way split");

  for (int cls = 0; cls < kSlideClasses; ++cls) {
    const auto slide_class = static_cast<SlideClass>(cls);
    std::vector<int> order(static_cast<std::size_t>(patients));
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order.begin(), order.end());
    std::vector<Split> patient_split(static_cast<std::size_t>(patients));
    for (int r = 0; r < patients; ++r)
      patient_split[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] =
          r < n_train ? Split::Train : (r < n_train + n_val ? Split::Val : Split::Test);

    for (int s = 0; s < config.n_per_class; ++s) {
      const int patient = s % patients;
      SyntheticSlideSpec spec;
      char id[32];
      std::snprintf(id, sizeof id, "%s_%03d", to_string(slide_class), s);
      spec.slide_id = id;
      std::snprintf(id, sizeof id, "%s_p%02d", to_string(slide_class), patient);
      spec.patient_id = id;
      spec.slide_size = config.slide_size;
      spec.slide_class = slide_class;
      spec.lesion_fraction = slide_class == SlideClass::Benign
                                 ? 0.0
                                 : rng.uniform(config.lesion_fraction_lo, config.lesion_fraction_hi);
      spec.background_fraction = config.background_fraction;
      spec.pen_marker = rng.bernoulli(config.pen_fraction);
      spec.seed = derive_seed(config.seed, "dataset/slide/" + spec.slide_id);
      spec.texture = config.texture;
      spec.tile_size = config.tile_size;
      spec.overlap = config.overlap;
      spec.min_tissue = config.min_tissue;

      ManifestEntry entry{spec.slide_id, "slides/" + spec.slide_id + ".png", slide_class,
                          spec.patient_id, spec.seed,
                          patient_split[static_cast<std::size_t>(patient)]};
      plan.specs.push_back(std::move(spec));
      plan.entries.push_back(std::move(entry));
    }
  }
  return plan;
}

std::string manifest_line(const ManifestEntry &e) {
  nlohmann::ordered_json j;
  j["slide_id"] = e.slide_id;
  j["path"] = e.path;
  j["class"] = to_string(e.slide_class);
  j["patient"] = e.patient;
  j["seed"] = e.seed;
  j["split"] = to_string(e.split);
  return j.dump();
}

DatasetPlan generate_dataset(const DatasetConfig &config, const std::filesystem::path &dir) {
  namespace fs = std::filesystem;
  DatasetPlan plan = plan_dataset(config);
  fs::create_directories(dir / "slides");
  fs::create_directories(dir / "truth");
  std::vector<SyntheticSlide> slides(plan.specs.size());
  const auto n = static_cast<std::ptrdiff_t>(plan.specs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) slides[i] = generate_slide(plan.specs[i]);

  std::ofstream manifest(dir / "manifest.jsonl", std::ios::trunc);
  for (std::size_t i = 0; i < plan.specs.size(); ++i) {
    const auto &e = plan.entries[i];
    write_png(dir / e.path, slides[i].image);
    std::ofstream truth(dir / "truth" / (e.slide_id + ".csv"), std::ios::trunc);
    truth << ground_truth_csv(slides[i].truth);
    manifest << manifest_line(e) << '\n';
  }
  if (!manifest) throw std::runtime_error("failed writing manifest");
  return plan;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    ManifestEntry e;
    e.slide_id = j.at("slide_id").get<std::string>();
    e.path = j.at("path").get<std::string>();
    e.slide_class = slide_class_from_string(j.at("class").get<std::string>());
    e.patient = j.at("patient").get<std::string>();
    e.seed = j.at("seed").get<std::uint64_t>();
    e.split = split_from_string(j.value("split", std::string("train")));
    entries.push_back(std::move(e));
  }
  return entries;
}

}  // namespace milpath
