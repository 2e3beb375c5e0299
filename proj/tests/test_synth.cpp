// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "doctest.h"
#include "milpath/preproc.hpp"
#include "milpath/rng.hpp"
#include "milpath/synth.hpp"
#include "oracles.hpp"

using namespace milpath;

namespace {
SyntheticSlideSpec spec_for(SlideClass c, std::uint64_t seed, double lesion = 0.3) {
  SyntheticSlideSpec s;
  s.slide_id = "t";
  s.slide_class = c;
  s.lesion_fraction = c == SlideClass::Benign ? 0.0 : lesion;
  s.seed = seed;
  return s;
}
}  // namespace

TEST_CASE("benign slides carry no lesion tiles") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const auto slide = generate_slide(spec_for(SlideClass::Benign, s));
    CHECK(slide.truth.lesion_count() == 0);
    CHECK(slide.truth.tissue_count() > 0);
  }
}

TEST_CASE("lesion fraction is honoured on the tile grid") {
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto spec = spec_for(SlideClass::Low, s, 0.2);
    spec.slide_size = 352;  // about a hundred tissue tiles
    spec.background_fraction = 0.2;
    const auto slide = generate_slide(spec);
    const double tissue = static_cast<double>(slide.truth.tissue_count());
    INFO("tissue tiles " << tissue);
    CHECK(std::abs(static_cast<double>(slide.truth.lesion_count()) - 0.2 * tissue) <= 2.0);
  }
}

TEST_CASE("generation is a pure function of the spec") {
  const auto a = generate_slide(spec_for(SlideClass::High, 5));
  const auto b = generate_slide(spec_for(SlideClass::High, 5));
  CHECK(a.image == b.image);
  CHECK(a.truth.labels == b.truth.labels);
  CHECK_FALSE(generate_slide(spec_for(SlideClass::High, 6)).image == a.image);
}

TEST_CASE("truth grid matches the preprocessing grid and never marks background as lesion") {
  for (std::uint64_t s = 0; s < 6; ++s) {
    auto spec = spec_for(static_cast<SlideClass>(s % 3), s);
    spec.pen_marker = s % 2 == 0;
    const auto slide = generate_slide(spec);
    const auto grid = extract_tile_grid(spec.slide_size, spec.slide_size, spec.tile_size, spec.overlap);
    CHECK(slide.truth.grid.origins == grid.origins);
    CHECK(slide.truth.labels.size() == grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i)
      if (slide.truth.labels[i] == TileLabel::Background) CHECK_FALSE(slide.truth.core[i]);
  }
}

TEST_CASE("lesion tiles have a higher mean blue ratio than benign tissue tiles") {
  double lesion = 0, benign = 0;
  int nl = 0, nb = 0;
  for (std::uint64_t s = 0; s < 8; ++s) {
    const auto spec = spec_for(s % 2 ? SlideClass::Low : SlideClass::High, s);
    const auto slide = generate_slide(spec);
    for (std::size_t i = 0; i < slide.truth.grid.size(); ++i) {
      const auto [x, y] = slide.truth.grid.origins[i];
      const double br = mean_blue_ratio(slide.image.crop(x, y, 32, 32));
      if (is_lesion(slide.truth.labels[i])) {
        lesion += br;
        ++nl;
      } else if (slide.truth.labels[i] == TileLabel::BenignTissue) {
        benign += br;
        ++nb;
      }
    }
  }
  REQUIRE(nl > 0);
  REQUIRE(nb > 0);
  CHECK(lesion / nl > benign / nb);
}

TEST_CASE("truth csv round trip") {
  const auto slide = generate_slide(spec_for(SlideClass::Low, 3));
  const auto back = ground_truth_from_csv(ground_truth_csv(slide.truth), slide.truth.grid);
  CHECK(back.labels == slide.truth.labels);
}

TEST_CASE("selection recall examples") {
  GroundTruth truth;
  truth.grid = extract_tile_grid(32 * 5, 32 * 4, 32, 0.0);
  truth.labels.assign(20, TileLabel::BenignTissue);
  truth.core.assign(20, false);
  std::vector<TileRef> lesions, others, all;
  for (std::size_t i = 0; i < 20; ++i) {
    const auto [x, y] = truth.grid.origins[i];
    TileRef r{"s", x, y, Scale::High, 1.0};
    if (i < 10) {
      truth.labels[i] = TileLabel::LowTexture;
      lesions.push_back(r);
    } else {
      others.push_back(r);
    }
    all.push_back(r);
  }
  CHECK(selection_recall(all, truth) == 1.0);
  CHECK(selection_recall(others, truth) == 0.0);
  std::vector<TileRef> half(lesions.begin(), lesions.begin() + 5);
  half.insert(half.end(), others.begin(), others.begin() + 3);
  CHECK(selection_recall(half, truth) == 0.5);
  GroundTruth none = truth;
  none.labels.assign(20, TileLabel::BenignTissue);
  CHECK_THROWS_WITH(selection_recall(all, none), "no positives");
}

TEST_CASE("dataset plan: balance, patient-disjoint splits, ratios") {
  DatasetConfig cfg;
  const auto plan = plan_dataset(cfg);
  REQUIRE(plan.entries.size() == 120);
  std::map<SlideClass, int> per_class;
  std::map<Split, std::set<std::string>> patients;
  std::map<Split, int> per_split;
  for (const auto &e : plan.entries) {
    ++per_class[e.slide_class];
    patients[e.split].insert(e.patient);
    ++per_split[e.split];
  }
  for (auto c : {SlideClass::Benign, SlideClass::Low, SlideClass::High}) CHECK(per_class[c] == 40);
  for (auto a : {Split::Train, Split::Val, Split::Test})
    for (auto b : {Split::Train, Split::Val, Split::Test}) {
      if (a == b) continue;
      for (const auto &p : patients[a]) CHECK(patients[b].count(p) == 0);
    }
  // one patient holds 4 slides per class here
  const int slack = 3 * 4;
  CHECK(std::abs(per_split[Split::Train] - 72) <= slack);
  CHECK(std::abs(per_split[Split::Val] - 24) <= slack);
  CHECK(std::abs(per_split[Split::Test] - 24) <= slack);
  const auto again = plan_dataset(cfg);
  for (std::size_t i = 0; i < plan.entries.size(); ++i)
    CHECK(manifest_line(again.entries[i]) == manifest_line(plan.entries[i]));
}

TEST_CASE("invalid dataset configs are rejected") {
  DatasetConfig cfg;
  cfg.n_per_class = 0;
  CHECK_THROWS(validate(cfg));
  cfg = {};
  cfg.patients_per_class = 2;
  CHECK_THROWS(validate(cfg));
}

TEST_CASE("generated dataset on disk matches its manifest") {
  DatasetConfig cfg;
  cfg.n_per_class = 3;
  cfg.patients_per_class = 3;
  cfg.slide_size = 128;
  const auto dir = std::filesystem::temp_directory_path() / "milpath_test_dataset";
  std::filesystem::remove_all(dir);
  const auto plan = generate_dataset(cfg, dir);
  const auto entries = read_manifest(dir / "manifest.jsonl");
  REQUIRE(entries.size() == 9);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    CHECK(entries[i].slide_id == plan.entries[i].slide_id);
    CHECK(entries[i].seed == plan.entries[i].seed);
    CHECK(entries[i].split == plan.entries[i].split);
    const auto img = read_png(dir / entries[i].path);
    CHECK(img == generate_slide(plan.specs[i]).image);
    CHECK(std::filesystem::exists(dir / "truth" / (entries[i].slide_id + ".csv")));
  }
  const auto line = manifest_line(entries[0]);
  CHECK(line.find("\"slide_id\"") < line.find("\"path\""));
  CHECK(line.find("\"class\"") != std::string::npos);
  CHECK(line.find("\"patient\"") != std::string::npos);
  CHECK(line.find("\"seed\"") != std::string::npos);
  std::filesystem::remove_all(dir);
}
