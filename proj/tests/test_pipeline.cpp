// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <set>

#include "doctest.h"
#include "json.hpp"
#include "milpath/pipeline.hpp"
#include "milpath/rng.hpp"
#include "oracles.hpp"

using namespace milpath;

namespace {

// A few seconds of work end to end.
PipelineConfig tiny_config() {
  PipelineConfig c;
  c.train.epochs = 3;
  c.train.warmup_epochs = 2;
  c.feature_dim = 16;
  c.hidden = 8;
  c.budget = 6;
  c.pca_dim = 4;
  c.pretrain.epochs = 1;
  c.pretrain_slides_per_class = 1;
  c.seed = 5;
  return c;
}

const PreparedDataset &tiny_data() {
  static const PreparedDataset data = [] {
    DatasetConfig d;
    d.n_per_class = 5;
    d.patients_per_class = 5;
    d.slide_size = 160;
    d.seed = 3;
    return prepare_generated(plan_dataset(d), tiny_config().preproc);
  }();
  return data;
}

}  // namespace

TEST_CASE("variant table") {
  CHECK(variant_names() == std::vector<std::string>{"one-stage", "br-two-stage", "att-two-stage",
                                                    "att-no-dropout", "no-transfer",
                                                    "att-cluster-two-stage"});
  const auto one = variant_by_name("one-stage");
  CHECK_FALSE(one.two_stage);
  CHECK(one.method == SelectionMethod::None);
  CHECK(variant_by_name("br-two-stage").method == SelectionMethod::BlueRatio);
  CHECK_FALSE(variant_by_name("att-no-dropout").dropout);
  CHECK(variant_by_name("att-no-dropout").method == SelectionMethod::AttTopK);
  const auto nt = variant_by_name("no-transfer");
  CHECK_FALSE(nt.pretrain);
  CHECK(nt.method == SelectionMethod::AttCluster);
  const auto full = variant_by_name("att-cluster-two-stage");
  CHECK((full.two_stage && full.dropout && full.pretrain));
  CHECK_THROWS_WITH(variant_by_name("bogus"),
                    doctest::Contains("att-cluster-two-stage"));
  for (auto m : {SelectionMethod::None, SelectionMethod::BlueRatio, SelectionMethod::AttTopK,
                 SelectionMethod::AttCluster})
    CHECK(selection_method_from_string(to_string(m)) == m);
}

TEST_CASE("evaluation examples") {
  std::vector<SlideRecord> perfect;
  for (int i = 0; i < 9; ++i) perfect.push_back({"s" + std::to_string(i), i % 3, i % 3, false});
  const auto p = evaluate_predictions(perfect, 3);
  CHECK(p.accuracy == 1.0);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) CHECK(p.confusion[r][c] == (r == c ? 3 : 0));

  std::vector<SlideRecord> constant;
  for (int i = 0; i < 10; ++i) constant.push_back({"s", i < 5 ? 0 : (i < 8 ? 1 : 2), 1, false});
  const auto c = evaluate_predictions(constant, 3);
  CHECK(c.accuracy == doctest::Approx(0.3));
  for (int r = 0; r < 3; ++r) {
    CHECK(c.confusion[r][0] == 0);
    CHECK(c.confusion[r][2] == 0);
  }
  CHECK(c.confusion[0][1] == 5);

  Rng rng(4);
  std::vector<SlideRecord> random;
  for (int i = 0; i < 300; ++i)
    random.push_back({"s", i % 3, static_cast<int>(rng.below(3)), false});
  const auto r = evaluate_predictions(random, 3);
  CHECK(std::abs(r.accuracy - 1.0 / 3) <= 0.09);
  long total = 0, trace = 0;
  for (int a = 0; a < 3; ++a) {
    long row = 0;
    for (int b = 0; b < 3; ++b) {
      total += r.confusion[a][b];
      row += r.confusion[a][b];
    }
    trace += r.confusion[a][a];
    CHECK(row == 100);
  }
  CHECK(total == 300);
  CHECK(r.accuracy == static_cast<double>(trace) / total);
  CHECK_THROWS_WITH(evaluate_predictions({}, 3), "empty test set");
}

TEST_CASE("report serializers") {
  std::vector<SlideRecord> recs{{"a", 0, 0, true}, {"b", 2, 1, false}};
  const auto rep = evaluate_predictions(recs, 3);
  const auto j = nlohmann::json::parse(eval_report_json(rep));
  CHECK(j["accuracy"] == 0.5);
  CHECK(j["confusion"][2][1] == 1);
  CHECK(j["per_slide"][0]["flagged"] == true);
  CHECK(j["per_slide"][1]["slide_id"] == "b");
  const auto csv = confusion_csv(rep);
  CHECK(csv.rfind("truth,benign,low,high\n", 0) == 0);
  CHECK(ablation_csv(std::vector<AblationRow>{{"x", 1, 0.5}}).rfind("variant,seed,accuracy\n", 0) == 0);
}

TEST_CASE("slide preparation aligns scales and normalizes") {
  SyntheticSlideSpec spec;
  spec.slide_id = "p";
  spec.slide_class = SlideClass::High;
  spec.lesion_fraction = 0.3;
  spec.seed = 11;
  const auto slide = generate_slide(spec);
  const PreprocConfig cfg;
  const auto ref = reference_color_stats();
  const auto prep = prepare_slide(slide.image, "p", SlideClass::High, cfg, ref);
  REQUIRE_FALSE(prep.no_tissue());
  CHECK(prep.low.size() == prep.size());
  CHECK(prep.high.size() == prep.size());
  for (std::size_t i = 0; i < prep.size(); ++i) {
    CHECK(prep.high[i].width == 32);
    CHECK(prep.low[i].width == 16);
    CHECK(prep.low[i] == downsample(prep.high[i], 2));
    CHECK(prep.refs[i].tissue_fraction >= 0.8);
  }
  const auto again = prepare_slide(slide.image, "p", SlideClass::High, cfg, ref);
  CHECK(again.high == prep.high);
}

TEST_CASE("all-background slide is benign and flagged") {
  const RgbImage blank(256, 256, 240, 238, 230);
  const auto prep = prepare_slide(blank, "blank", SlideClass::Low, {}, reference_color_stats());
  CHECK(prep.no_tissue());
  TwoStageModel model;
  model.variant = "att-cluster-two-stage";
  ExtractorConfig ec;
  ec.input_size = 16;
  model.stage1 = init_mil_model(1, ec, 8, 2);
  ec.input_size = 32;
  model.stage2 = init_mil_model(2, ec, 8, 3);
  const auto p = predict(model, prep);
  CHECK(p.label == 0);
  CHECK(p.no_tissue);
  CHECK(p.selection.size() == 0);
  const std::vector<PreparedSlide> slides{prep};
  const auto rep = evaluate(model, slides);
  CHECK(rep.per_slide[0].flagged);
  CHECK_THROWS_WITH(predict(model, prep, 0), "empty selection budget");
}

TEST_CASE("training guards") {
  PreparedDataset empty;
  CHECK_THROWS_WITH(train_two_stage(empty, variant_by_name("one-stage"), tiny_config()),
                    "empty split");
  PipelineConfig bad = tiny_config();
  bad.budget = 0;
  CHECK_THROWS_WITH(validate(bad), "empty selection budget");
  const std::vector<std::uint64_t> two{1, 2};
  CHECK_THROWS(run_ablation_suite(tiny_data(), tiny_config(), two));
}

TEST_CASE("pretraining tiles come labelled by grade") {
  const auto tiles = pretraining_tiles(tiny_config(), Scale::High);
  REQUIRE_FALSE(tiles.tiles.empty());
  std::set<int> labels(tiles.labels.begin(), tiles.labels.end());
  CHECK(labels == std::set<int>{0, 1, 2});
  CHECK(tiles.tiles[0].width == 32);
  CHECK(pretraining_tiles(tiny_config(), Scale::Low).tiles[0].width == 16);
}

TEST_CASE("two-stage training, prediction and checkpoints") {
  const auto &data = tiny_data();
  REQUIRE_FALSE(data.test.empty());
  const auto cfg = tiny_config();
  TrainingCache cache;
  for (const auto &name : variant_names()) {
    CAPTURE(name);
    const auto variant = variant_by_name(name);
    StageLogs logs;
    const auto model = train_two_stage(data, variant, cfg, &logs, &cache);
    CHECK(model.variant == name);
    if (variant.two_stage) {
      REQUIRE(model.stage2.has_value());
      CHECK(model.stage2->classifier.classes() == 3);
      CHECK(logs.stage2.size() == 3);
      if (variant.method != SelectionMethod::BlueRatio) {
        CHECK(model.stage1.classifier.classes() == 2);
        CHECK(logs.stage1.size() == 3);
      }
    } else {
      CHECK_FALSE(model.stage2.has_value());
      CHECK(model.stage1.classifier.classes() == 3);
    }

    const auto before = instance_dropout_calls();
    const auto &slide = data.test.front();
    const auto p1 = predict(model, slide), p2 = predict(model, slide);
    CHECK(instance_dropout_calls() == before);
    CHECK(p1.probs == p2.probs);
    CHECK(p1.selection.indices == p2.selection.indices);
    if (variant.two_stage) {
      CHECK(p1.selection.size() == std::min<std::size_t>(cfg.budget, slide.size()));
      std::set<std::size_t> uniq(p1.selection.indices.begin(), p1.selection.indices.end());
      CHECK(uniq.size() == p1.selection.size());
      for (std::size_t i = 0; i < p1.selection.size(); ++i)
        CHECK(p1.selection.selected[i] == slide.refs[p1.selection.indices[i]]);
    }

    const auto dir = std::filesystem::temp_directory_path() / ("milpath_test_ckpt_" + name);
    std::filesystem::remove_all(dir);
    save_model(model, dir);
    CHECK(load_model(dir) == model);
    CHECK(std::filesystem::exists(dir / "model.json"));
    CHECK(std::filesystem::exists(dir / "stage2.milw") == variant.two_stage);
    std::filesystem::remove_all(dir);

    const auto report = evaluate(model, data.test);
    long total = 0;
    for (const auto &row : report.confusion)
      for (long v : row) total += v;
    CHECK(total == static_cast<long>(data.test.size()));
  }
}

TEST_CASE("training is reproducible end to end") {
  const auto &data = tiny_data();
  const auto variant = variant_by_name("att-cluster-two-stage");
  const auto a = train_two_stage(data, variant, tiny_config());
  const auto b = train_two_stage(data, variant, tiny_config());
  CHECK(a == b);
  CHECK(eval_report_json(evaluate(a, data.test)) == eval_report_json(evaluate(b, data.test)));
}

TEST_CASE("ablation suite on the tiny dataset") {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  AblationOptions opts;
  opts.variants = {"one-stage", "att-cluster-two-stage"};
  const auto r = run_ablation_suite(tiny_data(), tiny_config(), seeds, opts);
  CHECK(r.rows.size() == 6);
  CHECK(r.recall.size() == 3);
  for (const auto &row : r.recall) {
    CHECK(row.att_cluster >= 0.0);
    CHECK(row.att_cluster <= 1.0);
  }
  const auto means = mean_accuracy(r.rows);
  REQUIRE(means.size() == 2);
  CHECK(means[0].first == "one-stage");
  const auto again = run_ablation_suite(tiny_data(), tiny_config(), seeds, opts);
  CHECK(ablation_csv(again.rows) == ablation_csv(r.rows));
  CHECK(recall_csv(again.recall) == recall_csv(r.recall));
}
