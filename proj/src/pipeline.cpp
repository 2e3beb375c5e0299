// SPDX-License-Identifier: Apache-2.0
#include "milpath/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "milpath/kernels.hpp"
#include "milpath/rng.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

void validate(const PreprocConfig &c) {
  if (c.tile_size < 8) throw std::invalid_argument("tile_size must be >= 8");
  if (c.low_factor < 1 || c.tile_size % c.low_factor != 0)
    throw std::invalid_argument("tile_size must be divisible by low_factor");
  if ((c.tile_size / c.low_factor) % 8 != 0)
    throw std::invalid_argument("LOW tile size must be divisible by 8");
  if (!(c.overlap >= 0.0 && c.overlap < 1.0)) throw std::invalid_argument("overlap must be in [0, 1)");
  if (!(c.min_tissue >= 0.0 && c.min_tissue <= 1.0))
    throw std::invalid_argument("min_tissue must be in [0, 1]");
  if (!(c.mask.hue_lo >= 0.0 && c.mask.hue_lo < c.mask.hue_hi && c.mask.hue_hi <= 1.0))
    throw std::invalid_argument("hue band must satisfy 0 <= lo < hi <= 1");
  if (c.mask.morph_radius < 0) throw std::invalid_argument("morph_radius must be >= 0");
}

namespace {

// Selected pixels gathered into a 1 x n image so color_stats can summarize them.
RgbImage gather_pixels(const RgbImage &slide, const TissueMask &mask, double max_blue_ratio) {
  std::vector<std::uint8_t> px;
  for (std::size_t i = 0; i < slide.pixel_count(); ++i) {
    if (!mask.bits[i]) continue;
    const auto *p = &slide.data[i * 3];
    if (max_blue_ratio > 0.0 && blue_ratio(p[0], p[1], p[2]) > max_blue_ratio) continue;
    px.insert(px.end(), p, p + 3);
  }
  RgbImage out(static_cast<int>(px.size() / 3), 1);
  out.data = std::move(px);
  return out;
}

}  // namespace

ColorStats slide_color_stats(const RgbImage &slide, const TissueMask &mask,
                             double max_blue_ratio) {
  RgbImage px = gather_pixels(slide, mask, max_blue_ratio);
  if (px.empty()) px = gather_pixels(slide, mask, 0.0);
  return px.empty() ? color_stats(slide) : color_stats(px);
}

ColorStats reference_color_stats(const TextureParams &texture, int slide_size,
                                 double max_blue_ratio) {
  SyntheticSlideSpec spec;
  spec.slide_id = "reference";
  spec.slide_size = slide_size;
  spec.slide_class = SlideClass::Low;
  spec.lesion_fraction = 0.3;
  spec.seed = derive_seed(0, "reference-slide");
  spec.texture = texture;
  spec.texture.stain_jitter = 0.0;
  const auto slide = generate_slide(spec);
  return slide_color_stats(slide.image, tissue_mask(slide.image, MaskParams{}), max_blue_ratio);
}

PreparedSlide prepare_slide(const RgbImage &slide, const std::string &slide_id, SlideClass label,
                            const PreprocConfig &config, const ColorStats &reference) {
  validate(config);
  PreparedSlide out;
  out.slide_id = slide_id;
  out.label = label;
  const TissueMask mask = tissue_mask(slide, config.mask);
  const TileGrid grid =
      extract_tile_grid(slide.width, slide.height, config.tile_size, config.overlap);
  out.refs = filter_tiles(grid, mask, config.min_tissue, slide_id);
  if (out.refs.empty()) return out;

  const RgbImage normalized =
      config.normalize
          ? reinhard_normalize(slide, slide_color_stats(slide, mask, config.stats_max_blue_ratio),
                               reference)
          : slide;
  const int f = config.low_factor;
  const int low_size = config.tile_size / f;
  const bool whole = slide.width % f == 0 && slide.height % f == 0;
  const RgbImage low_slide = whole ? downsample(normalized, f) : RgbImage{};
  for (const auto &ref : out.refs) {
    out.high.push_back(normalized.crop(ref.x, ref.y, config.tile_size, config.tile_size));
    out.low.push_back(whole ? low_slide.crop(ref.x / f, ref.y / f, low_size, low_size)
                            : downsample(out.high.back(), f));
  }
  return out;
}


namespace {

void add_prepared(PreparedDataset &data, Split split, PreparedSlide slide) {
  switch (split) {
    case Split::Train: data.train.push_back(std::move(slide)); break;
    case Split::Val: data.val.push_back(std::move(slide)); break;
    case Split::Test: data.test.push_back(std::move(slide)); break;
  }
}

}  // namespace

PreparedDataset prepare_generated(const DatasetPlan &plan, const PreprocConfig &config) {
  validate(config);
  if (plan.specs.empty()) return {};
  const ColorStats reference =
      reference_color_stats(plan.specs.front().texture, plan.specs.front().slide_size,
                            config.stats_max_blue_ratio);
  std::vector<PreparedSlide> prepared(plan.specs.size());
  const auto n = static_cast<std::ptrdiff_t>(plan.specs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto &spec = plan.specs[static_cast<std::size_t>(i)];
    auto slide = generate_slide(spec);
    prepared[static_cast<std::size_t>(i)] =
        prepare_slide(slide.image, spec.slide_id, spec.slide_class, config, reference);
    prepared[static_cast<std::size_t>(i)].truth = std::move(slide.truth);
  }
  PreparedDataset data;
  for (std::size_t i = 0; i < prepared.size(); ++i)
    add_prepared(data, plan.entries[i].split, std::move(prepared[i]));
  return data;
}

PreparedDataset prepare_from_manifest(const std::filesystem::path &manifest,
                                      const PreprocConfig &config) {
  validate(config);
  const auto entries = read_manifest(manifest);
  const auto dir = manifest.parent_path();
  std::vector<PreparedSlide> prepared(entries.size());
  std::vector<RgbImage> images(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) images[i] = read_png(dir / entries[i].path);
  if (entries.empty()) return {};
  const ColorStats reference = reference_color_stats(TextureParams{}, images.front().width, config.stats_max_blue_ratio);
  const auto n = static_cast<std::ptrdiff_t>(entries.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto &e = entries[static_cast<std::size_t>(i)];
    prepared[static_cast<std::size_t>(i)] =
        prepare_slide(images[static_cast<std::size_t>(i)], e.slide_id, e.slide_class, config,
                      reference);
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto truth_path = dir / "truth" / (entries[i].slide_id + ".csv");
    if (!std::filesystem::exists(truth_path)) continue;
    std::ifstream in(truth_path);
    std::stringstream buf;
    buf << in.rdbuf();
    const auto grid = extract_tile_grid(images[i].width, images[i].height, config.tile_size,
                                        config.overlap);
    prepared[i].truth = ground_truth_from_csv(buf.str(), grid);
  }
  PreparedDataset data;
  for (std::size_t i = 0; i < entries.size(); ++i)
    add_prepared(data, entries[i].split, std::move(prepared[i]));
  return data;
}

const char *to_string(SelectionMethod m) {
  switch (m) {
    case SelectionMethod::None: return "none";
    case SelectionMethod::BlueRatio: return "blue-ratio";
    case SelectionMethod::AttTopK: return "att-topk";
    case SelectionMethod::AttCluster: return "att-cluster";
  }
  return "?";
}

SelectionMethod selection_method_from_string(const std::string &s) {
  if (s == "none") return SelectionMethod::None;
  if (s == "blue-ratio") return SelectionMethod::BlueRatio;
  if (s == "att-topk") return SelectionMethod::AttTopK;
  if (s == "att-cluster") return SelectionMethod::AttCluster;
  throw std::invalid_argument("unknown selection method '" + s +
                              "' (valid: none, blue-ratio, att-topk, att-cluster)");
}

const std::vector<std::string> &variant_names() {
  static const std::vector<std::string> names{"one-stage",      "br-two-stage",
                                              "att-two-stage",  "att-no-dropout",
                                              "no-transfer",    "att-cluster-two-stage"};
  return names;
}

VariantSpec variant_by_name(const std::string &name) {
  if (name == "one-stage") return {name, false, true, true, SelectionMethod::None};
  if (name == "br-two-stage") return {name, true, true, true, SelectionMethod::BlueRatio};
  if (name == "att-two-stage") return {name, true, true, true, SelectionMethod::AttTopK};
  if (name == "att-no-dropout") return {name, true, false, true, SelectionMethod::AttTopK};
  if (name == "no-transfer") return {name, true, true, false, SelectionMethod::AttCluster};
  if (name == "att-cluster-two-stage")
    return {name, true, true, true, SelectionMethod::AttCluster};
  std::string valid;
  for (const auto &n : variant_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw std::invalid_argument("unknown variant '" + name + "' (valid: " + valid + ")");
}

void validate(const PipelineConfig &c) {
  validate(c.train);
  validate(c.preproc);
  if (!(c.stage2_dropout_rate >= 0.0 && c.stage2_dropout_rate < 1.0))
    throw std::invalid_argument("stage2_dropout_rate must be in [0, 1)");
  if (c.feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
  if (c.hidden < 1) throw std::invalid_argument("hidden must be >= 1");
  if (c.budget < 1) throw std::invalid_argument("empty selection budget");
  if (c.pca_dim < 1) throw std::invalid_argument("pca_dim must be >= 1");
  if (c.clusters < 1) throw std::invalid_argument("clusters must be >= 1");
  if (c.pretrain_slides_per_class < 1)
    throw std::invalid_argument("pretrain_slides_per_class must be >= 1");
}

namespace {

ExtractorConfig extractor_config(const PipelineConfig &config, Scale scale) {
  ExtractorConfig ec;
  ec.input_size = scale == Scale::High ? config.preproc.tile_size
                                       : config.preproc.tile_size / config.preproc.low_factor;
  ec.feature_dim = config.feature_dim;
  return ec;
}

int stage1_label(SlideClass c) { return c == SlideClass::Benign ? 0 : 1; }

Bag slide_bag(const PreparedSlide &slide, Scale scale, int label) {
  Bag bag;
  bag.slide_id = slide.slide_id;
  bag.label = label;
  bag.instances = scale == Scale::High ? slide.high : slide.low;
  bag.tile_refs = slide.refs;
  for (auto &ref : bag.tile_refs) ref.scale = scale;
  return bag;
}

std::vector<Bag> stage1_bags(std::span<const PreparedSlide> slides, int classes) {
  std::vector<Bag> bags;
  for (const auto &s : slides) {
    if (s.no_tissue()) continue;
    const int label = classes == 2 ? stage1_label(s.label) : static_cast<int>(s.label);
    bags.push_back(slide_bag(s, Scale::Low, label));
  }
  return bags;
}

}  // namespace

LabeledTiles pretraining_tiles(const PipelineConfig &config, Scale scale) {
  validate(config);
  const int per_class = config.pretrain_slides_per_class;
  std::vector<SyntheticSlideSpec> specs;
  for (int cls = 0; cls < kSlideClasses; ++cls)
    for (int i = 0; i < per_class; ++i) {
      SyntheticSlideSpec spec;
      spec.slide_class = static_cast<SlideClass>(cls);
      spec.slide_id = std::string("pretrain_") + to_string(spec.slide_class) + "_" +
                      std::to_string(i);
      spec.lesion_fraction = spec.slide_class == SlideClass::Benign ? 0.0 : 0.4;
      spec.seed = derive_seed(config.seed, "pretrain/slide/" + spec.slide_id);
      spec.texture = config.texture;
      spec.texture.core_fraction = 1.0;
      spec.tile_size = config.preproc.tile_size;
      spec.overlap = config.preproc.overlap;
      spec.min_tissue = config.preproc.min_tissue;
      specs.push_back(std::move(spec));
    }
  const ColorStats reference = reference_color_stats(config.texture, specs.front().slide_size,
                                                     config.preproc.stats_max_blue_ratio);
  std::vector<PreparedSlide> prepared(specs.size());
  const auto n = static_cast<std::ptrdiff_t>(specs.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto &spec = specs[static_cast<std::size_t>(i)];
    auto slide = generate_slide(spec);
    auto &p = prepared[static_cast<std::size_t>(i)];
    p = prepare_slide(slide.image, spec.slide_id, spec.slide_class, config.preproc, reference);
    p.truth = std::move(slide.truth);
  }
  LabeledTiles data;
  for (const auto &p : prepared)
    for (std::size_t t = 0; t < p.size(); ++t) {
      const TileLabel label = p.truth->at(p.refs[t].x, p.refs[t].y);
      if (label == TileLabel::Background) continue;
      data.tiles.push_back(scale == Scale::High ? p.high[t] : p.low[t]);
      data.labels.push_back(static_cast<int>(label) - 1);
    }
  return data;
}

PretrainedExtractors pretrain_extractors(const PipelineConfig &config) {
  PretrainedExtractors out;
  for (Scale scale : {Scale::Low, Scale::High}) {
    const std::string tag = to_string(scale);
    PretrainConfig pc = config.pretrain;
    pc.seed = derive_seed(config.seed, "pretrain/fit/" + tag);
    const auto init =
        init_extractor(derive_seed(config.seed, "pretrain/init/" + tag), extractor_config(config, scale));
    auto trained = pretrain_extractor(pretraining_tiles(config, scale), init, pc);
    (scale == Scale::High ? out.high : out.low) = std::move(trained);
  }
  return out;
}

const PretrainedExtractors &TrainingCache::pretrained(const PipelineConfig &config) {
  if (!pretrained_) pretrained_ = pretrain_extractors(config);
  return *pretrained_;
}

const FitResult &TrainingCache::stage1(const PreparedDataset &data, const PipelineConfig &config,
                                       bool pretrain, double dropout_rate, int classes) {
  for (const auto &e : stage1_)
    if (e.pretrain == pretrain && e.dropout_rate == dropout_rate && e.classes == classes)
      return e.result;

  MilModel init = init_mil_model(derive_seed(config.seed, "stage1/init"),
                                 extractor_config(config, Scale::Low),
                                 static_cast<std::size_t>(config.hidden),
                                 static_cast<std::size_t>(classes));
  if (pretrain) init.extractor = pretrained(config).low;
  const auto train = stage1_bags(data.train, classes);
  const auto val = stage1_bags(data.val, classes);
  TrainConfig tc = config.train;
  tc.dropout_rate = dropout_rate;
  tc.seed = derive_seed(config.seed, "stage1/fit");
  stage1_.push_back({pretrain, dropout_rate, classes, fit(train, val, init, tc, mean_rgb(train))});
  return stage1_.back().result;
}

SelectionResult select_regions(const TwoStageModel &model, const PreparedSlide &slide,
                               const MilOutput &stage1_out, std::size_t budget) {
  if (budget == 0) throw std::invalid_argument("empty selection budget");
  switch (model.method) {
    case SelectionMethod::BlueRatio: {
      SelectionResult r;
      r.indices = top_blue_ratio_indices(slide.high, std::min(budget, slide.size()));
      for (auto i : r.indices) r.selected.push_back(slide.refs[i]);
      r.alpha = stage1_out.alpha;
      return r;
    }
    case SelectionMethod::AttTopK:
      return select_att_top_count(slide.refs, stage1_out.alpha, budget);
    case SelectionMethod::AttCluster: {
      ClusterSelectionParams p;
      p.pca_dim = model.pca_dim;
      p.clusters = model.clusters;
      p.total = budget;
      p.seed = derive_seed(model.seed, "select/" + slide.slide_id);
      return select_att_cluster(slide.refs, stage1_out.alpha, stage1_out.features, p);
    }
    case SelectionMethod::None: break;
  }
  throw std::logic_error("selection requested for a one-stage model");
}

namespace {

// Stage-1 pass for selection. Blue-ratio selection does not use stage 1.
MilOutput screen(const TwoStageModel &model, const PreparedSlide &slide) {
  if (model.method == SelectionMethod::BlueRatio) return {};
  return mil_forward(slide_bag(slide, Scale::Low, 0), model.stage1);
}

Bag selected_bag(const PreparedSlide &slide, const SelectionResult &sel) {
  Bag bag;
  bag.slide_id = slide.slide_id;
  bag.label = static_cast<int>(slide.label);
  for (auto i : sel.indices) {
    bag.instances.push_back(slide.high[i]);
    TileRef ref = slide.refs[i];
    ref.scale = Scale::High;
    bag.tile_refs.push_back(ref);
  }
  return bag;
}

std::vector<Bag> stage2_bags(const TwoStageModel &model, std::span<const PreparedSlide> slides) {
  std::vector<Bag> bags(slides.size());
  const auto n = static_cast<std::ptrdiff_t>(slides.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto &s = slides[static_cast<std::size_t>(i)];
    if (s.no_tissue()) continue;
    bags[static_cast<std::size_t>(i)] = selected_bag(s, select_regions(model, s, screen(model, s), model.budget));
  }
  std::erase_if(bags, [](const Bag &b) { return b.size() == 0; });
  return bags;
}

}  // namespace

TwoStageModel train_two_stage(const PreparedDataset &data, const VariantSpec &variant,
                              const PipelineConfig &config, StageLogs *logs,
                              TrainingCache *cache) {
  validate(config);
  if (data.train.empty() || data.val.empty() || data.test.empty())
    throw std::invalid_argument("empty split");
  TrainingCache local;
  TrainingCache &c = cache ? *cache : local;

  TwoStageModel model;
  model.variant = variant.name;
  model.method = variant.two_stage ? variant.method : SelectionMethod::None;
  model.budget = config.budget;
  model.pca_dim = config.pca_dim;
  model.clusters = config.clusters;
  model.seed = config.seed;

  const double rate = variant.dropout ? config.train.dropout_rate : 0.0;
  if (!variant.two_stage) {
    const auto &r = c.stage1(data, config, variant.pretrain, rate, kSlideClasses);
    model.stage1 = r.model;
    if (logs) logs->stage1 = r.log;
    return model;
  }
  if (variant.method != SelectionMethod::BlueRatio) {
    const auto &r = c.stage1(data, config, variant.pretrain, rate, 2);
    model.stage1 = r.model;
    if (logs) logs->stage1 = r.log;
  }

  MilModel init = init_mil_model(derive_seed(config.seed, "stage2/init"),
                                 extractor_config(config, Scale::High),
                                 static_cast<std::size_t>(config.hidden), kSlideClasses);
  if (variant.pretrain) init.extractor = c.pretrained(config).high;
  const auto train = stage2_bags(model, data.train);
  const auto val = stage2_bags(model, data.val);
  TrainConfig tc = config.train;
  tc.dropout_rate = config.stage2_dropout_rate;
  tc.seed = derive_seed(config.seed, "stage2/fit");
  auto r = fit(train, val, init, tc, mean_rgb(train));
  model.stage2 = std::move(r.model);
  if (logs) logs->stage2 = std::move(r.log);
  return model;
}

Prediction predict(const TwoStageModel &model, const PreparedSlide &slide,
                   std::optional<std::size_t> budget_override) {
  const std::size_t budget = budget_override.value_or(model.budget);
  if (budget == 0) throw std::invalid_argument("empty selection budget");
  Prediction out;
  if (slide.no_tissue()) {
    out.no_tissue = true;
    out.label = static_cast<int>(SlideClass::Benign);
    return out;
  }
  if (!model.stage2) {
    auto r = mil_forward(slide_bag(slide, Scale::Low, 0), model.stage1);
    out.label = argmax(r.probs);
    out.probs = std::move(r.probs);
    out.alpha = std::move(r.alpha);
    return out;
  }
  const MilOutput s1 = screen(model, slide);
  out.alpha = s1.alpha;
  out.selection = select_regions(model, slide, s1, budget);
  auto r = mil_forward(selected_bag(slide, out.selection), *model.stage2);
  out.label = argmax(r.probs);
  out.probs = std::move(r.probs);
  return out;
}

EvalReport evaluate_predictions(std::span<const SlideRecord> records, int classes) {
  if (records.empty()) throw std::invalid_argument("empty test set");
  EvalReport report;
  report.confusion.assign(static_cast<std::size_t>(classes),
                          std::vector<long>(static_cast<std::size_t>(classes), 0));
  long correct = 0;
  for (const auto &r : records) {
    if (r.truth < 0 || r.truth >= classes || r.prediction < 0 || r.prediction >= classes)
      throw std::invalid_argument("class index out of range for " + r.slide_id);
    ++report.confusion[static_cast<std::size_t>(r.truth)][static_cast<std::size_t>(r.prediction)];
    correct += r.truth == r.prediction;
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  report.per_slide.assign(records.begin(), records.end());
  return report;
}

EvalReport evaluate(const TwoStageModel &model, std::span<const PreparedSlide> slides,
                    std::vector<Prediction> *predictions) {
  if (slides.empty()) throw std::invalid_argument("empty test set");
  std::vector<Prediction> preds(slides.size());
  const auto n = static_cast<std::ptrdiff_t>(slides.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    preds[static_cast<std::size_t>(i)] = predict(model, slides[static_cast<std::size_t>(i)]);
  std::vector<SlideRecord> records;
  for (std::size_t i = 0; i < slides.size(); ++i)
    records.push_back({slides[i].slide_id, static_cast<int>(slides[i].label), preds[i].label,
                       preds[i].no_tissue});
  if (predictions) *predictions = std::move(preds);
  return evaluate_predictions(records, kSlideClasses);
}

std::string eval_report_json(const EvalReport &report) {
  nlohmann::ordered_json j;
  j["accuracy"] = report.accuracy;
  std::vector<std::string> classes;
  for (std::size_t c = 0; c < report.confusion.size(); ++c)
    classes.push_back(to_string(static_cast<SlideClass>(c)));
  j["classes"] = classes;
  j["confusion"] = report.confusion;
  auto per = nlohmann::ordered_json::array();
  for (const auto &r : report.per_slide) {
    nlohmann::ordered_json e;
    e["slide_id"] = r.slide_id;
    e["truth"] = to_string(static_cast<SlideClass>(r.truth));
    e["prediction"] = to_string(static_cast<SlideClass>(r.prediction));
    e["flagged"] = r.flagged;
    per.push_back(std::move(e));
  }
  j["per_slide"] = std::move(per);
  return j.dump(2) + "\n";
}

std::string confusion_csv(const EvalReport &report) {
  std::ostringstream out;
  out << "truth";
  for (std::size_t c = 0; c < report.confusion.size(); ++c)
    out << ',' << to_string(static_cast<SlideClass>(c));
  out << '\n';
  for (std::size_t r = 0; r < report.confusion.size(); ++r) {
    out << to_string(static_cast<SlideClass>(r));
    for (long v : report.confusion[r]) out << ',' << v;
    out << '\n';
  }
  return out.str();
}

double mean_selection_recall(const TwoStageModel &model, std::span<const PreparedSlide> slides) {
  double sum = 0.0;
  std::size_t count = 0;
  for (const auto &s : slides) {
    if (s.label == SlideClass::Benign || !s.truth || s.no_tissue()) continue;
    if (s.truth->lesion_count() == 0) continue;
    const auto sel = select_regions(model, s, screen(model, s), model.budget);
    sum += selection_recall(sel, *s.truth);
    ++count;
  }
  if (count == 0) throw std::invalid_argument("no positives");
  return sum / static_cast<double>(count);
}

AblationResult run_ablation_suite(const PreparedDataset &data, const PipelineConfig &config,
                                  std::span<const std::uint64_t> seeds,
                                  const AblationOptions &options) {
  if (seeds.size() < 3) throw std::invalid_argument("ablation needs at least 3 seeds");
  AblationResult result;
  for (std::uint64_t seed : seeds) {
    PipelineConfig cfg = config;
    cfg.seed = seed;
    TrainingCache cache;
    for (const auto &name : options.variants) {
      const auto model = train_two_stage(data, variant_by_name(name), cfg, nullptr, &cache);
      result.rows.push_back({name, seed, evaluate(model, data.test).accuracy});
    }
    if (!options.measure_recall) continue;
    TwoStageModel probe;
    probe.budget = cfg.budget;
    probe.pca_dim = cfg.pca_dim;
    probe.clusters = cfg.clusters;
    probe.seed = seed;
    RecallRow row{seed, 0.0, 0.0, 0.0};
    probe.stage1 = cache.stage1(data, cfg, true, cfg.train.dropout_rate, 2).model;
    probe.method = SelectionMethod::AttCluster;
    row.att_cluster = mean_selection_recall(probe, data.test);
    probe.method = SelectionMethod::AttTopK;
    row.att_topk = mean_selection_recall(probe, data.test);
    probe.stage1 = cache.stage1(data, cfg, true, 0.0, 2).model;
    row.no_dropout_topk = mean_selection_recall(probe, data.test);
    result.recall.push_back(row);
  }
  return result;
}

std::string ablation_csv(std::span<const AblationRow> rows) {
  std::ostringstream out;
  out << "variant,seed,accuracy\n" << std::setprecision(17);
  for (const auto &r : rows) out << r.variant << ',' << r.seed << ',' << r.accuracy << '\n';
  return out.str();
}

std::string recall_csv(std::span<const RecallRow> rows) {
  std::ostringstream out;
  out << "seed,att_cluster,att_topk,no_dropout_topk\n" << std::setprecision(17);
  for (const auto &r : rows)
    out << r.seed << ',' << r.att_cluster << ',' << r.att_topk << ',' << r.no_dropout_topk << '\n';
  return out.str();
}

std::vector<std::pair<std::string, double>> mean_accuracy(std::span<const AblationRow> rows) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto &name : variant_names()) {
    double sum = 0.0;
    int n = 0;
    for (const auto &r : rows)
      if (r.variant == name) {
        sum += r.accuracy;
        ++n;
      }
    if (n) out.emplace_back(name, sum / n);
  }
  return out;
}

void save_model(const TwoStageModel &model, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json j;
  j["variant"] = model.variant;
  j["selection_method"] = to_string(model.method);
  j["budget"] = model.budget;
  j["pca_dim"] = model.pca_dim;
  j["clusters"] = model.clusters;
  j["seed"] = model.seed;
  const bool has_stage1 = model.stage1.classifier.classes() > 0;
  j["stage1"] = has_stage1 ? nlohmann::ordered_json("stage1.milw") : nlohmann::ordered_json();
  j["stage2"] = model.stage2 ? nlohmann::ordered_json("stage2.milw") : nlohmann::ordered_json();
  if (has_stage1) write_tensors(dir / "stage1.milw", to_named_tensors(model.stage1));
  if (model.stage2) write_tensors(dir / "stage2.milw", to_named_tensors(*model.stage2));
  std::ofstream out(dir / "model.json", std::ios::trunc);
  out << j.dump(2) << '\n';
  if (!out) throw std::runtime_error("failed writing " + (dir / "model.json").string());
}

TwoStageModel load_model(const std::filesystem::path &dir) {
  std::ifstream in(dir / "model.json");
  if (!in) throw std::runtime_error("cannot open " + (dir / "model.json").string());
  const auto j = nlohmann::json::parse(in);
  TwoStageModel model;
  model.variant = j.at("variant").get<std::string>();
  model.method = selection_method_from_string(j.at("selection_method").get<std::string>());
  model.budget = j.at("budget").get<std::size_t>();
  model.pca_dim = j.at("pca_dim").get<std::size_t>();
  model.clusters = j.at("clusters").get<std::size_t>();
  model.seed = j.at("seed").get<std::uint64_t>();
  if (!j.at("stage1").is_null())
    model.stage1 = mil_model_from_tensors(read_tensors(dir / j["stage1"].get<std::string>()));
  if (!j.at("stage2").is_null())
    model.stage2 = mil_model_from_tensors(read_tensors(dir / j["stage2"].get<std::string>()));
  return model;
}

}  // namespace milpath
