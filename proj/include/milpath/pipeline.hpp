// SPDX-License-Identifier: Apache-2.0
//
// Two-stage screening/grading pipeline and its ablation variants.
//
// Stage 1 is a binary MIL model over LOW-scale tiles. Its attention (and,
// for cluster selection, its instance features) picks a fixed budget of
// regions per slide, and stage 2 grades the slide from the HIGH-scale tiles
// at those regions only.
#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milpath/extractor.hpp"
#include "milpath/mil.hpp"
#include "milpath/preproc.hpp"
#include "milpath/selection.hpp"
#include "milpath/synth.hpp"

namespace milpath {

struct PreprocConfig {
  int tile_size = 32;  // HIGH-scale pixels
  double overlap = 0.125;
  double min_tissue = 0.8;
  MaskParams mask{};
  int low_factor = 2;  // LOW = HIGH downsampled by this factor
  bool normalize = true;
  // Pixels with a blue ratio above this are treated as nuclei and left out of
  // the slide's normalization statistics; 0 keeps every tissue pixel.
  double stats_max_blue_ratio = 28.0;
};

void validate(const PreprocConfig &config);

/// One slide cut into aligned LOW and HIGH tiles. refs[i], low[i] and high[i]
/// all describe the same region.
struct PreparedSlide {
  std::string slide_id;
  SlideClass label = SlideClass::Benign;
  std::vector<TileRef> refs;
  std::vector<RgbImage> low;
  std::vector<RgbImage> high;
  std::optional<GroundTruth> truth;

  std::size_t size() const { return refs.size(); }
  bool no_tissue() const { return refs.empty(); }
};

/// Colour statistics of the tissue pixels of `slide` that pass the
/// blue-ratio cutoff. Falls back to all tissue pixels, then to the whole slide.
ColorStats slide_color_stats(const RgbImage &slide, const TissueMask &mask,
                             double max_blue_ratio);

/// Normalization target: slide_color_stats of a fixed synthetic reference slide.
ColorStats reference_color_stats(const TextureParams &texture = {}, int slide_size = 256,
                                 double max_blue_ratio = PreprocConfig{}.stats_max_blue_ratio);

/// Mask on the raw slide, Reinhard normalization of the whole slide using
/// slide_color_stats as the source statistics, then tiling at both scales.
PreparedSlide prepare_slide(const RgbImage &slide, const std::string &slide_id, SlideClass label,
                            const PreprocConfig &config, const ColorStats &reference);

struct PreparedDataset {
  std::vector<PreparedSlide> train;
  std::vector<PreparedSlide> val;
  std::vector<PreparedSlide> test;
};

/// Generates the planned slides in memory and prepares them, keeping truth.
PreparedDataset prepare_generated(const DatasetPlan &plan, const PreprocConfig &config);
/// Reads slides (and truth CSVs when present) listed in a manifest.
PreparedDataset prepare_from_manifest(const std::filesystem::path &manifest,
                                      const PreprocConfig &config);

enum class SelectionMethod { None, BlueRatio, AttTopK, AttCluster };

const char *to_string(SelectionMethod m);
SelectionMethod selection_method_from_string(const std::string &s);

struct VariantSpec {
  std::string name;
  bool two_stage = true;
  bool dropout = true;   // instance dropout while training stage 1
  bool pretrain = true;  // start extractors from pretrained weights
  SelectionMethod method = SelectionMethod::AttCluster;
};

/// All variant names in ablation-table order.
const std::vector<std::string> &variant_names();
/// Throws std::invalid_argument listing the valid names.
VariantSpec variant_by_name(const std::string &name);

struct PipelineConfig {
  TrainConfig train{};               // shared by both stages
  double stage2_dropout_rate = 0.0;  // instance dropout while training stage 2
  int feature_dim = 64;
  int hidden = 32;
  std::size_t budget = 16;
  std::size_t pca_dim = 8;
  std::size_t clusters = 4;
  PretrainConfig pretrain{};
  int pretrain_slides_per_class = 6;
  std::uint64_t seed = 0;
  PreprocConfig preproc{};
  TextureParams texture{};  // used to synthesize the pretraining slides
};

void validate(const PipelineConfig &config);

struct TwoStageModel {
  std::string variant;
  MilModel stage1;                // 2 classes; 3 for the one-stage variant
  std::optional<MilModel> stage2;  // absent for one-stage
  SelectionMethod method = SelectionMethod::AttCluster;
  std::size_t budget = 16;
  std::size_t pca_dim = 8;
  std::size_t clusters = 4;
  std::uint64_t seed = 0;

  bool operator==(const TwoStageModel &) const = default;
};

struct StageLogs {
  std::vector<EpochLog> stage1;
  std::vector<EpochLog> stage2;
};

/// Pretrained LOW and HIGH extractors, computed once per seed.
struct PretrainedExtractors {
  ExtractorParams low;
  ExtractorParams high;
};

PretrainedExtractors pretrain_extractors(const PipelineConfig &config);

/// Tile-level dataset from freshly generated slides, lesion tiles labelled by
/// grade: 0 benign tissue, 1 low, 2 high.
LabeledTiles pretraining_tiles(const PipelineConfig &config, Scale scale);

/// Memoizes the expensive parts shared between variants of one seed.
class TrainingCache {
 public:
  const PretrainedExtractors &pretrained(const PipelineConfig &config);
  /// Stage-1 fit keyed by (pretrain, dropout rate, classes).
  const FitResult &stage1(const PreparedDataset &data, const PipelineConfig &config,
                          bool pretrain, double dropout_rate, int classes);

 private:
  struct Stage1Entry {
    bool pretrain;
    double dropout_rate;
    int classes;
    FitResult result;
  };
  std::optional<PretrainedExtractors> pretrained_;
  std::deque<Stage1Entry> stage1_;  // stable references
};

/// Throws "empty split" if any split is empty.
TwoStageModel train_two_stage(const PreparedDataset &data, const VariantSpec &variant,
                              const PipelineConfig &config, StageLogs *logs = nullptr,
                              TrainingCache *cache = nullptr);

struct Prediction {
  int label = 0;
  std::vector<double> probs;
  AttentionMap alpha;  // stage-1 attention over every tile
  SelectionResult selection;
  bool no_tissue = false;
};

/// Dropout-free and deterministic. A budget override of 0 throws
/// "empty selection budget".
Prediction predict(const TwoStageModel &model, const PreparedSlide &slide,
                   std::optional<std::size_t> budget_override = std::nullopt);

/// Tiles stage 2 sees for a slide, chosen by the model's selection method.
SelectionResult select_regions(const TwoStageModel &model, const PreparedSlide &slide,
                               const MilOutput &stage1_out, std::size_t budget);

struct SlideRecord {
  std::string slide_id;
  int truth = 0;
  int prediction = 0;
  bool flagged = false;  // no tissue survived the filter
};

struct EvalReport {
  double accuracy = 0.0;
  std::vector<std::vector<long>> confusion;  // rows = truth, cols = prediction
  std::vector<SlideRecord> per_slide;
};

/// Throws "empty test set" on empty input.
EvalReport evaluate_predictions(std::span<const SlideRecord> records, int classes);
EvalReport evaluate(const TwoStageModel &model, std::span<const PreparedSlide> slides,
                    std::vector<Prediction> *predictions = nullptr);

std::string eval_report_json(const EvalReport &report);
std::string confusion_csv(const EvalReport &report);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

struct RecallRow {
  std::uint64_t seed = 0;
  double att_cluster = 0.0;   // dropout-trained stage 1, cluster selection
  double att_topk = 0.0;      // dropout-trained stage 1, top attention
  double no_dropout_topk = 0.0;
};

struct AblationResult {
  std::vector<AblationRow> rows;
  std::vector<RecallRow> recall;
};

struct AblationOptions {
  std::vector<std::string> variants = variant_names();
  bool measure_recall = true;
};

/// Every variant per seed on shared splits. Throws for fewer than 3 seeds.
AblationResult run_ablation_suite(const PreparedDataset &data, const PipelineConfig &config,
                                  std::span<const std::uint64_t> seeds,
                                  const AblationOptions &options = {});

std::string ablation_csv(std::span<const AblationRow> rows);
std::string recall_csv(std::span<const RecallRow> rows);
/// Mean accuracy per variant, in variant_names() order.
std::vector<std::pair<std::string, double>> mean_accuracy(std::span<const AblationRow> rows);

/// Mean selection recall on cancer slides that carry truth.
double mean_selection_recall(const TwoStageModel &model, std::span<const PreparedSlide> slides);

/// stage1.milw, stage2.milw (two-stage only) and model.json.
void save_model(const TwoStageModel &model, const std::filesystem::path &dir);
TwoStageModel load_model(const std::filesystem::path &dir);

}  // namespace milpath
