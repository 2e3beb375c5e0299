// SPDX-License-Identifier: Apache-2.0
//
// milpath: generate | preprocess | train | eval | ablate | visualize
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
#include <omp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "milpath/config.hpp"
#include "milpath/kernels.hpp"
#include "milpath/overlay.hpp"
#include "milpath/pipeline.hpp"
#include "milpath/synth.hpp"

namespace fs = std::filesystem;
using namespace milpath;

namespace {

struct Common {
  std::string config_path;
  std::map<std::string, std::string> overrides;
};

std::string kebab(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return key;
}

void add_config_options(CLI::App *cmd, Common &common) {
  cmd->add_option("--config", common.config_path, "JSON run configuration");
  for (const auto &key : config_keys()) {
    cmd->add_option_function<std::string>(
        "--" + kebab(key), [&common, key](const std::string &v) { common.overrides[key] = v; },
        "override '" + key + "'");
  }
}

RunConfig resolve(const Common &common) {
  RunConfig config = common.config_path.empty() ? RunConfig{} : load_run_config(common.config_path);
  for (const auto &[key, value] : common.overrides) apply_value(config, key, value);
  validate(config);
  if (config.threads > 0) {
    set_thread_count(config.threads);
    omp_set_num_threads(config.threads);
  }
  return config;
}

void write_text(const fs::path &path, const std::string &text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

fs::path manifest_path(const RunConfig &c) { return fs::path(c.dataset_dir) / "manifest.jsonl"; }

PreparedDataset load_dataset(const RunConfig &c) {
  const auto manifest = manifest_path(c);
  if (!fs::exists(manifest))
    throw std::runtime_error("no dataset manifest at " + manifest.string() +
                             " (run 'milpath generate' first)");
  return prepare_from_manifest(manifest, pipeline_config(c).preproc);
}

fs::path checkpoint_dir(const RunConfig &c, const std::string &override_dir) {
  return override_dir.empty() ? fs::path(c.run_dir) / "checkpoints" / c.variant
                              : fs::path(override_dir);
}

int cmd_generate(const RunConfig &c) {
  const auto plan = generate_dataset(dataset_config(c), c.dataset_dir);
  std::printf("wrote %zu slides to %s\n", plan.entries.size(), c.dataset_dir.c_str());
  return 0;
}

int cmd_preprocess(const RunConfig &c) {
  const auto entries = read_manifest(manifest_path(c));
  const auto pc = pipeline_config(c).preproc;
  const fs::path out = fs::path(c.run_dir) / "preprocess";
  fs::create_directories(out / "masks");
  fs::create_directories(out / "tiles");
  std::ostringstream summary;
  summary << "slide_id,tiles\n";
  for (const auto &e : entries) {
    const RgbImage slide = read_png(fs::path(c.dataset_dir) / e.path);
    const TissueMask mask = tissue_mask(slide, pc.mask);
    write_png(out / "masks" / (e.slide_id + ".png"), mask);
    const auto grid = extract_tile_grid(slide.width, slide.height, pc.tile_size, pc.overlap);
    const auto tiles = filter_tiles(grid, mask, pc.min_tissue, e.slide_id);
    std::ostringstream csv;
    csv << "tile_x,tile_y,tissue_fraction\n" << std::setprecision(17);
    for (const auto &t : tiles) csv << t.x << ',' << t.y << ',' << t.tissue_fraction << '\n';
    write_text(out / "tiles" / (e.slide_id + ".csv"), csv.str());
    summary << e.slide_id << ',' << tiles.size() << '\n';
  }
  write_text(out / "summary.csv", summary.str());
  std::printf("preprocessed %zu slides into %s\n", entries.size(), out.c_str());
  return 0;
}

int cmd_train(const RunConfig &c, bool force) {
  const VariantSpec variant = variant_by_name(c.variant);
  const fs::path run(c.run_dir);
  const fs::path ckpt = checkpoint_dir(c, {});
  if (fs::exists(ckpt / "model.json") && !force) {
    std::fprintf(stderr, "run already complete at %s; pass --force to retrain\n", ckpt.c_str());
    return 2;
  }
  const auto data = load_dataset(c);
  save_run_config(c, run / "config.json");
  StageLogs logs;
  const auto model = train_two_stage(data, variant, pipeline_config(c), &logs);
  fs::remove_all(ckpt);
  save_model(model, ckpt);
  if (!logs.stage1.empty())
    write_text(run / "logs" / (c.variant + "_stage1.csv"), epoch_log_csv(logs.stage1));
  if (!logs.stage2.empty())
    write_text(run / "logs" / (c.variant + "_stage2.csv"), epoch_log_csv(logs.stage2));
  std::printf("trained %s; checkpoint in %s\n", c.variant.c_str(), ckpt.c_str());
  return 0;
}

int cmd_eval(const RunConfig &c, const std::string &checkpoint) {
  const auto model = load_model(checkpoint_dir(c, checkpoint));
  const auto data = load_dataset(c);
  std::vector<Prediction> preds;
  const auto report = evaluate(model, data.test, &preds);
  const fs::path reports = fs::path(c.run_dir) / "reports";
  write_text(reports / (model.variant + "_eval.json"), eval_report_json(report));
  write_text(reports / (model.variant + "_confusion.csv"), confusion_csv(report));
  for (std::size_t i = 0; i < data.test.size(); ++i) {
    if (!model.stage2 || preds[i].no_tissue) continue;
    write_text(reports / "selections" / model.variant / (data.test[i].slide_id + ".csv"),
               selection_csv(data.test[i].refs, preds[i].selection));
  }
  std::printf("%s test accuracy %.4f over %zu slides\n", model.variant.c_str(), report.accuracy,
              report.per_slide.size());
  return 0;
}

int cmd_ablate(const RunConfig &c) {
  const auto data = load_dataset(c);
  const auto seeds = ablation_seeds(c);
  const auto result = run_ablation_suite(data, pipeline_config(c), seeds);
  const fs::path reports = fs::path(c.run_dir) / "reports";
  write_text(reports / "ablation.csv", ablation_csv(result.rows));
  write_text(reports / "selection_recall.csv", recall_csv(result.recall));
  std::ostringstream summary;
  summary << "variant,mean_accuracy\n" << std::setprecision(17);
  for (const auto &[name, acc] : mean_accuracy(result.rows)) {
    summary << name << ',' << acc << '\n';
    std::printf("%-24s %.4f\n", name.c_str(), acc);
  }
  write_text(reports / "ablation_summary.csv", summary.str());
  return 0;
}

int cmd_visualize(const RunConfig &c, const std::string &checkpoint,
                  const std::vector<std::string> &slide_ids, const std::string &out_dir) {
  const auto model = load_model(checkpoint_dir(c, checkpoint));
  const auto entries = read_manifest(manifest_path(c));
  const auto pc = pipeline_config(c).preproc;
  const ColorStats reference = reference_color_stats({}, c.slide_size, pc.stats_max_blue_ratio);
  const fs::path out = out_dir.empty() ? fs::path(c.run_dir) / "overlays" / model.variant
                                       : fs::path(out_dir);
  std::size_t written = 0;
  for (const auto &e : entries) {
    const bool wanted = slide_ids.empty()
                            ? e.split == Split::Test
                            : std::find(slide_ids.begin(), slide_ids.end(), e.slide_id) !=
                                  slide_ids.end();
    if (!wanted) continue;
    const RgbImage slide = read_png(fs::path(c.dataset_dir) / e.path);
    const auto prepared = prepare_slide(slide, e.slide_id, e.slide_class, pc, reference);
    const auto pred = predict(model, prepared);
    const auto overlay = render_overlay(slide, prepared.refs, pred.alpha, pred.selection.selected,
                                        pc.tile_size);
    fs::create_directories(out);
    write_png(out / (e.slide_id + ".png"), overlay);
    ++written;
  }
  if (!slide_ids.empty() && written != slide_ids.size())
    throw std::invalid_argument("unknown slide id among --slide values");
  std::printf("wrote %zu overlays to %s\n", written, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char **argv) {
  CLI::App app{"Two-stage attention MIL pipeline on synthetic slides"};
  app.require_subcommand(1);
  Common common;

  auto *gen = app.add_subcommand("generate", "write a synthetic dataset");
  auto *pre = app.add_subcommand("preprocess", "tissue masks and tile lists for a dataset");
  auto *train = app.add_subcommand("train", "train one variant");
  auto *eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  auto *ablate = app.add_subcommand("ablate", "train and evaluate every variant over seeds");
  auto *vis = app.add_subcommand("visualize", "attention and selection overlays");
  for (auto *cmd : {gen, pre, train, eval, ablate, vis}) add_config_options(cmd, common);

  bool force = false;
  train->add_flag("--force", force, "retrain over a completed run");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory");
  vis->add_option("--checkpoint", checkpoint, "checkpoint directory");
  std::vector<std::string> slide_ids;
  std::string out_dir;
  vis->add_option("--slide", slide_ids, "slide id(s); default: every test slide");
  vis->add_option("--out", out_dir, "output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const RunConfig config = resolve(common);
    if (*gen) return cmd_generate(config);
    if (*pre) return cmd_preprocess(config);
    if (*train) return cmd_train(config, force);
    if (*eval) return cmd_eval(config, checkpoint);
    if (*ablate) return cmd_ablate(config);
    if (*vis) return cmd_visualize(config, checkpoint, slide_ids, out_dir);
  } catch (const ConfigError &e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
