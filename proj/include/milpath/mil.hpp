// SPDX-License-Identifier: Apache-2.0
//
// Attention-based multiple-instance learning head.
//
//   a_i     = tanh(W_v v_i)                 (h)
//   logit_i = U . a_i
//   alpha   = softmax(logit)                (over the k instances of a bag)
//   z       = sum_i alpha_i v_i             (d)
//   p       = softmax(W_c z + b_c)          (n classes)
//   loss    = -log p_y
//
// All gradients are written out by hand; tests/test_mil.cpp checks them
// against central finite differences.
#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milpath/extractor.hpp"
#include "milpath/preproc.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

struct AttentionParams {
  Tensor W_v;  // h x d
  Tensor U;    // h

  std::size_t hidden() const { return W_v.rows(); }
  std::size_t dim() const { return W_v.cols(); }
  bool operator==(const AttentionParams &) const = default;
};

struct ClassifierParams {
  Tensor W_c;  // n x d
  Tensor b_c;  // n

  std::size_t classes() const { return W_c.rows(); }
  bool operator==(const ClassifierParams &) const = default;
};

struct AttentionMap {
  std::vector<double> weights;

  std::size_t size() const { return weights.size(); }
  double operator[](std::size_t i) const { return weights[i]; }
};

/// One slide: instances in bag order plus their addresses.
struct Bag {
  std::string slide_id;
  std::vector<RgbImage> instances;
  int label = 0;
  std::vector<TileRef> tile_refs;

  std::size_t size() const { return instances.size(); }
};

struct MilModel {
  ExtractorParams extractor;
  AttentionParams attention;
  ClassifierParams classifier;

  MilModel zeros_like() const;
  bool operator==(const MilModel &) const = default;
};

AttentionParams init_attention(std::uint64_t seed, std::size_t hidden, std::size_t dim);
ClassifierParams init_classifier(std::uint64_t seed, std::size_t classes, std::size_t dim);
MilModel init_mil_model(std::uint64_t seed, const ExtractorConfig &extractor, std::size_t hidden,
                        std::size_t classes);

/// Raw attention scores U . tanh(W_v v_i).
std::vector<double> attention_logits(const Tensor &V, const AttentionParams &params);
/// Softmax over the k instance logits, max-subtracted. Throws "empty bag".
AttentionMap attention_forward(const Tensor &V, const AttentionParams &params);

/// z = sum_i alpha_i v_i
std::vector<double> bag_embed(const Tensor &V, const AttentionMap &alpha);

/// softmax(W_c z + b_c)
std::vector<double> classify(std::span<const double> z, const ClassifierParams &params);

/// Numerically stable softmax.
std::vector<double> softmax(std::span<const double> logits);

/// Index of the largest entry; ties go to the lowest index.
int argmax(std::span<const double> v);

/// Independent Bernoulli(rate) drop decisions; if every instance is dropped,
/// one uniformly chosen instance is restored. true = dropped.
std::vector<bool> dropout_mask(std::size_t k, double rate, std::uint64_t seed);

/// Replaces dropped instances with constant mean_rgb tiles. Training only.
Bag instance_dropout(const Bag &bag, double rate, std::array<std::uint8_t, 3> mean_rgb,
                     std::uint64_t seed);

/// Number of dropout masks drawn in this process. Evaluation code must never
/// move this counter; tests watch it.
std::uint64_t instance_dropout_calls();

/// Mean pixel over every instance of every bag, rounded.
std::array<std::uint8_t, 3> mean_rgb(std::span<const Bag> bags);

struct MilOutput {
  std::vector<double> probs;
  AttentionMap alpha;
  Tensor features;
};

/// extract_features -> attention_forward -> bag_embed -> classify. No dropout.
MilOutput mil_forward(const Bag &bag, const MilModel &model);
/// Same, from precomputed instance features.
MilOutput head_forward(const Tensor &V, const MilModel &model);

/// Loss of the attention head and classifier given features V. Gradients are
/// added into `grads`; when grad_V is non-null it receives dL/dV (k x d).
double head_loss_and_grads(const Tensor &V, int label, const MilModel &model, MilModel &grads,
                           Tensor *grad_V = nullptr);

/// Cross-entropy loss of the full model on one bag with gradients for the
/// head and for extractor layers [first_trainable, 5). `grads` is overwritten.
/// Throws "numerical failure" for a non-finite loss.
double loss_and_grads(const Bag &bag, const MilModel &model, MilModel &grads,
                      int first_trainable = 0);

/// Same as loss_and_grads with instances given by pointer, so dropped tiles
/// can share one constant image.
double loss_and_grads(std::span<const RgbImage *const> instances, int label,
                      const MilModel &model, MilModel &grads, int first_trainable);

struct TrainConfig {
  double lr_head = 3e-3;
  double lr_extractor = 1e-4;
  int epochs = 30;
  int warmup_epochs = 8;  // head-only epochs before the extractor unfreezes
  double dropout_rate = 0.5;
  int plateau_patience = 10;
  double plateau_factor = 0.1;
  double plateau_threshold = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  int first_trainable_layer = 1;  // conv2 onward; conv1 stays frozen
};

void validate(const TrainConfig &config);

/// Reduces every learning rate by `factor` after `patience` epochs without a
/// validation-loss improvement larger than `threshold`.
class PlateauSchedule {
 public:
  PlateauSchedule(int patience, double factor, double threshold)
      : patience_(patience), factor_(factor), threshold_(threshold) {}

  /// Returns the multiplier to apply this epoch (1 or factor).
  double observe(double val_loss);

 private:
  int patience_;
  double factor_;
  double threshold_;
  std::optional<double> best_;
  int wait_ = 0;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr_head = 0.0;
  double lr_extractor = 0.0;
};

struct FitResult {
  MilModel model;  // checkpoint with the best validation accuracy
  std::vector<EpochLog> log;
  int best_epoch = -1;
};

/// One shuffled bag per optimizer step; dropout during training only; the
/// extractor is frozen for warmup_epochs, then layers from
/// first_trainable_layer train at lr_extractor.
FitResult fit(std::span<const Bag> train, std::span<const Bag> val, const MilModel &init,
              const TrainConfig &config, std::array<std::uint8_t, 3> dropout_rgb);

/// Dropout-free evaluation of a model on labeled bags: mean loss and accuracy.
std::pair<double, double> evaluate_bags(std::span<const Bag> bags, const MilModel &model);

std::string epoch_log_csv(std::span<const EpochLog> log);

std::vector<NamedTensor> to_named_tensors(const MilModel &model);
MilModel mil_model_from_tensors(std::span<const NamedTensor> tensors);

}  // namespace milpath
