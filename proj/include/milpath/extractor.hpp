// SPDX-License-Identifier: Apache-2.0
//
// Small trainable tile feature extractor:
//   3 x [3x3 conv, stride 2, pad 1, ReLU]  (widths 8 -> 16 -> 32)
//   1x1 conv reduce + ReLU                  (32 -> 8)
//   flatten -> dense                        (-> d)
// A 32x32 tile becomes a 32x4x4 map, 8x4x4 after reduction, then d features.
#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "milpath/image.hpp"
#include "milpath/optim.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

struct ExtractorConfig {
  int input_size = 32;  // square tiles; must be divisible by 8
  std::array<int, 3> widths{8, 16, 32};
  int reduced_channels = 8;
  int feature_dim = 64;

  int map_size() const { return input_size / 8; }
  bool operator==(const ExtractorConfig &) const = default;
};

struct Layer {
  Tensor weight;
  Tensor bias;
  bool operator==(const Layer &) const = default;
};

inline constexpr int kExtractorLayers = 5;  // conv1..conv3, reduce, embed

struct ExtractorParams {
  ExtractorConfig config;
  std::array<Layer, kExtractorLayers> layers;

  Layer &conv(int i) { return layers[i]; }
  const Layer &conv(int i) const { return layers[i]; }
  Layer &reduce() { return layers[3]; }
  const Layer &reduce() const { return layers[3]; }
  Layer &embed() { return layers[4]; }
  const Layer &embed() const { return layers[4]; }

  /// Same shapes, all zeros.
  ExtractorParams zeros_like() const;
  bool operator==(const ExtractorParams &) const = default;
};

/// Glorot-uniform weights, zero biases, reproducible per seed.
ExtractorParams init_extractor(std::uint64_t seed, const ExtractorConfig &config);
ExtractorParams init_extractor(std::uint64_t seed, int feature_dim);

/// Activations kept from a forward pass for backpropagation.
struct ExtractorTrace {
  std::vector<double> input;
  std::array<std::vector<double>, kExtractorLayers> outputs;  // post-activation
};

/// Forward pass for one tile into `features` (length d).
void extract_tile(const RgbImage &tile, const ExtractorParams &params, std::span<double> features,
                  ExtractorTrace *trace = nullptr);

/// k x d matrix; row i is tile i. Runs the OpenMP kernel.
Tensor extract_features(std::span<const RgbImage> tiles, const ExtractorParams &params);

/// Accumulates parameter gradients for layers [first_trainable, 5) given
/// dL/dfeatures. Nothing below first_trainable is touched.
void extractor_backward(const ExtractorTrace &trace, std::span<const double> grad_features,
                        const ExtractorParams &params, ExtractorParams &grads,
                        int first_trainable);

/// Visit every tensor with a stable name ("extractor.conv1.weight", ...).
void for_each_tensor(ExtractorParams &params,
                     const std::function<void(const std::string &, Tensor &, int layer)> &fn);

std::vector<NamedTensor> to_named_tensors(const ExtractorParams &params,
                                          const std::string &prefix = "extractor");
ExtractorParams extractor_from_tensors(std::span<const NamedTensor> tensors,
                                       const std::string &prefix = "extractor");

struct LabeledTiles {
  std::vector<RgbImage> tiles;
  std::vector<int> labels;
};

struct PretrainConfig {
  int epochs = 6;
  double lr = 1e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  AdamConfig adam{};
};

struct PretrainReport {
  std::vector<double> epoch_loss;  // [0] is the loss before any update
  double final_accuracy = 0.0;     // training-set accuracy after the last epoch
};

/// Supervised tile classification through a temporary dense softmax head,
/// which is discarded. Throws "degenerate labels" with fewer than 2 classes.
ExtractorParams pretrain_extractor(const LabeledTiles &data, const ExtractorParams &init,
                                   const PretrainConfig &config, PretrainReport *report = nullptr);

/// Extractor together with the head it was pretrained with.
struct TileClassifier {
  ExtractorParams extractor;
  Tensor head_weight;  // n x d
  Tensor head_bias;    // n
  int predict(const RgbImage &tile) const;
};

TileClassifier pretrain_tile_classifier(const LabeledTiles &data, const ExtractorParams &init,
                                        const PretrainConfig &config,
                                        PretrainReport *report = nullptr);

}  // namespace milpath
