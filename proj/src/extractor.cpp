// SPDX-License-Identifier: Apache-2.0
#include "milpath/extractor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "milpath/kernels.hpp"
#include "milpath/rng.hpp"

namespace milpath {

namespace {

const char *const kLayerNames[kExtractorLayers] = {"conv1", "conv2", "conv3", "reduce", "embed"};

struct LayerGeometry {
  int in_channels;
  int out_channels;
  int in_size;  // spatial side of the input map
};

std::array<LayerGeometry, 3> conv_geometry(const ExtractorConfig &c) {
  return {{{3, c.widths[0], c.input_size},
           {c.widths[0], c.widths[1], c.input_size / 2},
           {c.widths[1], c.widths[2], c.input_size / 4}}};
}

void validate(const ExtractorConfig &c) {
  if (c.input_size < 8 || c.input_size % 8 != 0)
    throw std::invalid_argument("extractor input size must be a positive multiple of 8");
  if (c.feature_dim < 1) throw std::invalid_argument("feature dimension must be >= 1");
  for (int w : c.widths)
    if (w < 1) throw std::invalid_argument("channel widths must be >= 1");
  if (c.reduced_channels < 1) throw std::invalid_argument("reduced channels must be >= 1");
}

ExtractorParams allocate(const ExtractorConfig &c) {
  validate(c);
  ExtractorParams p;
  p.config = c;
  const auto geo = conv_geometry(c);
  for (int l = 0; l < 3; ++l) {
    const auto out = static_cast<std::size_t>(geo[l].out_channels);
    const auto in = static_cast<std::size_t>(geo[l].in_channels);
    p.layers[l] = {Tensor({out, in, 3, 3}), Tensor({out})};
  }
  const auto c3 = static_cast<std::size_t>(c.widths[2]);
  const auto cr = static_cast<std::size_t>(c.reduced_channels);
  const auto s = static_cast<std::size_t>(c.map_size());
  p.reduce() = {Tensor({cr, c3}), Tensor({cr})};
  p.embed() = {Tensor({static_cast<std::size_t>(c.feature_dim), cr * s * s}),
               Tensor({static_cast<std::size_t>(c.feature_dim)})};
  return p;
}

// 3x3 kernel, stride 2, zero padding 1; output side = in_size / 2.
void conv_forward(std::span<const double> in, const LayerGeometry &g, const Layer &layer,
                  std::span<double> out) {
  const int n = g.in_size, m = n / 2;
  const auto &w = layer.weight.values;
  for (int o = 0; o < g.out_channels; ++o) {
    double *dst = &out[static_cast<std::size_t>(o) * m * m];
    std::fill(dst, dst + m * m, layer.bias[o]);
    for (int i = 0; i < g.in_channels; ++i) {
      const double *src = &in[static_cast<std::size_t>(i) * n * n];
      const double *k = &w[(static_cast<std::size_t>(o) * g.in_channels + i) * 9];
      for (int oy = 0; oy < m; ++oy) {
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = 2 * oy + ky - 1;
          if (iy < 0 || iy >= n) continue;
          const double *srow = src + static_cast<std::size_t>(iy) * n;
          double *drow = dst + static_cast<std::size_t>(oy) * m;
          for (int ox = 0; ox < m; ++ox) {
            double acc = 0.0;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * ox + kx - 1;
              if (ix >= 0 && ix < n) acc += k[ky * 3 + kx] * srow[ix];
            }
            drow[ox] += acc;
          }
        }
      }
    }
  }
}

void conv_backward(std::span<const double> in, const LayerGeometry &g, const Layer &layer,
                   std::span<const double> grad_out, Layer &grads, std::span<double> grad_in) {
  const int n = g.in_size, m = n / 2;
  const auto &w = layer.weight.values;
  auto &dw = grads.weight.values;
  for (int o = 0; o < g.out_channels; ++o) {
    const double *go = &grad_out[static_cast<std::size_t>(o) * m * m];
    grads.bias[o] += std::accumulate(go, go + m * m, 0.0);
    for (int i = 0; i < g.in_channels; ++i) {
      const double *src = &in[static_cast<std::size_t>(i) * n * n];
      const std::size_t kbase = (static_cast<std::size_t>(o) * g.in_channels + i) * 9;
      double *gi = grad_in.empty() ? nullptr : &grad_in[static_cast<std::size_t>(i) * n * n];
      for (int oy = 0; oy < m; ++oy) {
        for (int ky = 0; ky < 3; ++ky) {
          const int iy = 2 * oy + ky - 1;
          if (iy < 0 || iy >= n) continue;
          for (int ox = 0; ox < m; ++ox) {
            const double g_o = go[oy * m + ox];
            if (g_o == 0.0) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= n) continue;
              dw[kbase + ky * 3 + kx] += g_o * src[static_cast<std::size_t>(iy) * n + ix];
              if (gi) gi[static_cast<std::size_t>(iy) * n + ix] += g_o * w[kbase + ky * 3 + kx];
            }
          }
        }
      }
    }
  }
}

// y = W x + b for W rows x cols
void dense_forward(std::span<const double> x, const Layer &layer, std::span<double> y) {
  const std::size_t rows = layer.weight.rows(), cols = layer.weight.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const double *w = &layer.weight.values[r * cols];
    double acc = layer.bias[r];
    for (std::size_t c = 0; c < cols; ++c) acc += w[c] * x[c];
    y[r] = acc;
  }
}

void dense_backward(std::span<const double> x, const Layer &layer, std::span<const double> gy,
                    Layer &grads, std::span<double> gx) {
  const std::size_t rows = layer.weight.rows(), cols = layer.weight.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    const double g = gy[r];
    if (g == 0.0) continue;
    grads.bias[r] += g;
    double *dw = &grads.weight.values[r * cols];
    const double *w = &layer.weight.values[r * cols];
    for (std::size_t c = 0; c < cols; ++c) dw[c] += g * x[c];
    if (!gx.empty())
      for (std::size_t c = 0; c < cols; ++c) gx[c] += g * w[c];
  }
}

void relu_inplace(std::span<double> v) {
  for (auto &x : v) x = x > 0.0 ? x : 0.0;
}

// zero gradient where the ReLU output was clamped
void relu_mask(std::span<const double> activated, std::span<double> grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activated[i] > 0.0)) grad[i] = 0.0;
}

void glorot(Tensor &t, std::size_t fan_in, std::size_t fan_out, Rng &rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto &v : t.values) v = rng.uniform(-a, a);
}

}  // namespace

ExtractorParams ExtractorParams::zeros_like() const { return allocate(config); }

ExtractorParams init_extractor(std::uint64_t seed, const ExtractorConfig &config) {
  ExtractorParams p = allocate(config);
  Rng rng(seed);
  const auto geo = conv_geometry(config);
  for (int l = 0; l < 3; ++l)
    glorot(p.layers[l].weight, static_cast<std::size_t>(geo[l].in_channels) * 9,
           static_cast<std::size_t>(geo[l].out_channels) * 9, rng);
  glorot(p.reduce().weight, p.reduce().weight.cols(), p.reduce().weight.rows(), rng);
  glorot(p.embed().weight, p.embed().weight.cols(), p.embed().weight.rows(), rng);
  return p;
}

ExtractorParams init_extractor(std::uint64_t seed, int feature_dim) {
  ExtractorConfig c;
  c.feature_dim = feature_dim;
  return init_extractor(seed, c);
}

void extract_tile(const RgbImage &tile, const ExtractorParams &params, std::span<double> features,
                  ExtractorTrace *trace) {
  const auto &c = params.config;
  if (tile.width != c.input_size || tile.height != c.input_size)
    throw std::invalid_argument("tile is " + std::to_string(tile.width) + "x" +
                                std::to_string(tile.height) + ", extractor expects " +
                                std::to_string(c.input_size));
  if (features.size() != static_cast<std::size_t>(c.feature_dim))
    throw std::invalid_argument("feature buffer has wrong length");

  ExtractorTrace local;
  ExtractorTrace &t = trace ? *trace : local;

  const int n = c.input_size;
  t.input.resize(static_cast<std::size_t>(3) * n * n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int ch = 0; ch < 3; ++ch)
        t.input[(static_cast<std::size_t>(ch) * n + y) * n + x] = tile.at(x, y, ch) / 255.0 - 0.5;

  const auto geo = conv_geometry(c);
  std::span<const double> prev = t.input;
  for (int l = 0; l < 3; ++l) {
    const int m = geo[l].in_size / 2;
    auto &out = t.outputs[l];
    out.resize(static_cast<std::size_t>(geo[l].out_channels) * m * m);
    conv_forward(prev, geo[l], params.layers[l], out);
    relu_inplace(out);
    prev = out;
  }

  // 1x1 convolution: per spatial position, a dense map over channels.
  const int s = c.map_size();
  const int c3 = c.widths[2], cr = c.reduced_channels;
  auto &reduced = t.outputs[3];
  reduced.resize(static_cast<std::size_t>(cr) * s * s);
  const auto &rw = params.reduce().weight;
  for (int o = 0; o < cr; ++o)
    for (int p = 0; p < s * s; ++p) {
      double acc = params.reduce().bias[o];
      for (int i = 0; i < c3; ++i) acc += rw(o, i) * prev[static_cast<std::size_t>(i) * s * s + p];
      reduced[static_cast<std::size_t>(o) * s * s + p] = acc;
    }
  relu_inplace(reduced);

  auto &embedded = t.outputs[4];
  embedded.resize(static_cast<std::size_t>(c.feature_dim));
  dense_forward(reduced, params.embed(), embedded);
  std::copy(embedded.begin(), embedded.end(), features.begin());
}

Tensor extract_features(std::span<const RgbImage> tiles, const ExtractorParams &params) {
  return parallel::extract_features(tiles, params);
}

void extractor_backward(const ExtractorTrace &trace, std::span<const double> grad_features,
                        const ExtractorParams &params, ExtractorParams &grads,
                        int first_trainable) {
  if (first_trainable >= kExtractorLayers) return;
  const auto &c = params.config;
  const int s = c.map_size();
  const int c3 = c.widths[2], cr = c.reduced_channels;

  // embed (linear output)
  std::vector<double> g_reduced(trace.outputs[3].size(), 0.0);
  dense_backward(trace.outputs[3], params.embed(), grad_features, grads.embed(),
                 first_trainable < 4 ? std::span<double>(g_reduced) : std::span<double>());
  if (first_trainable >= 4) return;

  // reduce (1x1 conv + ReLU)
  relu_mask(trace.outputs[3], g_reduced);
  const auto &conv3_out = trace.outputs[2];
  std::vector<double> g_conv3(conv3_out.size(), 0.0);
  const auto &rw = params.reduce().weight;
  auto &grw = grads.reduce().weight;
  for (int o = 0; o < cr; ++o)
    for (int p = 0; p < s * s; ++p) {
      const double g = g_reduced[static_cast<std::size_t>(o) * s * s + p];
      if (g == 0.0) continue;
      grads.reduce().bias[o] += g;
      for (int i = 0; i < c3; ++i) {
        const std::size_t idx = static_cast<std::size_t>(i) * s * s + p;
        grw(o, i) += g * conv3_out[idx];
        g_conv3[idx] += g * rw(o, i);
      }
    }
  if (first_trainable >= 3) return;

  const auto geo = conv_geometry(c);
  std::vector<double> g_out = std::move(g_conv3);
  for (int l = 2; l >= first_trainable; --l) {
    relu_mask(trace.outputs[l], g_out);
    const std::vector<double> &in = l == 0 ? trace.input : trace.outputs[l - 1];
    std::vector<double> g_in;
    if (l > first_trainable) g_in.assign(in.size(), 0.0);
    conv_backward(in, geo[l], params.layers[l], g_out, grads.layers[l], g_in);
    g_out = std::move(g_in);
  }
}

void for_each_tensor(ExtractorParams &params,
                     const std::function<void(const std::string &, Tensor &, int)> &fn) {
  for (int l = 0; l < kExtractorLayers; ++l) {
    const std::string base = std::string(kLayerNames[l]);
    fn(base + ".weight", params.layers[l].weight, l);
    fn(base + ".bias", params.layers[l].bias, l);
  }
}

std::vector<NamedTensor> to_named_tensors(const ExtractorParams &params,
                                          const std::string &prefix) {
  const auto &c = params.config;
  std::vector<NamedTensor> out;
  Tensor cfg({6});
  cfg.values = {static_cast<double>(c.input_size), static_cast<double>(c.widths[0]),
                static_cast<double>(c.widths[1]),  static_cast<double>(c.widths[2]),
                static_cast<double>(c.reduced_channels), static_cast<double>(c.feature_dim)};
  out.push_back({prefix + ".config", std::move(cfg)});
  auto copy = params;
  for_each_tensor(copy, [&](const std::string &name, Tensor &t, int) {
    out.push_back({prefix + "." + name, t});
  });
  return out;
}

ExtractorParams extractor_from_tensors(std::span<const NamedTensor> tensors,
                                       const std::string &prefix) {
  auto find = [&](const std::string &name) -> const Tensor & {
    for (const auto &nt : tensors)
      if (nt.name == name) return nt.tensor;
    throw std::runtime_error("missing tensor " + name);
  };
  const Tensor &cfg = find(prefix + ".config");
  if (cfg.size() != 6) throw std::runtime_error("bad extractor config tensor");
  ExtractorConfig c;
  c.input_size = static_cast<int>(cfg[0]);
  c.widths = {static_cast<int>(cfg[1]), static_cast<int>(cfg[2]), static_cast<int>(cfg[3])};
  c.reduced_channels = static_cast<int>(cfg[4]);
  c.feature_dim = static_cast<int>(cfg[5]);
  ExtractorParams p = allocate(c);
  for_each_tensor(p, [&](const std::string &name, Tensor &t, int) {
    const Tensor &src = find(prefix + "." + name);
    if (src.shape != t.shape) throw std::runtime_error("shape mismatch for " + name);
    t = src;
  });
  return p;
}

namespace {

void softmax_inplace(std::span<double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (auto &x : v) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto &x : v) x /= sum;
}

}  // namespace

int TileClassifier::predict(const RgbImage &tile) const {
  std::vector<double> f(static_cast<std::size_t>(extractor.config.feature_dim));
  extract_tile(tile, extractor, f);
  const std::size_t n = head_weight.rows();
  std::vector<double> logits(n);
  for (std::size_t r = 0; r < n; ++r) {
    double acc = head_bias[r];
    for (std::size_t j = 0; j < f.size(); ++j) acc += head_weight(r, j) * f[j];
    logits[r] = acc;
  }
  return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

TileClassifier pretrain_tile_classifier(const LabeledTiles &data, const ExtractorParams &init,
                                        const PretrainConfig &config, PretrainReport *report) {
  if (data.tiles.size() != data.labels.size())
    throw std::invalid_argument("tile and label counts differ");
  if (data.tiles.empty()) throw std::invalid_argument("degenerate labels");
  const int n_classes = *std::max_element(data.labels.begin(), data.labels.end()) + 1;
  {
    std::vector<int> seen(static_cast<std::size_t>(std::max(n_classes, 1)), 0);
    for (int y : data.labels) {
      if (y < 0) throw std::invalid_argument("negative tile label");
      seen[static_cast<std::size_t>(y)] = 1;
    }
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2)
      throw std::invalid_argument("degenerate labels");
  }

  const std::size_t d = static_cast<std::size_t>(init.config.feature_dim);
  const std::size_t n = static_cast<std::size_t>(n_classes);
  TileClassifier model{init, Tensor({n, d}), Tensor({n})};
  Rng rng(config.seed);
  glorot(model.head_weight, d, n, rng);

  std::vector<double> feat(d), probs(n), g_feat(d);
  ExtractorTrace trace;

  auto tile_loss = [&](std::size_t i, bool keep_trace) {
    extract_tile(data.tiles[i], model.extractor, feat, keep_trace ? &trace : nullptr);
    for (std::size_t r = 0; r < n; ++r) {
      double acc = model.head_bias[r];
      for (std::size_t j = 0; j < d; ++j) acc += model.head_weight(r, j) * feat[j];
      probs[r] = acc;
    }
    softmax_inplace(probs);
    return -std::log(std::max(probs[static_cast<std::size_t>(data.labels[i])], 1e-300));
  };

  auto full_pass = [&](double *accuracy) {
    double loss = 0.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.tiles.size(); ++i) {
      loss += tile_loss(i, false);
      const auto pred = static_cast<int>(std::max_element(probs.begin(), probs.end()) - probs.begin());
      correct += pred == data.labels[i];
    }
    if (accuracy) *accuracy = static_cast<double>(correct) / data.tiles.size();
    return loss / data.tiles.size();
  };

  if (report) {
    report->epoch_loss.clear();
    report->epoch_loss.push_back(full_pass(nullptr));
  }

  AdamState state;
  std::vector<std::size_t> order(data.tiles.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t batch = static_cast<std::size_t>(std::max(1, config.batch_size));

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t stop = std::min(order.size(), start + batch);
      ExtractorParams g_ext = model.extractor.zeros_like();
      Tensor g_hw = model.head_weight.zeros_like(), g_hb = model.head_bias.zeros_like();
      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t i = order[b];
        epoch_loss += tile_loss(i, true);
        // d(-log p_y)/d logits = p - onehot(y)
        std::fill(g_feat.begin(), g_feat.end(), 0.0);
        for (std::size_t r = 0; r < n; ++r) {
          const double g = probs[r] - (static_cast<int>(r) == data.labels[i] ? 1.0 : 0.0);
          g_hb[r] += g;
          for (std::size_t j = 0; j < d; ++j) {
            g_hw(r, j) += g * feat[j];
            g_feat[j] += g * model.head_weight(r, j);
          }
        }
        extractor_backward(trace, g_feat, model.extractor, g_ext, 0);
      }
      const double scale = 1.0 / static_cast<double>(stop - start);
      std::vector<AdamSlot> slots;
      for_each_tensor(g_ext, [&](const std::string &, Tensor &t, int) {
        for (auto &v : t.values) v *= scale;
      });
      for (auto &v : g_hw.values) v *= scale;
      for (auto &v : g_hb.values) v *= scale;
      std::vector<Tensor *> grads;
      for_each_tensor(g_ext, [&](const std::string &, Tensor &t, int) { grads.push_back(&t); });
      std::size_t gi = 0;
      for_each_tensor(model.extractor, [&](const std::string &, Tensor &t, int) {
        slots.push_back({&t, grads[gi++], config.lr});
      });
      slots.push_back({&model.head_weight, &g_hw, config.lr});
      slots.push_back({&model.head_bias, &g_hb, config.lr});
      adam_step(slots, state, config.adam);
    }
    if (report) report->epoch_loss.push_back(epoch_loss / data.tiles.size());
  }
  if (report) full_pass(&report->final_accuracy);
  return model;
}

ExtractorParams pretrain_extractor(const LabeledTiles &data, const ExtractorParams &init,
                                   const PretrainConfig &config, PretrainReport *report) {
  return pretrain_tile_classifier(data, init, config, report).extractor;
}

}  // namespace milpath
