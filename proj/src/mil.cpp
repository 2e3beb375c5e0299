// SPDX-License-Identifier: Apache-2.0
#include "milpath/mil.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "milpath/rng.hpp"

namespace milpath {

namespace {

std::atomic<std::uint64_t> g_dropout_calls{0};

void glorot(Tensor &t, std::size_t fan_in, std::size_t fan_out, Rng &rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (auto &v : t.values) v = rng.uniform(-a, a);
}

double logsumexp(std::span<const double> v) {
  const double mx = *std::max_element(v.begin(), v.end());
  double sum = 0.0;
  for (double x : v) sum += std::exp(x - mx);
  return mx + std::log(sum);
}

void check_features(const Tensor &V, std::size_t dim) {
  if (V.rows() == 0) throw std::invalid_argument("empty bag");
  if (V.cols() != dim) throw std::invalid_argument("feature dimension mismatch");
}

}  // namespace

MilModel MilModel::zeros_like() const {
  return {extractor.zeros_like(),
          {attention.W_v.zeros_like(), attention.U.zeros_like()},
          {classifier.W_c.zeros_like(), classifier.b_c.zeros_like()}};
}

AttentionParams init_attention(std::uint64_t seed, std::size_t hidden, std::size_t dim) {
  if (hidden < 1 || dim < 1) throw std::invalid_argument("attention sizes must be >= 1");
  AttentionParams p{Tensor({hidden, dim}), Tensor({hidden})};
  Rng rng(seed);
  glorot(p.W_v, dim, hidden, rng);
  glorot(p.U, hidden, 1, rng);
  return p;
}

ClassifierParams init_classifier(std::uint64_t seed, std::size_t classes, std::size_t dim) {
  if (classes < 2) throw std::invalid_argument("classifier needs at least 2 classes");
  ClassifierParams p{Tensor({classes, dim}), Tensor({classes})};
  Rng rng(seed);
  glorot(p.W_c, dim, classes, rng);
  return p;
}

MilModel init_mil_model(std::uint64_t seed, const ExtractorConfig &extractor, std::size_t hidden,
                        std::size_t classes) {
  const auto d = static_cast<std::size_t>(extractor.feature_dim);
  return {init_extractor(derive_seed(seed, "init/extractor"), extractor),
          init_attention(derive_seed(seed, "init/attention"), hidden, d),
          init_classifier(derive_seed(seed, "init/classifier"), classes, d)};
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (auto &x : out) {
    x = std::exp(x - mx);
    sum += x;
  }
  for (auto &x : out) x /= sum;
  return out;
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::vector<double> attention_logits(const Tensor &V, const AttentionParams &params) {
  check_features(V, params.dim());
  const std::size_t k = V.rows(), d = V.cols(), h = params.hidden();
  std::vector<double> logits(k);
  for (std::size_t i = 0; i < k; ++i) {
    const auto v = V.row(i);
    double logit = 0.0;
    for (std::size_t r = 0; r < h; ++r) {
      double pre = 0.0;
      for (std::size_t j = 0; j < d; ++j) pre += params.W_v(r, j) * v[j];
      logit += params.U[r] * std::tanh(pre);
    }
    logits[i] = logit;
  }
  return logits;
}

AttentionMap attention_forward(const Tensor &V, const AttentionParams &params) {
  return {softmax(attention_logits(V, params))};
}

std::vector<double> bag_embed(const Tensor &V, const AttentionMap &alpha) {
  if (alpha.size() != V.rows()) throw std::invalid_argument("attention and bag sizes differ");
  std::vector<double> z(V.cols(), 0.0);
  for (std::size_t i = 0; i < V.rows(); ++i) {
    const auto v = V.row(i);
    for (std::size_t j = 0; j < z.size(); ++j) z[j] += alpha[i] * v[j];
  }
  return z;
}

std::vector<double> classify(std::span<const double> z, const ClassifierParams &params) {
  if (z.size() != params.W_c.cols()) throw std::invalid_argument("embedding dimension mismatch");
  std::vector<double> logits(params.classes());
  for (std::size_t c = 0; c < logits.size(); ++c) {
    double acc = params.b_c[c];
    for (std::size_t j = 0; j < z.size(); ++j) acc += params.W_c(c, j) * z[j];
    logits[c] = acc;
  }
  return softmax(logits);
}

std::vector<bool> dropout_mask(std::size_t k, double rate, std::uint64_t seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout rate must be in [0, 1)");
  g_dropout_calls.fetch_add(1, std::memory_order_relaxed);
  std::vector<bool> dropped(k, false);
  if (k == 0 || rate == 0.0) return dropped;
  Rng rng(seed);
  std::size_t count = 0;
  for (std::size_t i = 0; i < k; ++i) {
    dropped[i] = rng.bernoulli(rate);
    count += dropped[i];
  }
  if (count == k) dropped[rng.below(k)] = false;
  return dropped;
}

Bag instance_dropout(const Bag &bag, double rate, std::array<std::uint8_t, 3> mean_rgb,
                     std::uint64_t seed) {
  const auto mask = dropout_mask(bag.size(), rate, seed);
  Bag out = bag;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) {
      auto &tile = out.instances[i];
      tile = RgbImage(tile.width, tile.height, mean_rgb[0], mean_rgb[1], mean_rgb[2]);
    }
  return out;
}

std::uint64_t instance_dropout_calls() { return g_dropout_calls.load(); }

std::array<std::uint8_t, 3> mean_rgb(std::span<const Bag> bags) {
  std::array<double, 3> sum{};
  double count = 0.0;
  for (const auto &bag : bags)
    for (const auto &tile : bag.instances) {
      for (std::size_t i = 0; i < tile.pixel_count(); ++i)
        for (int c = 0; c < 3; ++c) sum[c] += tile.data[i * 3 + c];
      count += static_cast<double>(tile.pixel_count());
    }
  std::array<std::uint8_t, 3> out{};
  for (int c = 0; c < 3; ++c)
    out[c] = count > 0 ? static_cast<std::uint8_t>(std::lround(sum[c] / count)) : 0;
  return out;
}

MilOutput head_forward(const Tensor &V, const MilModel &model) {
  MilOutput out;
  out.alpha = attention_forward(V, model.attention);
  out.probs = classify(bag_embed(V, out.alpha), model.classifier);
  out.features = V;
  return out;
}

MilOutput mil_forward(const Bag &bag, const MilModel &model) {
  if (bag.size() == 0) throw std::invalid_argument("empty bag");
  return head_forward(extract_features(bag.instances, model.extractor), model);
}

double head_loss_and_grads(const Tensor &V, int label, const MilModel &model, MilModel &grads,
                           Tensor *grad_V) {
  const auto &att = model.attention;
  const auto &clf = model.classifier;
  check_features(V, att.dim());
  const std::size_t k = V.rows(), d = V.cols(), h = att.hidden(), n = clf.classes();
  if (label < 0 || static_cast<std::size_t>(label) >= n)
    throw std::invalid_argument("bag label out of range");

  // forward, keeping tanh activations
  Tensor act({k, h});
  std::vector<double> logits(k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    const auto v = V.row(i);
    for (std::size_t r = 0; r < h; ++r) {
      double pre = 0.0;
      for (std::size_t j = 0; j < d; ++j) pre += att.W_v(r, j) * v[j];
      act(i, r) = std::tanh(pre);
      logits[i] += att.U[r] * act(i, r);
    }
  }
  const auto alpha = softmax(logits);
  std::vector<double> z(d, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) z[j] += alpha[i] * V(i, j);
  std::vector<double> scores(n);
  for (std::size_t c = 0; c < n; ++c) {
    double acc = clf.b_c[c];
    for (std::size_t j = 0; j < d; ++j) acc += clf.W_c(c, j) * z[j];
    scores[c] = acc;
  }
  const double lse = logsumexp(scores);
  const double loss = lse - scores[static_cast<std::size_t>(label)];
  if (!std::isfinite(loss)) throw std::runtime_error("numerical failure");

  // classifier
  std::vector<double> g_scores(n);
  for (std::size_t c = 0; c < n; ++c)
    g_scores[c] = std::exp(scores[c] - lse) - (static_cast<int>(c) == label ? 1.0 : 0.0);
  std::vector<double> g_z(d, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    grads.classifier.b_c[c] += g_scores[c];
    for (std::size_t j = 0; j < d; ++j) {
      grads.classifier.W_c(c, j) += g_scores[c] * z[j];
      g_z[j] += g_scores[c] * clf.W_c(c, j);
    }
  }

  // attention softmax: dlogit_i = alpha_i (g_alpha_i - sum_j alpha_j g_alpha_j)
  std::vector<double> g_alpha(k, 0.0);
  double weighted = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < d; ++j) g_alpha[i] += g_z[j] * V(i, j);
    weighted += alpha[i] * g_alpha[i];
  }

  if (grad_V) *grad_V = Tensor({k, d});
  std::vector<double> g_pre(h);
  for (std::size_t i = 0; i < k; ++i) {
    const double g_logit = alpha[i] * (g_alpha[i] - weighted);
    for (std::size_t r = 0; r < h; ++r) {
      grads.attention.U[r] += g_logit * act(i, r);
      g_pre[r] = g_logit * att.U[r] * (1.0 - act(i, r) * act(i, r));
    }
    const auto v = V.row(i);
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t j = 0; j < d; ++j) grads.attention.W_v(r, j) += g_pre[r] * v[j];
    if (grad_V) {
      auto gv = grad_V->row(i);
      for (std::size_t j = 0; j < d; ++j) {
        double acc = alpha[i] * g_z[j];
        for (std::size_t r = 0; r < h; ++r) acc += att.W_v(r, j) * g_pre[r];
        gv[j] = acc;
      }
    }
  }
  return loss;
}

double loss_and_grads(std::span<const RgbImage *const> instances, int label,
                      const MilModel &model, MilModel &grads, int first_trainable) {
  if (instances.empty()) throw std::invalid_argument("empty bag");
  grads = model.zeros_like();
  const std::size_t k = instances.size();
  const auto d = static_cast<std::size_t>(model.extractor.config.feature_dim);
  Tensor V({k, d});
  std::vector<ExtractorTrace> traces(first_trainable < kExtractorLayers ? k : 0);
  for (std::size_t i = 0; i < k; ++i)
    extract_tile(*instances[i], model.extractor, V.row(i), traces.empty() ? nullptr : &traces[i]);

  Tensor grad_V;
  const double loss = head_loss_and_grads(V, label, model, grads, traces.empty() ? nullptr : &grad_V);
  for (std::size_t i = 0; i < traces.size(); ++i)
    extractor_backward(traces[i], grad_V.row(i), model.extractor, grads.extractor, first_trainable);
  return loss;
}

double loss_and_grads(const Bag &bag, const MilModel &model, MilModel &grads,
                      int first_trainable) {
  std::vector<const RgbImage *> ptrs;
  ptrs.reserve(bag.size());
  for (const auto &t : bag.instances) ptrs.push_back(&t);
  return loss_and_grads(ptrs, bag.label, model, grads, first_trainable);
}

void validate(const TrainConfig &c) {
  if (!(c.lr_head > 0.0) || !(c.lr_extractor > 0.0))
    throw std::invalid_argument("learning rates must be > 0");
  if (c.epochs < 0 || c.warmup_epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (!(c.dropout_rate >= 0.0 && c.dropout_rate < 1.0))
    throw std::invalid_argument("dropout rate must be in [0, 1)");
  if (!(c.plateau_factor > 0.0 && c.plateau_factor < 1.0))
    throw std::invalid_argument("plateau factor must be in (0, 1)");
  if (c.plateau_patience < 1) throw std::invalid_argument("plateau patience must be >= 1");
  if (c.first_trainable_layer < 0 || c.first_trainable_layer > kExtractorLayers)
    throw std::invalid_argument("first trainable layer out of range");
}

double PlateauSchedule::observe(double val_loss) {
  if (!best_ || val_loss < *best_ - threshold_) {
    best_ = val_loss;
    wait_ = 0;
    return 1.0;
  }
  if (++wait_ >= patience_) {
    wait_ = 0;
    return factor_;
  }
  return 1.0;
}

namespace {

// Slot order: extractor tensors, then W_v, U, W_c, b_c.
std::vector<AdamSlot> make_slots(MilModel &model, MilModel &grads, double lr_head,
                                 double lr_extractor, int first_trainable) {
  std::vector<AdamSlot> slots;
  std::vector<Tensor *> g_ext;
  for_each_tensor(grads.extractor, [&](const std::string &, Tensor &t, int) { g_ext.push_back(&t); });
  std::size_t i = 0;
  for_each_tensor(model.extractor, [&](const std::string &, Tensor &t, int layer) {
    slots.push_back({&t, layer >= first_trainable ? g_ext[i] : nullptr, lr_extractor});
    ++i;
  });
  slots.push_back({&model.attention.W_v, &grads.attention.W_v, lr_head});
  slots.push_back({&model.attention.U, &grads.attention.U, lr_head});
  slots.push_back({&model.classifier.W_c, &grads.classifier.W_c, lr_head});
  slots.push_back({&model.classifier.b_c, &grads.classifier.b_c, lr_head});
  return slots;
}

struct ValScore {
  double loss = 0.0;
  double acc = 0.0;
};

ValScore score_features(std::span<const Tensor> features, std::span<const Bag> bags,
                        const MilModel &model) {
  ValScore s;
  for (std::size_t b = 0; b < bags.size(); ++b) {
    const auto out = head_forward(features[b], model);
    s.loss += -std::log(std::max(out.probs[static_cast<std::size_t>(bags[b].label)], 1e-300));
    s.acc += argmax(out.probs) == bags[b].label ? 1.0 : 0.0;
  }
  s.loss /= static_cast<double>(bags.size());
  s.acc /= static_cast<double>(bags.size());
  return s;
}

std::vector<Tensor> all_features(std::span<const Bag> bags, const ExtractorParams &extractor) {
  std::vector<Tensor> out(bags.size());
  for (std::size_t b = 0; b < bags.size(); ++b)
    out[b] = extract_features(bags[b].instances, extractor);
  return out;
}

}  // namespace

std::pair<double, double> evaluate_bags(std::span<const Bag> bags, const MilModel &model) {
  if (bags.empty()) throw std::invalid_argument("no bags to evaluate");
  const auto features = all_features(bags, model.extractor);
  const auto s = score_features(features, bags, model);
  return {s.loss, s.acc};
}

FitResult fit(std::span<const Bag> train, std::span<const Bag> val, const MilModel &init,
              const TrainConfig &config, std::array<std::uint8_t, 3> dropout_rgb) {
  validate(config);
  if (train.empty() || val.empty()) throw std::invalid_argument("empty split");
  for (const auto &bags : {train, val})
    for (const auto &bag : bags) {
      if (bag.size() == 0) throw std::invalid_argument("empty bag " + bag.slide_id);
      if (bag.label < 0 || static_cast<std::size_t>(bag.label) >= init.classifier.classes())
        throw std::invalid_argument("bag label out of range: " + bag.slide_id);
    }

  FitResult result{init, {}, -1};
  if (config.epochs == 0) return result;

  MilModel model = init;
  double lr_head = config.lr_head;
  double lr_extractor = config.lr_extractor;
  const AdamConfig adam{config.adam_beta1, config.adam_beta2, config.adam_eps};
  AdamState state;
  PlateauSchedule schedule(config.plateau_patience, config.plateau_factor,
                           config.plateau_threshold);
  Rng shuffle_rng(derive_seed(config.seed, "fit/shuffle"));
  const std::uint64_t dropout_stream = derive_seed(config.seed, "fit/dropout");
  std::uint64_t step = 0;

  const int size = model.extractor.config.input_size;
  const RgbImage blank(size, size, dropout_rgb[0], dropout_rgb[1], dropout_rgb[2]);

  // While the extractor is frozen, features are fixed: cache them, including
  // the features of the constant dropout tile.
  std::vector<Tensor> train_cache, val_cache;
  std::vector<double> blank_features;
  bool cache_valid = false;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  MilModel grads = model.zeros_like();
  double best_acc = -1.0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const bool frozen = epoch < config.warmup_epochs;
    const int first_trainable = frozen ? kExtractorLayers : config.first_trainable_layer;
    if (frozen && !cache_valid) {
      train_cache = all_features(train, model.extractor);
      val_cache = all_features(val, model.extractor);
      blank_features.assign(static_cast<std::size_t>(model.extractor.config.feature_dim), 0.0);
      extract_tile(blank, model.extractor, blank_features);
      cache_valid = true;
    }

    shuffle_rng.shuffle(order.begin(), order.end());
    double train_loss = 0.0;
    for (std::size_t b : order) {
      const Bag &bag = train[b];
      const auto dropped =
          dropout_mask(bag.size(), config.dropout_rate, splitmix64(dropout_stream + step++));
      double loss;
      if (first_trainable >= kExtractorLayers) {
        Tensor V = train_cache[b];
        for (std::size_t i = 0; i < bag.size(); ++i)
          if (dropped[i]) std::copy(blank_features.begin(), blank_features.end(), V.row(i).begin());
        grads = model.zeros_like();
        loss = head_loss_and_grads(V, bag.label, model, grads);
      } else {
        std::vector<const RgbImage *> tiles(bag.size());
        for (std::size_t i = 0; i < bag.size(); ++i)
          tiles[i] = dropped[i] ? &blank : &bag.instances[i];
        loss = loss_and_grads(tiles, bag.label, model, grads, first_trainable);
      }
      train_loss += loss;
      const auto slots = make_slots(model, grads, lr_head, lr_extractor, first_trainable);
      adam_step(slots, state, adam);
    }
    if (!frozen) cache_valid = false;

    const ValScore vs = cache_valid ? score_features(val_cache, val, model)
                                    : score_features(all_features(val, model.extractor), val, model);
    result.log.push_back({epoch + 1, train_loss / static_cast<double>(train.size()), vs.loss,
                          vs.acc, lr_head, lr_extractor});
    if (vs.acc > best_acc) {
      best_acc = vs.acc;
      result.model = model;
      result.best_epoch = epoch + 1;
    }
    const double factor = schedule.observe(vs.loss);
    lr_head *= factor;
    lr_extractor *= factor;
  }
  return result;
}

std::string epoch_log_csv(std::span<const EpochLog> log) {
  std::ostringstream out;
  out << "epoch,train_loss,val_loss,val_acc,lr_head,lr_extractor\n";
  out << std::setprecision(17);
  for (const auto &e : log)
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.val_acc << ','
        << e.lr_head << ',' << e.lr_extractor << '\n';
  return out.str();
}

std::vector<NamedTensor> to_named_tensors(const MilModel &model) {
  auto out = to_named_tensors(model.extractor, "extractor");
  out.push_back({"attention.W_v", model.attention.W_v});
  out.push_back({"attention.U", model.attention.U});
  out.push_back({"classifier.W_c", model.classifier.W_c});
  out.push_back({"classifier.b_c", model.classifier.b_c});
  return out;
}

MilModel mil_model_from_tensors(std::span<const NamedTensor> tensors) {
  auto find = [&](const std::string &name) -> const Tensor & {
    for (const auto &nt : tensors)
      if (nt.name == name) return nt.tensor;
    throw std::runtime_error("missing tensor " + name);
  };
  MilModel m;
  m.extractor = extractor_from_tensors(tensors, "extractor");
  m.attention = {find("attention.W_v"), find("attention.U")};
  m.classifier = {find("classifier.W_c"), find("classifier.b_c")};
  if (m.attention.dim() != static_cast<std::size_t>(m.extractor.config.feature_dim) ||
      m.attention.U.size() != m.attention.hidden() ||
      m.classifier.W_c.cols() != m.attention.dim() ||
      m.classifier.b_c.size() != m.classifier.classes())
    throw std::runtime_error("inconsistent model tensor shapes");
  return m;
}

}  // namespace milpath
