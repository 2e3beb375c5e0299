// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "milpath/mil.hpp"
#include "milpath/optim.hpp"
#include "milpath/rng.hpp"
#include "oracles.hpp"

using namespace milpath;

namespace {

Tensor matrix(std::size_t r, std::size_t c, std::vector<double> v) {
  Tensor t({r, c});
  t.values = std::move(v);
  return t;
}

Tensor random_matrix(std::size_t r, std::size_t c, Rng &rng, double scale = 1.0) {
  Tensor t({r, c});
  for (auto &v : t.values) v = rng.uniform(-scale, scale);
  return t;
}

MilModel random_head(std::uint64_t seed, std::size_t d, std::size_t h, std::size_t n) {
  ExtractorConfig ec;
  ec.input_size = 8;
  ec.feature_dim = static_cast<int>(d);
  MilModel m = init_mil_model(seed, ec, h, n);
  Rng rng(seed + 1);
  for (auto &v : m.attention.U.values) v = rng.uniform(-2, 2);
  for (auto &v : m.classifier.b_c.values) v = rng.uniform(-1, 1);
  return m;
}

}  // namespace

TEST_CASE("attention examples") {
  AttentionParams p{matrix(1, 1, {1.0}), Tensor({1}, 2.0)};
  CHECK(attention_forward(matrix(1, 1, {0.3}), p).weights == std::vector<double>{1.0});
  const auto same = attention_forward(matrix(3, 1, {0.2, 0.2, 0.2}), p);
  for (double a : same.weights) CHECK(a == doctest::Approx(1.0 / 3).epsilon(1e-15));
  // logits 2 tanh(atanh(0.5)) = 1 and 0, so alpha = (sigma(1), 1 - sigma(1))
  const auto two = attention_forward(matrix(2, 1, {std::atanh(0.5), 0.0}), p);
  CHECK(two[0] == doctest::Approx(0.7310585786300049).epsilon(1e-12));
  CHECK(two[1] == doctest::Approx(0.2689414213699951).epsilon(1e-12));
  CHECK_THROWS_WITH(attention_forward(Tensor({0, 1}), p), "empty bag");
}

TEST_CASE("attention sums to one and ignores a constant logit shift") {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 1 + rng.below(30), d = 1 + rng.below(8), h = 1 + rng.below(8);
    AttentionParams p{random_matrix(h, d, rng), random_matrix(h, 1, rng, 3.0)};
    p.U.shape = {h};
    const Tensor V = random_matrix(k, d, rng, 2.0);
    const auto a = attention_forward(V, p);
    CHECK(std::accumulate(a.weights.begin(), a.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    for (double w : a.weights) CHECK(w >= 0.0);
    auto logits = attention_logits(V, p);
    for (auto &l : logits) l += 123.0;
    const auto shifted = softmax(logits);
    for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(shifted[i] - a[i]) < 1e-12);
  }
}

TEST_CASE("bag embedding examples and linearity") {
  const Tensor V = matrix(2, 3, {0, 0, 0, 4, 4, 4});
  CHECK(bag_embed(V, {{1.0, 0.0}}) == std::vector<double>{0, 0, 0});
  CHECK(bag_embed(V, {{0.25, 0.75}}) == std::vector<double>{3, 3, 3});
  const Tensor W = matrix(2, 2, {5, -1, 5, -1});
  CHECK(bag_embed(W, {{0.5, 0.5}}) == std::vector<double>{5, -1});
  Rng rng(2);
  const Tensor A = random_matrix(4, 3, rng), B = random_matrix(4, 3, rng);
  Tensor sum = A;
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += 2.0 * B[i];
  const AttentionMap al{{0.1, 0.2, 0.3, 0.4}};
  const auto za = bag_embed(A, al), zb = bag_embed(B, al), zs = bag_embed(sum, al);
  for (int j = 0; j < 3; ++j) CHECK(zs[j] == doctest::Approx(za[j] + 2.0 * zb[j]).epsilon(1e-12));
  const AttentionMap a1{{1, 0, 0, 0}}, a2{{0, 0.5, 0.5, 0}}, mix{{0.25, 0.375, 0.375, 0}};
  const auto z1 = bag_embed(A, a1), z2 = bag_embed(A, a2), zm = bag_embed(A, mix);
  for (int j = 0; j < 3; ++j) CHECK(zm[j] == doctest::Approx(0.25 * z1[j] + 0.75 * z2[j]).epsilon(1e-12));
}

TEST_CASE("classifier examples") {
  ClassifierParams zero{Tensor({3, 2}), Tensor({3})};
  for (double p : classify(std::vector<double>{1, 2}, zero)) CHECK(p == doctest::Approx(1.0 / 3));
  ClassifierParams biased{Tensor({2, 2}), Tensor({2})};
  biased.b_c[0] = 10.0;
  const auto p = classify(std::vector<double>{1, 2}, biased);
  CHECK(std::abs(p[0] - 0.99995) < 1e-5);
  CHECK(std::abs(p[1] - 0.00005) < 1e-5);
  CHECK(p[0] + p[1] == doctest::Approx(1.0).epsilon(1e-15));
  const std::vector<double> logits{0.3, -1.2, 2.0};
  const auto a = softmax(logits);
  const auto b = softmax(std::vector<double>{1000.3, 998.8, 1002.0});
  for (int i = 0; i < 3; ++i) CHECK(std::abs(a[i] - b[i]) < 1e-12);
  CHECK(argmax(std::vector<double>{0.2, 0.4, 0.4}) == 1);
}

TEST_CASE("instance dropout") {
  Bag bag;
  Rng rng(3);
  for (int i = 0; i < 6; ++i) bag.instances.push_back(oracle::random_image(8, 8, rng));
  bag.tile_refs.resize(6);
  for (int i = 0; i < 6; ++i) bag.tile_refs[i].x = i;
  const Bag same = instance_dropout(bag, 0.0, {1, 2, 3}, 9);
  CHECK(same.instances == bag.instances);

  const auto mask = dropout_mask(10000, 0.5, 42);
  const double frac = std::count(mask.begin(), mask.end(), true) / 10000.0;
  CHECK(frac >= 0.48);
  CHECK(frac <= 0.52);

  for (std::uint64_t s = 0; s < 200; ++s) CHECK_FALSE(dropout_mask(1, 0.99, s)[0]);
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto m = dropout_mask(3, 0.95, s);
    CHECK(std::count(m.begin(), m.end(), false) >= 1);
  }

  const Bag dropped = instance_dropout(bag, 0.5, {11, 22, 33}, 5);
  const auto m = dropout_mask(6, 0.5, 5);
  for (int i = 0; i < 6; ++i) {
    CHECK(dropped.tile_refs[i].x == i);
    if (m[i]) CHECK(dropped.instances[i] == RgbImage(8, 8, 11, 22, 33));
    else CHECK(dropped.instances[i] == bag.instances[i]);
  }
}

TEST_CASE("zero model gives uniform attention and probabilities") {
  ExtractorConfig ec;
  ec.input_size = 8;
  ec.feature_dim = 4;
  const MilModel zero = init_mil_model(1, ec, 3, 3).zeros_like();
  Bag bag;
  Rng rng(4);
  for (int i = 0; i < 4; ++i) bag.instances.push_back(oracle::random_image(8, 8, rng));
  const auto out = mil_forward(bag, zero);
  for (double a : out.alpha.weights) CHECK(a == doctest::Approx(0.25));
  for (double p : out.probs) CHECK(p == doctest::Approx(1.0 / 3));
  CHECK(mil_forward(bag, zero).probs == out.probs);
}

TEST_CASE("permutation and duplication invariances") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto c = oracle::small_case(100 + s);
    const auto base = mil_forward(c.bag, c.model);
    MilModel g = c.model.zeros_like();
    const double loss = loss_and_grads(c.bag, c.model, g);

    Bag rev = c.bag;
    std::reverse(rev.instances.begin(), rev.instances.end());
    const auto r = mil_forward(rev, c.model);
    const std::size_t k = c.bag.size();
    for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(r.alpha[k - 1 - i] - base.alpha[i]) < 1e-9);
    for (std::size_t j = 0; j < base.probs.size(); ++j) CHECK(std::abs(r.probs[j] - base.probs[j]) < 1e-9);
    MilModel g2 = c.model.zeros_like();
    CHECK(std::abs(loss_and_grads(rev, c.model, g2) - loss) < 1e-9);

    Bag dup = c.bag;
    dup.instances.insert(dup.instances.end(), c.bag.instances.begin(), c.bag.instances.end());
    const auto d = mil_forward(dup, c.model);
    for (std::size_t j = 0; j < base.probs.size(); ++j) CHECK(std::abs(d.probs[j] - base.probs[j]) < 1e-9);
    for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(d.alpha[i] - base.alpha[i] / 2) < 1e-9);
  }
}

TEST_CASE("loss examples") {
  MilModel m = random_head(5, 4, 3, 3).zeros_like();
  Tensor V({2, 4}, 0.5);
  MilModel g = m.zeros_like();
  CHECK(head_loss_and_grads(V, 1, m, g) == doctest::Approx(std::log(3.0)).epsilon(1e-12));
  m.classifier.b_c[2] = 1000.0;
  MilModel g2 = m.zeros_like();
  CHECK(head_loss_and_grads(V, 2, m, g2) == 0.0);
  for (double v : g2.classifier.W_c.values) CHECK(v == 0.0);
  for (double v : g2.classifier.b_c.values) CHECK(v == 0.0);
  m.classifier.b_c[0] = std::nan("");
  MilModel g3 = m.zeros_like();
  CHECK_THROWS_WITH(head_loss_and_grads(V, 0, m, g3), "numerical failure");
}

TEST_CASE("full-model gradients match central differences") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto c = oracle::small_case(s);
    MilModel grads = c.model.zeros_like();
    loss_and_grads(c.bag, c.model, grads, 0);
    auto loss = [&](const MilModel &m) {
      MilModel scratch = m.zeros_like();
      return loss_and_grads(c.bag, m, scratch, 0);
    };
    const auto check = oracle::check_gradients(c.model, grads, loss, [](int) { return true; });
    INFO("case " << s << " worst tensor " << check.worst_tensor);
    CHECK(check.worst < 1e-4);
  }
}

TEST_CASE("frozen extractor layers get zero gradient") {
  auto c = oracle::small_case(77);
  MilModel grads = c.model.zeros_like();
  loss_and_grads(c.bag, c.model, grads, 1);
  const auto zero = c.model.zeros_like();
  CHECK(grads.extractor.conv(0) == zero.extractor.conv(0));
  CHECK_FALSE(grads.extractor.conv(1) == zero.extractor.conv(1));
}

TEST_CASE("adam examples") {
  Tensor p({3}), g({3});
  p.values = {1.0, -2.0, 0.5};
  g.values = {0.3, -4.0, 1e-3};
  AdamState state;
  const std::vector<AdamSlot> slots{{&p, &g, 0.01}};
  const Tensor before = p;
  adam_step(slots, state);
  for (int i = 0; i < 3; ++i) {
    const double step = before[i] - p[i];
    CHECK(std::abs(std::abs(step) - 0.01) < 1e-6);
    CHECK((step > 0) == (g[i] > 0));
  }
  const Tensor m_before = state.m[0];
  g.fill(0.0);
  adam_step(slots, state);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(state.m[0][i]) < std::abs(m_before[i]));
  // With zero gradient the update is driven by the decayed first moment only.
  Tensor q({2}, 1.0), zero({2}, 0.0);
  AdamState fresh;
  adam_step(std::vector<AdamSlot>{{&q, &zero, 0.1}}, fresh);
  CHECK(q == Tensor({2}, 1.0));
  CHECK(fresh.m[0] == Tensor({2}, 0.0));
}

TEST_CASE("adam trajectories repeat exactly") {
  auto run = [] {
    Tensor p({4}, 1.0), g({4});
    AdamState s;
    for (int t = 0; t < 50; ++t) {
      for (int i = 0; i < 4; ++i) g[i] = 2 * p[i] - i;
      adam_step(std::vector<AdamSlot>{{&p, &g, 0.05}}, s);
    }
    return p;
  };
  CHECK(run() == run());
}

TEST_CASE("plateau schedule drops once after patience epochs") {
  PlateauSchedule s(3, 0.1, 1e-4);
  std::vector<double> factors;
  for (int e = 0; e < 4; ++e) factors.push_back(s.observe(1.0));
  CHECK(factors == std::vector<double>{1, 1, 1, 0.1});
  PlateauSchedule improving(2, 0.1, 1e-4);
  for (double v : {5.0, 4.0, 3.0, 2.0}) CHECK(improving.observe(v) == 1.0);
}

namespace {

// Positive bags hold at least one saturated blue tile among gray tiles.
std::vector<Bag> separable_bags(int n, Rng &rng) {
  std::vector<Bag> bags;
  for (int b = 0; b < n; ++b) {
    Bag bag;
    bag.slide_id = "b" + std::to_string(b);
    bag.label = b % 2;
    const int k = 3 + static_cast<int>(rng.below(4));
    for (int i = 0; i < k; ++i) {
      const auto v = static_cast<std::uint8_t>(100 + rng.below(60));
      bag.instances.emplace_back(8, 8, v, v, v);
    }
    if (bag.label == 1) bag.instances[rng.below(k)] = RgbImage(8, 8, 20, 20, 230);
    bags.push_back(std::move(bag));
  }
  return bags;
}

MilModel small_model(std::uint64_t seed) {
  ExtractorConfig ec;
  ec.input_size = 8;
  ec.feature_dim = 16;
  return init_mil_model(seed, ec, 8, 2);
}

}  // namespace

TEST_CASE("fit learns separable bags") {
  Rng rng(31);
  const auto train = separable_bags(24, rng), val = separable_bags(12, rng);
  // Oracle: a bag is positive iff some tile is bluer than it is red.
  for (const auto &bag : val) {
    bool blue = false;
    for (const auto &t : bag.instances) blue = blue || t.at(0, 0, 2) > t.at(0, 0, 0) + 50;
    CHECK(blue == (bag.label == 1));
  }
  TrainConfig cfg;
  cfg.epochs = 30;
  cfg.lr_head = 1e-2;
  cfg.dropout_rate = 0.0;
  cfg.seed = 3;
  const auto result = fit(train, val, small_model(1), cfg, mean_rgb(train));
  REQUIRE(result.log.size() == 30);
  CHECK(evaluate_bags(val, result.model).second >= 0.9);
  const auto best = std::max_element(result.log.begin(), result.log.end(),
                                     [](const auto &a, const auto &b) { return a.val_acc < b.val_acc; });
  CHECK(result.best_epoch == best->epoch);
}

TEST_CASE("fit with zero epochs returns the initialization") {
  Rng rng(32);
  const auto bags = separable_bags(4, rng);
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto init = small_model(2);
  const auto r = fit(bags, bags, init, cfg, {0, 0, 0});
  CHECK(r.model == init);
  CHECK(r.log.empty());
  CHECK_THROWS(fit({}, bags, init, cfg, {0, 0, 0}));
}

TEST_CASE("fit is deterministic and evaluation never draws dropout") {
  Rng rng(33);
  const auto train = separable_bags(8, rng), val = separable_bags(4, rng);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.warmup_epochs = 2;
  cfg.seed = 8;
  const auto a = fit(train, val, small_model(4), cfg, mean_rgb(train));
  const auto b = fit(train, val, small_model(4), cfg, mean_rgb(train));
  CHECK(a.model == b.model);
  CHECK(epoch_log_csv(a.log) == epoch_log_csv(b.log));

  const auto before = instance_dropout_calls();
  evaluate_bags(val, a.model);
  for (const auto &bag : val) mil_forward(bag, a.model);
  CHECK(instance_dropout_calls() == before);
}

TEST_CASE("epoch log csv header and rows") {
  std::vector<EpochLog> log{{1, 0.5, 0.6, 0.75, 1e-3, 1e-4}};
  const auto csv = epoch_log_csv(log);
  CHECK(csv.rfind("epoch,train_loss,val_loss,val_acc,lr_head,lr_extractor\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("model tensors round trip") {
  const auto m = random_head(9, 6, 4, 3);
  CHECK(mil_model_from_tensors(to_named_tensors(m)) == m);
}
