// SPDX-License-Identifier: Apache-2.0
//
// Independent reference implementations shared by the unit tests and the
// acceptance binary. None of these call into the library code they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "milpath/image.hpp"
#include "milpath/mil.hpp"
#include "milpath/rng.hpp"
#include "milpath/tensor.hpp"

namespace oracle {

inline double blue_ratio(double r, double g, double b) {
  return (100.0 * b / (1.0 + r + g)) * (256.0 / (1.0 + r + g + b));
}

/// Tile origins along one axis, found by walking every pixel offset.
inline std::vector<int> axis_positions(int dim, int tile, int stride) {
  std::vector<int> out;
  for (int x = 0; x + tile <= dim; ++x)
    if (x % stride == 0) out.push_back(x);
  return out;
}

inline int stride_for(int tile, double overlap) {
  return static_cast<int>(std::lround(tile * (1.0 - overlap)));
}

inline double sq(double v) { return v * v; }

/// Minimum-inertia two-way partition by enumerating every labelling.
/// Returns labels with point 0 in cluster 0.
inline std::vector<int> best_two_partition(const milpath::Tensor &pts) {
  const std::size_t k = pts.rows(), p = pts.cols();
  double best = std::numeric_limits<double>::infinity();
  std::vector<int> best_labels;
  for (std::uint64_t mask = 0; mask < (1ULL << (k - 1)); ++mask) {
    std::vector<int> labels(k, 0);
    for (std::size_t i = 1; i < k; ++i) labels[i] = (mask >> (i - 1)) & 1;
    double inertia = 0.0;
    bool empty = false;
    for (int c = 0; c < 2; ++c) {
      std::vector<double> mean(p, 0.0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < k; ++i)
        if (labels[i] == c) {
          ++n;
          for (std::size_t j = 0; j < p; ++j) mean[j] += pts(i, j);
        }
      if (n == 0) {
        empty = true;
        break;
      }
      for (auto &m : mean) m /= static_cast<double>(n);
      for (std::size_t i = 0; i < k; ++i)
        if (labels[i] == c)
          for (std::size_t j = 0; j < p; ++j) inertia += sq(pts(i, j) - mean[j]);
    }
    if (!empty && inertia < best) {
      best = inertia;
      best_labels = labels;
    }
  }
  return best_labels;
}

/// Labels renamed so the first point seen in each cluster gets the next id.
inline std::vector<int> canonical(const std::vector<int> &labels) {
  std::vector<int> map(labels.size() + 1, -1), out;
  int next = 0;
  for (int l : labels) {
    if (map[l] < 0) map[l] = next++;
    out.push_back(map[l]);
  }
  return out;
}

/// Largest-remainder rounding by exhaustive search: among all ways to round
/// each share down or up that hit `target`, keep the one with the largest
/// sum of rounded-up remainders, ties to the lexicographically lowest index set.
inline std::vector<std::size_t> largest_remainder(const std::vector<double> &shares,
                                                  std::size_t target) {
  const std::size_t n = shares.size();
  std::vector<std::size_t> floors(n);
  std::size_t base = 0;
  for (std::size_t i = 0; i < n; ++i) {
    floors[i] = static_cast<std::size_t>(std::floor(shares[i] + 1e-9));
    base += floors[i];
  }
  const std::size_t extra = target > base ? target - base : 0;
  double best = -1.0;
  std::vector<std::size_t> best_set;
  for (std::uint64_t mask = 0; mask < (1ULL << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcountll(mask)) != std::min(extra, n)) continue;
    double score = 0.0;
    std::vector<std::size_t> set;
    for (std::size_t i = 0; i < n; ++i)
      if (mask >> i & 1) {
        score += std::max(0.0, shares[i] - static_cast<double>(floors[i]));
        set.push_back(i);
      }
    if (score > best + 1e-12 || (std::abs(score - best) <= 1e-12 && set < best_set)) {
      best = score;
      best_set = set;
    }
  }
  for (auto i : best_set) ++floors[i];
  return floors;
}

/// Budget allocation: proportional shares over clusters with room left,
/// rounded by largest_remainder, capped, repeated until the budget is spent.
inline std::vector<std::size_t> allocate(const std::vector<double> &weights, std::size_t total,
                                         const std::vector<std::size_t> &sizes) {
  const std::size_t c = sizes.size();
  std::vector<std::size_t> budget(c, 0);
  std::size_t remaining =
      std::min(total, std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}));
  while (remaining > 0) {
    std::vector<std::size_t> open;
    double wsum = 0.0;
    for (std::size_t m = 0; m < c; ++m)
      if (budget[m] < sizes[m]) {
        open.push_back(m);
        wsum += weights[m];
      }
    std::vector<double> shares;
    for (auto m : open)
      shares.push_back(static_cast<double>(remaining) *
                       (wsum > 0.0 ? weights[m] / wsum : 1.0 / static_cast<double>(open.size())));
    const auto rounded = largest_remainder(shares, remaining);
    for (std::size_t i = 0; i < open.size(); ++i) {
      const std::size_t g = std::min(rounded[i], sizes[open[i]] - budget[open[i]]);
      budget[open[i]] += g;
      remaining -= g;
    }
  }
  return budget;
}

inline milpath::RgbImage random_image(int w, int h, milpath::Rng &rng) {
  milpath::RgbImage img(w, h);
  for (auto &b : img.data) b = static_cast<std::uint8_t>(rng.below(256));
  return img;
}

/// Max over tensors of ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
struct GradCheck {
  double worst = 0.0;
  std::string worst_tensor;
};

/// Central differences of `loss` with respect to every tensor in `model`
/// selected by `include`, compared with `analytic`.
inline GradCheck check_gradients(
    milpath::MilModel model, const milpath::MilModel &analytic,
    const std::function<double(const milpath::MilModel &)> &loss,
    const std::function<bool(int layer)> &include_extractor_layer, double eps = 1e-5) {
  GradCheck out;
  auto compare = [&](const std::string &name, milpath::Tensor &param, const milpath::Tensor &grad) {
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param[i];
      param[i] = saved + eps;
      const double up = loss(model);
      param[i] = saved - eps;
      const double down = loss(model);
      param[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      diff += sq(numeric - grad[i]);
      na += sq(grad[i]);
      nn += sq(numeric);
    }
    const double rel = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-6});
    if (rel > out.worst) {
      out.worst = rel;
      out.worst_tensor = name;
    }
  };
  milpath::MilModel g = analytic;
  std::vector<milpath::Tensor *> grads;
  milpath::for_each_tensor(g.extractor,
                           [&](const std::string &, milpath::Tensor &t, int) { grads.push_back(&t); });
  std::size_t i = 0;
  milpath::for_each_tensor(model.extractor, [&](const std::string &name, milpath::Tensor &t, int layer) {
    if (include_extractor_layer(layer)) compare(name, t, *grads[i]);
    ++i;
  });
  compare("W_v", model.attention.W_v, analytic.attention.W_v);
  compare("U", model.attention.U, analytic.attention.U);
  compare("W_c", model.classifier.W_c, analytic.classifier.W_c);
  compare("b_c", model.classifier.b_c, analytic.classifier.b_c);
  return out;
}

/// Small random model and bag in the size range of the gradient checks.
struct SmallCase {
  milpath::MilModel model;
  milpath::Bag bag;
};

inline SmallCase small_case(std::uint64_t seed) {
  milpath::Rng rng(seed);
  milpath::ExtractorConfig ec;
  ec.input_size = 8;
  ec.widths = {3, 4, 4};
  ec.reduced_channels = 2;
  ec.feature_dim = 2 + static_cast<int>(rng.below(7));           // d in [2, 8]
  const std::size_t h = 1 + rng.below(8);                          // h in [1, 8]
  const std::size_t classes = 2 + rng.below(2);
  SmallCase c{milpath::init_mil_model(seed, ec, h, classes), {}};
  // Non-zero biases so ReLUs sit in both regimes.
  milpath::for_each_tensor(c.model.extractor, [&](const std::string &name, milpath::Tensor &t, int) {
    if (name.find("bias") != std::string::npos)
      for (auto &v : t.values) v = rng.uniform(-0.1, 0.3);
  });
  for (auto &v : c.model.classifier.b_c.values) v = rng.uniform(-0.5, 0.5);
  for (auto &v : c.model.attention.U.values) v = rng.uniform(-2.0, 2.0);
  const std::size_t k = 1 + rng.below(5);                          // k in [1, 5]
  c.bag.slide_id = "grad";
  c.bag.label = static_cast<int>(rng.below(classes));
  for (std::size_t i = 0; i < k; ++i) c.bag.instances.push_back(random_image(8, 8, rng));
  return c;
}

inline std::string read_file(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Relative paths of every regular file below `root`, sorted.
inline std::vector<std::string> list_files(const std::filesystem::path &root) {
  std::vector<std::string> out;
  for (const auto &e : std::filesystem::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(std::filesystem::relative(e.path(), root).string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace oracle
