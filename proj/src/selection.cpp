// SPDX-License-Identifier: Apache-2.0
#include "milpath/selection.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "milpath/rng.hpp"

namespace milpath {

std::vector<double> PcaModel::project(std::span<const double> x) const {
  std::vector<double> out(components(), 0.0);
  for (std::size_t r = 0; r < out.size(); ++r)
    for (std::size_t j = 0; j < mean.size(); ++j) out[r] += basis(r, j) * (x[j] - mean[j]);
  return out;
}

PcaResult pca_fit_transform(const Tensor &V, std::size_t p) {
  const std::size_t k = V.rows(), d = V.cols();
  if (k < 2) throw std::invalid_argument("insufficient instances");
  if (p < 1 || p > std::min(k, d))
    throw std::invalid_argument("pca dimension must be in [1, min(k, d)]");

  Eigen::MatrixXd X(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j)
      X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = V(i, j);
  const Eigen::RowVectorXd mu = X.colwise().mean();
  X.rowwise() -= mu;
  const Eigen::MatrixXd cov = (X.transpose() * X) / static_cast<double>(k - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("covariance eigendecomposition failed");

  PcaResult result;
  auto &model = result.model;
  model.mean.assign(mu.data(), mu.data() + d);
  model.basis = Tensor({p, d});
  // Eigen sorts eigenvalues ascending.
  for (std::size_t r = 0; r < p; ++r) {
    const auto col = static_cast<Eigen::Index>(d - 1 - r);
    Eigen::VectorXd u = eig.eigenvectors().col(col);
    Eigen::Index big = 0;
    u.cwiseAbs().maxCoeff(&big);
    if (u(big) < 0) u = -u;
    for (std::size_t j = 0; j < d; ++j) model.basis(r, j) = u(static_cast<Eigen::Index>(j));
    model.eigenvalues.push_back(eig.eigenvalues()(col));
  }

  result.projected = Tensor({k, p});
  for (std::size_t i = 0; i < k; ++i) {
    const auto proj = model.project(V.row(i));
    std::copy(proj.begin(), proj.end(), result.projected.row(i).begin());
  }
  return result;
}

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double t = a[j] - b[j];
    s += t * t;
  }
  return s;
}

// Nearest centroid per point (ties to the lower index); returns inertia.
double assign(const Tensor &points, const Tensor &centroids, std::vector<int> &labels,
              std::vector<double> &dist) {
  double inertia = 0.0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    int arg = 0;
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
      const double dd = sq_dist(points.row(i), centroids.row(c));
      if (dd < best) {
        best = dd;
        arg = static_cast<int>(c);
      }
    }
    labels[i] = arg;
    dist[i] = best;
    inertia += best;
  }
  return inertia;
}

Tensor kmeanspp_init(const Tensor &points, std::size_t c, Rng &rng) {
  const std::size_t k = points.rows(), p = points.cols();
  Tensor centroids({c, p});
  std::vector<double> d2(k, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.below(k);
  for (std::size_t m = 0; m < c; ++m) {
    std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(m).begin());
    if (m + 1 == c) break;
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      d2[i] = std::min(d2[i], sq_dist(points.row(i), centroids.row(m)));
      total += d2[i];
    }
    if (total <= 0.0) {
      pick = rng.below(k);
      continue;
    }
    const double target = rng.uniform() * total;
    double cum = 0.0;
    pick = k - 1;
    for (std::size_t i = 0; i < k; ++i) {
      cum += d2[i];
      if (cum > target && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centroids;
}

}  // namespace

ClusterAssignment kmeans(const Tensor &points, std::size_t c, std::uint64_t seed,
                         const KMeansOptions &options) {
  const std::size_t k = points.rows(), p = points.cols();
  if (c < 1) throw std::invalid_argument("cluster count must be >= 1");
  if (c > k) throw std::invalid_argument("more clusters than points");

  Rng rng(seed);
  ClusterAssignment out;
  out.centroids = kmeanspp_init(points, c, rng);
  out.labels.assign(k, 0);
  std::vector<double> dist(k);

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    out.inertia = assign(points, out.centroids, out.labels, dist);
    out.inertia_history.push_back(out.inertia);
    out.iterations = iter + 1;

    Tensor next({c, p});
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t i = 0; i < k; ++i) {
      const auto l = static_cast<std::size_t>(out.labels[i]);
      ++counts[l];
      for (std::size_t j = 0; j < p; ++j) next(l, j) += points(i, j);
    }
    std::vector<bool> taken(k, false);
    for (std::size_t m = 0; m < c; ++m) {
      if (counts[m] > 0) {
        for (std::size_t j = 0; j < p; ++j) next(m, j) /= static_cast<double>(counts[m]);
        continue;
      }
      // empty cluster: move it onto the worst-served point
      std::size_t far = 0;
      double worst = -1.0;
      for (std::size_t i = 0; i < k; ++i)
        if (!taken[i] && dist[i] > worst) {
          worst = dist[i];
          far = i;
        }
      taken[far] = true;
      std::copy(points.row(far).begin(), points.row(far).end(), next.row(m).begin());
    }

    double shift = 0.0;
    for (std::size_t m = 0; m < c; ++m)
      shift = std::max(shift, std::sqrt(sq_dist(out.centroids.row(m), next.row(m))));
    out.centroids = std::move(next);
    if (shift < options.tolerance) break;
  }
  out.inertia = assign(points, out.centroids, out.labels, dist);
  out.inertia_history.push_back(out.inertia);
  return out;
}

ClusterAttention cluster_attention(const AttentionMap &alpha, const ClusterAssignment &assignment) {
  if (alpha.size() != assignment.labels.size())
    throw std::invalid_argument("attention and assignment sizes differ");
  const std::size_t c = assignment.clusters();
  std::vector<double> sum(c, 0.0);
  std::vector<std::size_t> count(c, 0);
  for (std::size_t i = 0; i < alpha.size(); ++i) {
    const auto l = static_cast<std::size_t>(assignment.labels[i]);
    sum[l] += alpha[i];
    ++count[l];
  }
  ClusterAttention out{std::vector<double>(c, 0.0)};
  double total = 0.0;
  for (std::size_t m = 0; m < c; ++m) {
    out.mean_attention[m] = count[m] ? sum[m] / static_cast<double>(count[m]) : 0.0;
    total += out.mean_attention[m];
  }
  if (total > 0.0)
    for (auto &v : out.mean_attention) v /= total;
  return out;
}

std::vector<std::size_t> allocate_budget(const ClusterAttention &cluster_att, std::size_t total,
                                         std::span<const std::size_t> sizes) {
  const auto &w = cluster_att.mean_attention;
  if (total < 1) throw std::invalid_argument("budget total must be >= 1");
  if (w.size() != sizes.size()) throw std::invalid_argument("weights and sizes differ");
  const std::size_t c = sizes.size();
  const std::size_t capacity = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});

  std::vector<std::size_t> budget(c, 0);
  std::size_t remaining = std::min(total, capacity);
  while (remaining > 0) {
    std::vector<std::size_t> open;
    double weight_sum = 0.0;
    for (std::size_t m = 0; m < c; ++m)
      if (budget[m] < sizes[m]) {
        open.push_back(m);
        weight_sum += w[m];
      }
    std::vector<std::size_t> alloc(c, 0);
    std::vector<std::pair<double, std::size_t>> remainders;
    std::size_t assigned = 0;
    for (std::size_t m : open) {
      const double weight = weight_sum > 0.0 ? w[m] / weight_sum : 1.0 / open.size();
      const double share = static_cast<double>(remaining) * weight;
      // absorb rounding noise such as 3.0000000000000004
      const auto base = static_cast<std::size_t>(std::floor(share + 1e-9));
      alloc[m] = base;
      assigned += base;
      remainders.push_back({std::max(0.0, share - static_cast<double>(base)), m});
    }
    std::stable_sort(remainders.begin(), remainders.end(),
                     [](const auto &a, const auto &b) { return a.first > b.first + 1e-12; });
    for (std::size_t r = 0; assigned < remaining && r < remainders.size(); ++r, ++assigned)
      ++alloc[remainders[r].second];

    std::size_t granted = 0;
    for (std::size_t m : open) {
      const std::size_t room = sizes[m] - budget[m];
      const std::size_t g = std::min(alloc[m], room);
      budget[m] += g;
      granted += g;
    }
    remaining -= granted;
  }
  return budget;
}

namespace {

std::vector<std::size_t> attention_order(const AttentionMap &alpha,
                                         std::span<const std::size_t> members) {
  std::vector<std::size_t> order(members.begin(), members.end());
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return alpha[a] > alpha[b]; });
  return order;
}

SelectionResult finish(std::span<const TileRef> tiles, const AttentionMap &alpha,
                       std::vector<std::size_t> chosen) {
  SelectionResult r;
  std::sort(chosen.begin(), chosen.end());
  r.indices = attention_order(alpha, chosen);
  for (auto i : r.indices) r.selected.push_back(tiles[i]);
  r.alpha = alpha;
  return r;
}

void check_sizes(std::span<const TileRef> tiles, const AttentionMap &alpha) {
  if (tiles.size() != alpha.size()) throw std::invalid_argument("tiles and attention sizes differ");
}

}  // namespace

SelectionResult select_att_top_count(std::span<const TileRef> tiles, const AttentionMap &alpha,
                                     std::size_t count) {
  check_sizes(tiles, alpha);
  std::vector<std::size_t> all(tiles.size());
  std::iota(all.begin(), all.end(), 0);
  auto order = attention_order(alpha, all);
  order.resize(std::min(count, order.size()));
  return finish(tiles, alpha, std::move(order));
}

SelectionResult select_att_topk(std::span<const TileRef> tiles, const AttentionMap &alpha,
                                double top_percentile) {
  return select_att_top_count(tiles, alpha, percentile_count(tiles.size(), top_percentile));
}

SelectionResult select_att_cluster(std::span<const TileRef> tiles, const AttentionMap &alpha,
                                   const Tensor &V, const ClusterSelectionParams &params) {
  check_sizes(tiles, alpha);
  const std::size_t k = tiles.size();
  if (V.rows() != k) throw std::invalid_argument("feature rows and tiles differ");
  if (k == 0) return {};

  ClusterAssignment assignment;
  if (k == 1) {
    assignment.centroids = Tensor({1, 1});
    assignment.labels = {0};
  } else {
    const std::size_t p = std::min({params.pca_dim, k, V.cols()});
    const auto pca = pca_fit_transform(V, p);
    assignment = kmeans(pca.projected, std::min(params.clusters, k), params.seed);
  }

  const std::size_t c = assignment.clusters();
  std::vector<std::vector<std::size_t>> members(c);
  for (std::size_t i = 0; i < k; ++i) members[static_cast<std::size_t>(assignment.labels[i])].push_back(i);
  std::vector<std::size_t> sizes(c);
  for (std::size_t m = 0; m < c; ++m) sizes[m] = members[m].size();

  const auto budgets = allocate_budget(cluster_attention(alpha, assignment), params.total, sizes);
  std::vector<std::size_t> chosen;
  for (std::size_t m = 0; m < c; ++m) {
    const auto order = attention_order(alpha, members[m]);
    chosen.insert(chosen.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budgets[m]));
  }
  auto result = finish(tiles, alpha, std::move(chosen));
  result.assignment = std::move(assignment);
  result.budgets = budgets;
  return result;
}

std::string selection_csv(std::span<const TileRef> tiles, const SelectionResult &result) {
  std::vector<bool> picked(tiles.size(), false);
  for (auto i : result.indices) picked[i] = true;
  std::ostringstream out;
  out << "tile_x,tile_y,alpha,cluster,selected\n" << std::setprecision(17);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const int cluster = result.assignment ? result.assignment->labels[i] : -1;
    out << tiles[i].x << ',' << tiles[i].y << ',' << result.alpha[i] << ',' << cluster << ','
        << (picked[i] ? 1 : 0) << '\n';
  }
  return out.str();
}

}  // namespace milpath
