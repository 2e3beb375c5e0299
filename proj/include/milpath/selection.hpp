// SPDX-License-Identifier: Apache-2.0
//
// Informative-tile selection from a screening model's attention map, either
// by ranking attention directly or by clustering instance features and
// splitting a tile budget across clusters by their mean attention.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milpath/mil.hpp"
#include "milpath/preproc.hpp"
#include "milpath/tensor.hpp"

namespace milpath {

struct PcaModel {
  std::vector<double> mean;  // d
  Tensor basis;              // p x d, orthonormal rows, eigenvalues descending
  std::vector<double> eigenvalues;

  std::size_t components() const { return basis.rows(); }
  /// (x - mean) projected onto the basis rows.
  std::vector<double> project(std::span<const double> x) const;
};

struct PcaResult {
  PcaModel model;
  Tensor projected;  // k x p
};

/// Covariance eigendecomposition; each basis row's largest-magnitude
/// component is made positive. Throws "insufficient instances" for k < 2.
PcaResult pca_fit_transform(const Tensor &V, std::size_t p);

struct ClusterAssignment {
  Tensor centroids;         // c x p
  std::vector<int> labels;  // k, each in [0, c)
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after each Lloyd assignment step
  int iterations = 0;

  std::size_t clusters() const { return centroids.rows(); }
};

struct KMeansOptions {
  int max_iterations = 100;
  double tolerance = 1e-6;  // stop once no centroid moves farther than this
};

/// Lloyd's algorithm from a k-means++ start. An empty cluster is reseeded at
/// the point farthest from its current centroid.
ClusterAssignment kmeans(const Tensor &points, std::size_t c, std::uint64_t seed,
                         const KMeansOptions &options = {});

struct ClusterAttention {
  std::vector<double> mean_attention;  // normalized to sum 1
};

/// Mean attention per cluster (0 for empty clusters), normalized.
ClusterAttention cluster_attention(const AttentionMap &alpha, const ClusterAssignment &assignment);

/// Integer tile counts per cluster: shares total * weight, capped at each
/// cluster's size, rounded by largest remainder (ties to the lower cluster
/// index); capacity freed by capped clusters is redistributed among the rest
/// by the same rule. Sums to min(total, sum of sizes).
std::vector<std::size_t> allocate_budget(const ClusterAttention &cluster_att, std::size_t total,
                                         std::span<const std::size_t> sizes);

struct SelectionResult {
  std::vector<TileRef> selected;       // descending attention, ties by bag order
  std::vector<std::size_t> indices;    // positions of `selected` in the bag
  AttentionMap alpha;
  std::optional<ClusterAssignment> assignment;
  std::vector<std::size_t> budgets;    // per cluster; empty for ranking methods

  std::size_t size() const { return indices.size(); }
};

struct ClusterSelectionParams {
  std::size_t pca_dim = 8;
  std::size_t clusters = 4;
  std::size_t total = 16;
  std::uint64_t seed = 0;
};

/// PCA -> k-means -> cluster attention -> budget -> top attention per cluster.
/// Bags with fewer instances than clusters use one cluster per instance.
SelectionResult select_att_cluster(std::span<const TileRef> tiles, const AttentionMap &alpha,
                                   const Tensor &V, const ClusterSelectionParams &params);

/// Top ceil(k * p / 100) tiles by attention, ties by bag order.
SelectionResult select_att_topk(std::span<const TileRef> tiles, const AttentionMap &alpha,
                                double top_percentile);
/// Top `count` tiles by attention (same ordering).
SelectionResult select_att_top_count(std::span<const TileRef> tiles, const AttentionMap &alpha,
                                     std::size_t count);

/// CSV rows tile_x,tile_y,alpha,cluster,selected for every tile of the bag;
/// cluster is -1 when the method did not cluster.
std::string selection_csv(std::span<const TileRef> tiles, const SelectionResult &result);

}  // namespace milpath
