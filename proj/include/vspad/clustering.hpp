#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vspad/matrix.hpp"

namespace vspad::cluster {

enum class Distance { euclidean, correlation };

std::string to_string(Distance d);
Distance distance_from_string(const std::string& s);

using DistanceMatrix = Eigen::MatrixXd;

/// 1 - Pearson(a, b). Exactly equal vectors give 0; if either vector is
/// constant (and they are not equal) the distance is 1.
double correlation_distance(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

/// Pairwise distances between the rows of `points`.
DistanceMatrix pairwise(const Eigen::MatrixXd& points, Distance metric);

struct Merge {
  std::size_t left;   // slot (= smallest leaf index) of the left child
  std::size_t right;
  double height;
};

struct Dendrogram {
  std::size_t n_leaves = 0;
  std::vector<Merge> merges;            // in merge order, heights non-decreasing
  std::vector<std::size_t> leaf_order;  // in-order traversal, lower leaf index on the left

  /// Flat labels for at most n_clusters groups. Zero-height merges are
  /// always kept, so exact duplicates never end up in different groups.
  /// Labels are numbered by first appearance along leaf_order.
  std::vector<std::size_t> cut(std::size_t n_clusters) const;
};

/// Agglomerative clustering with average linkage (UPGMA). Ties between
/// equal-distance pairs go to the lexicographically smallest slot pair.
Dendrogram average_linkage(const DistanceMatrix& dist);

struct KMeansResult {
  std::vector<std::size_t> labels;  // renumbered by smallest member index
  Eigen::MatrixXd centers;
  std::size_t iterations = 0;
};

/// Lloyd's algorithm with seeded k-means++ initialization on the rows of
/// `points`. k is clamped to the number of points.
KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed,
                    std::size_t max_iterations = 100);

/// Centers each row and scales it to unit norm (constant rows become 0),
/// so squared Euclidean distance equals 2 * correlation distance.
Eigen::MatrixXd standardize_rows(const Eigen::MatrixXd& points);

}  // namespace vspad::cluster
