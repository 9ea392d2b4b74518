#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vspad/clustering.hpp"
#include "vspad/latent_stats.hpp"

namespace vspad::heatmap {

enum class NormMode { none, row, column };
enum class Method { none, hierarchical, kmeans };

std::string to_string(NormMode m);
NormMode norm_mode_from_string(const std::string& s);
std::string to_string(Method m);
Method method_from_string(const std::string& s);

/// Token x latent matrix. Columns are kept in ascending latent-id order;
/// column_order is the display permutation produced by clustering.
struct Heatmap {
  Matrix values;  // [n_tokens, n_selected]
  std::vector<std::string> token_labels;
  std::vector<LatentId> latent_ids;
  NormMode norm_mode = NormMode::none;
  std::vector<std::size_t> cluster_labels;
  std::vector<std::size_t> column_order;
  Method method = Method::none;
  std::string distance_used;  // empty until clustered

  std::size_t n_tokens() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t n_selected() const { return static_cast<std::size_t>(values.cols()); }
  /// Values with columns permuted into display order.
  Matrix ordered_values() const;

  nlohmann::json to_json() const;
  static Heatmap from_json(const nlohmann::json& j);
};

/// Union over tokens of each token's top-k kept latents (ties by lower id).
/// per_token_pooled: [n_tokens, d_sae].
Heatmap build_heatmap(const Matrix& per_token_pooled, const stats::LatentMask& mask, std::size_t k = 20,
                      std::vector<std::string> token_labels = {});

/// Min-max scaling per column (or per row) to [0, 1]; a constant
/// column (row) maps to all zeros.
Heatmap normalize_heatmap(Heatmap hm, NormMode mode);

struct ClusterOptions {
  Method method = Method::hierarchical;
  cluster::Distance distance = cluster::Distance::correlation;
  std::optional<std::size_t> n_clusters;
  std::uint64_t seed = 0;
};

/// Clusters the columns. Hierarchical uses average linkage and orders
/// columns by dendrogram leaf order; without n_clusters the cut is placed
/// at the largest gap between consecutive merge heights. k-means requires
/// n_clusters and orders columns by cluster, then latent id. Correlation
/// distance with fewer than two tokens falls back to Euclidean, reported
/// in distance_used.
Heatmap cluster_heatmap(Heatmap hm, const ClusterOptions& options);

/// Structural checks used by tests and the CLI; n_available is the number
/// of unmasked latents (d_sae when nothing is filtered). Returns an empty
/// string when every invariant holds.
std::string check_invariants(const Heatmap& hm, std::size_t k, std::size_t n_available);

}  // namespace vspad::heatmap
