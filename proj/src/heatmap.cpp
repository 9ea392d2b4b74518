#include "vspad/heatmap.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace vspad::heatmap {

std::string to_string(NormMode m) {
  switch (m) {
    case NormMode::none: return "none";
    case NormMode::row: return "row";
    case NormMode::column: return "column";
  }
  return "none";
}

NormMode norm_mode_from_string(const std::string& s) {
  if (s == "none") return NormMode::none;
  if (s == "row") return NormMode::row;
  if (s == "column") return NormMode::column;
  throw std::invalid_argument("unknown normalization mode: " + s);
}

std::string to_string(Method m) {
  switch (m) {
    case Method::none: return "none";
    case Method::hierarchical: return "hierarchical";
    case Method::kmeans: return "kmeans";
  }
  return "none";
}

Method method_from_string(const std::string& s) {
  if (s == "none") return Method::none;
  if (s == "hierarchical") return Method::hierarchical;
  if (s == "kmeans") return Method::kmeans;
  throw std::invalid_argument("unknown clustering method: " + s);
}

Matrix Heatmap::ordered_values() const {
  Matrix out(values.rows(), values.cols());
  for (std::size_t c = 0; c < column_order.size(); ++c) {
    out.col(static_cast<Eigen::Index>(c)) = values.col(static_cast<Eigen::Index>(column_order[c]));
  }
  return out;
}

nlohmann::json Heatmap::to_json() const {
  std::vector<float> flat(values.data(), values.data() + values.size());
  return {{"token_labels", token_labels},
          {"latent_ids", latent_ids},
          {"n_tokens", n_tokens()},
          {"n_selected", n_selected()},
          {"values", flat},
          {"norm_mode", to_string(norm_mode)},
          {"cluster_labels", cluster_labels},
          {"column_order", column_order},
          {"method", to_string(method)},
          {"distance", distance_used}};
}

Heatmap Heatmap::from_json(const nlohmann::json& j) {
  Heatmap hm;
  hm.token_labels = j.at("token_labels").get<std::vector<std::string>>();
  hm.latent_ids = j.at("latent_ids").get<std::vector<LatentId>>();
  const auto flat = j.at("values").get<std::vector<float>>();
  const auto rows = j.value("n_tokens", hm.token_labels.size());
  const auto cols = hm.latent_ids.size();
  require_shape(flat.size() == rows * cols, "heatmap JSON: values length != n_tokens * n_selected");
  hm.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::copy(flat.begin(), flat.end(), hm.values.data());
  hm.norm_mode = norm_mode_from_string(j.value("norm_mode", std::string("none")));
  hm.cluster_labels = j.at("cluster_labels").get<std::vector<std::size_t>>();
  hm.column_order = j.at("column_order").get<std::vector<std::size_t>>();
  hm.method = method_from_string(j.value("method", std::string("none")));
  hm.distance_used = j.value("distance", std::string());
  return hm;
}

Heatmap build_heatmap(const Matrix& per_token_pooled, const stats::LatentMask& mask, std::size_t k,
                      std::vector<std::string> token_labels) {
  if (per_token_pooled.rows() < 1) throw std::invalid_argument("build_heatmap: need at least one token");
  if (k == 0) throw std::invalid_argument("build_heatmap: k must be >= 1");
  const auto d = static_cast<std::size_t>(per_token_pooled.cols());
  require_shape(mask.keep.empty() || mask.keep.size() == d, "build_heatmap: mask length != d_sae");
  if (token_labels.empty()) {
    for (Eigen::Index t = 0; t < per_token_pooled.rows(); ++t) token_labels.push_back(std::to_string(t));
  }
  require_shape(token_labels.size() == static_cast<std::size_t>(per_token_pooled.rows()),
                "build_heatmap: one label per token");

  std::vector<LatentId> kept;
  for (std::size_t j = 0; j < d; ++j) {
    if (mask.keep.empty() || mask.keep[j]) kept.push_back(static_cast<LatentId>(j));
  }
  std::set<LatentId> selected;
  std::vector<LatentId> scratch;
  for (Eigen::Index t = 0; t < per_token_pooled.rows(); ++t) {
    scratch = kept;
    const std::size_t take = std::min(k, scratch.size());
    const auto row = per_token_pooled.row(t);
    std::partial_sort(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(take), scratch.end(),
                      [&](LatentId a, LatentId b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
    selected.insert(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(take));
  }

  Heatmap hm;
  hm.token_labels = std::move(token_labels);
  hm.latent_ids.assign(selected.begin(), selected.end());
  hm.values.resize(per_token_pooled.rows(), static_cast<Eigen::Index>(hm.latent_ids.size()));
  for (std::size_t c = 0; c < hm.latent_ids.size(); ++c) {
    hm.values.col(static_cast<Eigen::Index>(c)) = per_token_pooled.col(hm.latent_ids[c]);
  }
  hm.cluster_labels.assign(hm.latent_ids.size(), 0);
  hm.column_order.resize(hm.latent_ids.size());
  std::iota(hm.column_order.begin(), hm.column_order.end(), std::size_t{0});
  return hm;
}

namespace {

template <typename Block>
void min_max(Block&& line) {
  const float lo = line.minCoeff();
  const float hi = line.maxCoeff();
  if (!(hi > lo)) {
    line.setZero();
    return;
  }
  line = ((line.array() - lo) / (hi - lo)).cwiseMin(1.0f).cwiseMax(0.0f).matrix();
}

std::size_t largest_gap_clusters(const cluster::Dendrogram& dg) {
  const std::size_t n = dg.n_leaves;
  if (dg.merges.size() < 2) return 1;
  double best_gap = 0.0;
  std::size_t clusters = 1;
  for (std::size_t m = 0; m + 1 < dg.merges.size(); ++m) {
    const double gap = dg.merges[m + 1].height - dg.merges[m].height;
    if (gap > best_gap) {
      best_gap = gap;
      clusters = n - (m + 1);
    }
  }
  return clusters;
}

}  // namespace

Heatmap normalize_heatmap(Heatmap hm, NormMode mode) {
  require_shape(hm.values.allFinite(), "normalize_heatmap: values must be finite");
  if (mode == NormMode::column) {
    for (Eigen::Index c = 0; c < hm.values.cols(); ++c) min_max(hm.values.col(c));
  } else if (mode == NormMode::row) {
    for (Eigen::Index r = 0; r < hm.values.rows(); ++r) min_max(hm.values.row(r));
  }
  if (mode != NormMode::none) hm.norm_mode = mode;
  return hm;
}

Heatmap cluster_heatmap(Heatmap hm, const ClusterOptions& options) {
  if (options.method == Method::kmeans && !options.n_clusters) {
    throw std::invalid_argument("cluster_heatmap: kmeans requires n_clusters");
  }
  const std::size_t n = hm.n_selected();
  hm.method = options.method;
  cluster::Distance metric = options.distance;
  if (metric == cluster::Distance::correlation && hm.n_tokens() < 2) metric = cluster::Distance::euclidean;
  hm.distance_used = cluster::to_string(metric);

  hm.column_order.resize(n);
  std::iota(hm.column_order.begin(), hm.column_order.end(), std::size_t{0});
  hm.cluster_labels.assign(n, 0);
  if (options.method == Method::none || n < 2) return hm;

  const Eigen::MatrixXd points = hm.values.transpose().cast<double>();
  if (options.method == Method::hierarchical) {
    const auto dg = cluster::average_linkage(cluster::pairwise(points, metric));
    const std::size_t k = options.n_clusters.value_or(largest_gap_clusters(dg));
    hm.cluster_labels = dg.cut(k);
    hm.column_order = dg.leaf_order;
  } else {
    const Eigen::MatrixXd space =
        metric == cluster::Distance::correlation ? cluster::standardize_rows(points) : points;
    hm.cluster_labels = cluster::kmeans(space, *options.n_clusters, options.seed).labels;
    std::stable_sort(hm.column_order.begin(), hm.column_order.end(),
                     [&](std::size_t a, std::size_t b) { return hm.cluster_labels[a] < hm.cluster_labels[b]; });
  }
  return hm;
}

std::string check_invariants(const Heatmap& hm, std::size_t k, std::size_t n_available) {
  const std::size_t n = hm.n_selected();
  if (n > std::min(hm.n_tokens() * k, n_available)) return "n_selected exceeds min(n_tokens * k, available latents)";
  if (n < std::min(k, n_available)) return "n_selected below k";
  if (hm.token_labels.size() != hm.n_tokens()) return "token_labels length mismatch";
  if (hm.latent_ids.size() != n) return "latent_ids length mismatch";
  if (!std::is_sorted(hm.latent_ids.begin(), hm.latent_ids.end()) ||
      std::adjacent_find(hm.latent_ids.begin(), hm.latent_ids.end()) != hm.latent_ids.end()) {
    return "latent_ids not strictly ascending";
  }
  if (hm.cluster_labels.size() != n) return "cluster_labels length mismatch";
  std::vector<std::size_t> perm = hm.column_order;
  std::sort(perm.begin(), perm.end());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] != i) return "column_order is not a permutation";
  }
  if (perm.size() != n) return "column_order length mismatch";
  if (hm.norm_mode == NormMode::column || hm.norm_mode == NormMode::row) {
    if ((hm.values.array() < 0.0f).any() || (hm.values.array() > 1.0f).any()) return "normalized value outside [0,1]";
  }
  return {};
}

}  // namespace vspad::heatmap
