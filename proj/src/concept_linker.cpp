#include "vspad/concept_linker.hpp"

#include <algorithm>
#include <numeric>

namespace vspad::linker {

AttentionMap aggregate_attention(const AttentionStack& attn, Span image_span, std::size_t token_index,
                                 bool renormalize) {
  if (image_span.size() == 0) throw std::invalid_argument("aggregate_attention: empty image span");
  require_shape(image_span.end <= attn.n_positions, "aggregate_attention: image span exceeds position axis");
  require_shape(attn.n_layers > 0 && attn.n_heads > 0, "aggregate_attention: no attention rows");

  std::vector<double> acc(image_span.size(), 0.0);
  for (std::size_t l = 0; l < attn.n_layers; ++l) {
    for (std::size_t h = 0; h < attn.n_heads; ++h) {
      for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += attn.at(l, h, image_span.begin + p);
    }
  }
  const double rows = static_cast<double>(attn.n_layers * attn.n_heads);
  for (auto& a : acc) a /= rows;

  AttentionMap out;
  out.token_index = token_index;
  if (renormalize) {
    const double total = std::accumulate(acc.begin(), acc.end(), 0.0);
    if (total > 0.0) {
      for (auto& a : acc) a /= total;
      out.renormalized = true;
    }
  }
  out.weights.assign(acc.begin(), acc.end());
  return out;
}

Vector weighted_pool(const Matrix& h_patches, const AttentionMap& attn) {
  require_shape(static_cast<std::size_t>(h_patches.rows()) == attn.weights.size(),
                "weighted_pool: " + std::to_string(h_patches.rows()) + " patches vs " +
                    std::to_string(attn.weights.size()) + " attention weights");
  const Eigen::Map<const Vector> w(attn.weights.data(), static_cast<Eigen::Index>(attn.weights.size()));
  return (h_patches.transpose().cast<double>() * w.cast<double>()).cast<float>();
}

Vector mean_pool(const Matrix& h_patches) {
  require_shape(h_patches.rows() > 0, "mean_pool: no patches");
  return h_patches.cast<double>().colwise().mean().transpose().cast<float>();
}

RankedConcepts rank_concepts(const Vector& pooled, const stats::LatentMask& mask, std::size_t top_n) {
  if (top_n == 0) throw std::invalid_argument("rank_concepts: top_n must be >= 1");
  require_shape(mask.keep.empty() || mask.keep.size() == static_cast<std::size_t>(pooled.size()),
                "rank_concepts: mask length != d_sae");
  std::vector<LatentId> ids;
  ids.reserve(static_cast<std::size_t>(pooled.size()));
  for (Eigen::Index j = 0; j < pooled.size(); ++j) {
    if (mask.keep.empty() || mask.keep[static_cast<std::size_t>(j)]) ids.push_back(static_cast<LatentId>(j));
  }
  const std::size_t take = std::min(top_n, ids.size());
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(take), ids.end(),
                    [&](LatentId a, LatentId b) { return pooled[a] > pooled[b] || (pooled[a] == pooled[b] && a < b); });
  RankedConcepts out;
  out.pooled = pooled;
  out.entries.reserve(take);
  for (std::size_t i = 0; i < take; ++i) out.entries.emplace_back(ids[i], pooled[ids[i]]);
  return out;
}

}  // namespace vspad::linker
