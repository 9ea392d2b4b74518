#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "vspad/activation_trace.hpp"
#include "vspad/latent_stats.hpp"

namespace vspad::linker {

/// Half-open range of image-token positions along the attention axis.
struct Span {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::size_t size() const { return end > begin ? end - begin : 0; }
};

struct AttentionMap {
  std::vector<float> weights;  // [n_patches]
  std::size_t token_index = 0;
  bool renormalized = false;
};

/// Mean over every (layer, head) row, restricted to image_span, optionally
/// rescaled to sum to one. The mean is taken in double precision, so the
/// result does not depend on iteration order beyond float rounding of the
/// final cast.
AttentionMap aggregate_attention(const AttentionStack& attn, Span image_span, std::size_t token_index,
                                 bool renormalize = false);

/// pooled = h^T attn, for h [n_patches, d_sae].
Vector weighted_pool(const Matrix& h_patches, const AttentionMap& attn);

/// Plain patch mean, the unweighted counterpart of weighted_pool.
Vector mean_pool(const Matrix& h_patches);

struct RankedConcepts {
  std::vector<std::pair<LatentId, float>> entries;  // scores non-increasing
  Vector pooled;
};

/// Descending by pooled score among kept latents; ties by lower id.
RankedConcepts rank_concepts(const Vector& pooled, const stats::LatentMask& mask, std::size_t top_n);

}  // namespace vspad::linker
