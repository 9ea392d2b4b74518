#pragma once

#include <cstdint>
#include <vector>

#include "vspad/sae.hpp"
#include "vspad/toy_vlm.hpp"

namespace vspad::vlm {

/// Hand-built toy VLM whose first-step logit gap logit("A") - logit("B")
/// equals u . mean_p(z_p), where z_p are the final vision-layer patch
/// tokens and u is a known unit direction (exact up to float rounding).
///
/// Vision blocks are identities (zero output projections), the projector
/// copies z into the image channels of the language stream, and head 0 of
/// the first language block attends uniformly and writes the u-projection
/// into a dedicated gap channel. Norms are disabled so that path is linear.
/// "B" has the lower token id, so a zero gap decodes to "B".
///
/// u = (e_cue0 + e_cue1 + e_rival - e_counter) / 2 in z space. image_a has
/// cue, rival and counter patches such that
///   baseline            gap > 0  -> "A"
///   cue latents zeroed  gap < 0  -> "B"
///   cue zeroed, rival x3 gap > 0 -> "A"
/// The paired SAE is the identity construction, whose latent j < d_model
/// carries the positive part of z channel j.
struct FlipFixture {
  ToyVlm model;
  sae::SaeModel sae;
  Matrix image_a;                  // [n_patches, patch_dim]
  std::vector<TokenId> prompt;
  TokenId token_a = 0;
  TokenId token_b = 0;
  Vector direction;                // u, [d_model]
  std::vector<LatentId> cue_latents;
  std::vector<LatentId> rival_latents;
  std::vector<LatentId> counter_latents;
  std::vector<std::size_t> cue_patches, rival_patches, counter_patches;
  int target_layer = 0;

  /// image_a with the u-component removed from every patch.
  Matrix image_without_cue_direction() const;
  /// image_a with its u-component scaled by c.
  Matrix image_with_scaled_direction(float c) const;
  nlohmann::json describe() const;
};

FlipFixture make_flip_fixture(std::uint64_t seed = 0);

/// A small labeled image collection around the fixture (cue-only,
/// rival-only, counter-only and mixed images with noise) for stats and
/// reference retrieval.
struct FixtureDataset {
  std::vector<Matrix> images;
  std::vector<std::string> labels;
};
FixtureDataset make_fixture_dataset(const FlipFixture& fx, std::size_t per_label, std::uint64_t seed);

}  // namespace vspad::vlm
