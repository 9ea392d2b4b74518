#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vspad/activation_trace.hpp"
#include "vspad/sae.hpp"

namespace vspad::stats {

/// Bundle of per-image patch activations fed through an SAE.
struct ImageSet {
  std::vector<Matrix> images;       // each [n_patches, d_model]
  std::vector<std::string> labels;  // empty or one per image

  static ImageSet from_trace(const ActivationTrace& trace, int layer);
};

struct LatentStats {
  std::vector<double> mean_activation;  // over images where the latent is active
  std::vector<double> frequency;        // fraction of images where active
  std::vector<double> label_entropy;    // bits, over the top-k active images
  double active_threshold = 1e-6;
  std::size_t topk = 0;
  std::size_t n_images = 0;
  std::size_t n_labels = 0;

  std::size_t d_sae() const { return frequency.size(); }

  io::TensorFile to_file() const;
  static LatentStats from_file(const io::TensorFile& f);
};

/// Image-level activation = max of the latent over the image's patches.
/// Returns [n_images, d_sae].
Matrix image_level_activations(const sae::SaeModel& model, const ImageSet& data);

/// topk_for_entropy = 0 skips entropy (all zeros) and does not need labels.
LatentStats compute_stats(const sae::SaeModel& model, const ImageSet& data, double active_threshold = 1e-6,
                          std::size_t topk_for_entropy = 0);

struct LatentMask {
  std::vector<bool> keep;
  std::size_t removed_by_mean = 0;
  std::size_t removed_by_frequency = 0;
  double percentile = 0.0;

  static LatentMask keep_all(std::size_t d_sae);
  std::size_t kept() const;
  std::size_t removed() const { return keep.size() - kept(); }
  bool kept(LatentId id) const { return id < keep.size() && keep[id]; }
};

/// ceil(percentile / 100 * d_sae) latents per axis, guarding against
/// floating-point noise just above an integer.
std::size_t per_axis_count(double percentile, std::size_t d_sae);

/// Removes the union of the top-percentile latents by mean activation and
/// by activation frequency. Ties go to the lower latent index first.
LatentMask filter_noisy(const LatentStats& stats, double percentile = 2.0);

struct Reference {
  std::size_t image_index = 0;
  float activation = 0.0f;
  std::vector<float> patch_mask;  // per-patch activation of the latent
};

std::vector<Reference> top_activating_references(const sae::SaeModel& model, const ImageSet& data,
                                                 LatentId latent, std::size_t k);

struct Projection {
  Matrix coords;                         // [d_sae, 2]
  std::vector<std::size_t> cluster_id;   // [d_sae]
  std::vector<double> explained_variance; // the two leading eigenvalues
};

/// PCA of the L2-normalized decoder rows onto their top two principal
/// components, plus seeded k-means over the same normalized rows.
Projection project_decoder(const sae::SaeModel& model, std::size_t n_clusters, std::uint64_t seed = 0);

}  // namespace vspad::stats
