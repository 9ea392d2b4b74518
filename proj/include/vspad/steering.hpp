#pragma once

#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "vspad/sae.hpp"
#include "vspad/toy_vlm.hpp"

namespace vspad::steer {

struct Zero {};
struct Set {
  float value = 0.0f;
};
struct Scale {
  float factor = 1.0f;
};
using Intervention = std::variant<Zero, Set, Scale>;

enum class Baseline { raw, reconstructed };
std::string to_string(Baseline b);
Baseline baseline_from_string(const std::string& s);

struct SteeringSpec {
  std::map<LatentId, Intervention> interventions;
  Baseline baseline = Baseline::reconstructed;
  int target_layer = -1;  // -1: last vision layer
  bool set_everywhere = false;  // Set writes on inactive patches too

  /// Throws std::invalid_argument on ids >= d_sae, negative or non-finite values.
  void validate(std::size_t d_sae) const;
  nlohmann::json to_json() const;
  static SteeringSpec from_json(const nlohmann::json& j);
};

/// h: [n_patches, d_sae]. Untargeted columns are returned bit-identical.
Matrix apply_steering(const Matrix& h, const SteeringSpec& spec);

struct SteerResult {
  std::vector<TokenId> baseline_tokens;
  std::vector<TokenId> steered_tokens;
  std::optional<std::size_t> first_divergence;
  std::string baseline_text;
  std::string steered_text;
  int target_layer = 0;
  Matrix baseline_latents;  // SAE codes fed to the baseline decode, [n_patches, d_sae]
  Matrix steered_latents;
  vlm::InferenceRecord baseline;
  vlm::InferenceRecord steered;

  /// Summary without the full records.
  nlohmann::json to_json() const;
};

/// Index of the first position where the sequences differ, counting a
/// length difference as a divergence at the shorter length.
std::optional<std::size_t> first_divergence(const std::vector<TokenId>& a, const std::vector<TokenId>& b);

SteerResult steer_and_infer(const vlm::ToyVlm& model, const sae::SaeModel& sae, const Matrix& image,
                            const std::vector<TokenId>& prompt, const SteeringSpec& spec, std::size_t max_new = 8);

}  // namespace vspad::steer
