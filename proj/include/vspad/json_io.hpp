#pragma once

#include <vector>

#include "json.hpp"
#include "vspad/concept_linker.hpp"
#include "vspad/latent_stats.hpp"
#include "vspad/sae.hpp"
#include "vspad/toy_vlm.hpp"

namespace vspad::json_io {

/// Nested row arrays.
nlohmann::json matrix_to_json(const Matrix& m);
/// Accepts nested row arrays or {"shape": [r, c], "data": [...]}.
Matrix matrix_from_json(const nlohmann::json& j);

/// Tokens, texts and per-step logits; attention rows only when asked.
nlohmann::json inference_to_json(const vlm::InferenceRecord& rec, const vlm::ToyVlm& model,
                                 bool include_attention = false);
nlohmann::json attention_to_json(const linker::AttentionMap& map, const PatchGrid& grid);
nlohmann::json concepts_to_json(const linker::RankedConcepts& ranked);
nlohmann::json stats_to_json(const stats::LatentStats& stats, const stats::LatentMask& mask);
nlohmann::json references_to_json(LatentId latent, const std::vector<stats::Reference>& refs,
                                  const std::vector<std::string>& labels);
nlohmann::json projection_to_json(const stats::Projection& proj);
nlohmann::json train_report_to_json(const sae::TrainReport& report);

}  // namespace vspad::json_io
