#include "vspad/json_io.hpp"

namespace vspad::json_io {

nlohmann::json matrix_to_json(const Matrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const auto row = m.row(r);
    rows.push_back(std::vector<float>(row.data(), row.data() + row.size()));
  }
  return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
  if (j.is_object()) {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    const auto data = j.at("data").get<std::vector<float>>();
    require_shape(shape.size() == 2, "matrix JSON: shape must have two entries");
    require_shape(data.size() == shape[0] * shape[1], "matrix JSON: data length != rows * cols");
    Matrix m(static_cast<Eigen::Index>(shape[0]), static_cast<Eigen::Index>(shape[1]));
    std::copy(data.begin(), data.end(), m.data());
    return m;
  }
  require_shape(j.is_array() && !j.empty(), "matrix JSON: expected a nonempty array of rows");
  const std::size_t cols = j.front().size();
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < j.size(); ++r) {
    const auto row = j[r].get<std::vector<float>>();
    require_shape(row.size() == cols, "matrix JSON: ragged rows");
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
  }
  return m;
}

nlohmann::json inference_to_json(const vlm::InferenceRecord& rec, const vlm::ToyVlm& model, bool include_attention) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < rec.rows.size(); ++i) {
    const auto& r = rec.rows[i];
    nlohmann::json row{{"index", i}, {"token", r.token}, {"label", r.label}, {"generated", r.generated},
                       {"position", r.position}};
    if (include_attention) {
      row["attention"] = {{"shape", {r.attn.n_layers, r.attn.n_heads, r.attn.n_positions}},
                          {"data", r.attn.weights}};
    }
    rows.push_back(std::move(row));
  }
  return {{"prompt", rec.prompt},
          {"prompt_text", model.detokenize(rec.prompt)},
          {"output", rec.output},
          {"output_text", rec.output_text(model)},
          {"hit_end", rec.hit_end},
          {"n_image_positions", rec.n_image_positions},
          {"injected_layer", rec.injected_layer},
          {"rows", rows},
          {"logits", rec.logits}};
}

nlohmann::json attention_to_json(const linker::AttentionMap& map, const PatchGrid& grid) {
  return {{"token", map.token_index},
          {"renormalized", map.renormalized},
          {"grid", {grid.rows, grid.cols}},
          {"weights", map.weights}};
}

nlohmann::json concepts_to_json(const linker::RankedConcepts& ranked) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [id, score] : ranked.entries) entries.push_back({{"latent", id}, {"score", score}});
  return {{"concepts", entries}};
}

nlohmann::json stats_to_json(const stats::LatentStats& s, const stats::LatentMask& mask) {
  std::vector<bool> keep = mask.keep.empty() ? std::vector<bool>(s.d_sae(), true) : mask.keep;
  return {{"d_sae", s.d_sae()},
          {"n_images", s.n_images},
          {"n_labels", s.n_labels},
          {"topk", s.topk},
          {"epsilon", s.active_threshold},
          {"mean_activation", s.mean_activation},
          {"frequency", s.frequency},
          {"label_entropy", s.label_entropy},
          {"keep", keep},
          {"filter_pct", mask.percentile},
          {"removed", mask.keep.empty() ? 0 : mask.removed()},
          {"removed_by_mean", mask.removed_by_mean},
          {"removed_by_frequency", mask.removed_by_frequency}};
}

nlohmann::json references_to_json(LatentId latent, const std::vector<stats::Reference>& refs,
                                  const std::vector<std::string>& labels) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : refs) {
    nlohmann::json e{{"image_index", r.image_index}, {"activation", r.activation}, {"patch_mask", r.patch_mask}};
    if (r.image_index < labels.size()) e["label"] = labels[r.image_index];
    out.push_back(std::move(e));
  }
  return {{"latent", latent}, {"references", out}};
}

nlohmann::json projection_to_json(const stats::Projection& p) {
  nlohmann::json pts = nlohmann::json::array();
  for (Eigen::Index i = 0; i < p.coords.rows(); ++i) {
    pts.push_back({{"latent", i}, {"x", p.coords(i, 0)}, {"y", p.coords(i, 1)}, {"cluster", p.cluster_id[static_cast<std::size_t>(i)]}});
  }
  return {{"points", pts}, {"explained_variance", p.explained_variance}};
}

nlohmann::json train_report_to_json(const sae::TrainReport& report) {
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& pt : report.curve) {
    curve.push_back({{"step", pt.step}, {"total", pt.loss.total}, {"mse", pt.loss.mse}, {"l1", pt.loss.l1}});
  }
  return {{"curve", curve}, {"final_mean_l0", report.final_mean_l0}, {"final_mse", report.final_mse}};
}

}  // namespace vspad::json_io
