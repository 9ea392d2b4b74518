#include "vspad/steering.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vspad::steer {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

nlohmann::json intervention_json(const Intervention& iv) {
  return std::visit(overloaded{[](const Zero&) { return nlohmann::json{{"op", "zero"}}; },
                               [](const Set& s) { return nlohmann::json{{"op", "set"}, {"value", s.value}}; },
                               [](const Scale& s) { return nlohmann::json{{"op", "scale"}, {"factor", s.factor}}; }},
                    iv);
}

Intervention intervention_from_json(const nlohmann::json& j) {
  const auto op = j.at("op").get<std::string>();
  if (op == "zero") return Zero{};
  if (op == "set") return Set{j.at("value").get<float>()};
  if (op == "scale") return Scale{j.at("factor").get<float>()};
  throw std::invalid_argument("unknown intervention op: " + op);
}

LatentId parse_latent_id(const std::string& key) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(key, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != key.size() || key.empty() || key[0] == '-' || v > std::numeric_limits<LatentId>::max()) {
    throw std::invalid_argument("bad latent id: '" + key + "'");
  }
  return static_cast<LatentId>(v);
}

}  // namespace

std::string to_string(Baseline b) { return b == Baseline::raw ? "raw" : "reconstructed"; }

Baseline baseline_from_string(const std::string& s) {
  if (s == "raw") return Baseline::raw;
  if (s == "reconstructed") return Baseline::reconstructed;
  throw std::invalid_argument("unknown baseline mode: " + s);
}

void SteeringSpec::validate(std::size_t d_sae) const {
  for (const auto& [id, iv] : interventions) {
    if (id >= d_sae) {
      throw std::invalid_argument("unknown latent id " + std::to_string(id) + " (d_sae " + std::to_string(d_sae) + ")");
    }
    if (const auto* s = std::get_if<Set>(&iv); s && !(std::isfinite(s->value) && s->value >= 0.0f)) {
      throw std::invalid_argument("set value for latent " + std::to_string(id) + " must be finite and >= 0");
    }
    if (const auto* s = std::get_if<Scale>(&iv); s && !(std::isfinite(s->factor) && s->factor >= 0.0f)) {
      throw std::invalid_argument("scale factor for latent " + std::to_string(id) + " must be finite and >= 0");
    }
  }
}

nlohmann::json SteeringSpec::to_json() const {
  nlohmann::json ivs = nlohmann::json::object();
  for (const auto& [id, iv] : interventions) ivs[std::to_string(id)] = intervention_json(iv);
  nlohmann::json j{{"interventions", ivs}, {"baseline", to_string(baseline)}, {"layer", target_layer}};
  if (set_everywhere) j["set_everywhere"] = true;
  return j;
}

SteeringSpec SteeringSpec::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw std::invalid_argument("steering spec must be a JSON object");
  SteeringSpec spec;
  if (j.contains("interventions")) {
    for (const auto& [key, value] : j.at("interventions").items()) {
      spec.interventions[parse_latent_id(key)] = intervention_from_json(value);
    }
  }
  spec.baseline = baseline_from_string(j.value("baseline", std::string("reconstructed")));
  spec.target_layer = j.value("layer", -1);
  spec.set_everywhere = j.value("set_everywhere", false);
  return spec;
}

Matrix apply_steering(const Matrix& h, const SteeringSpec& spec) {
  spec.validate(static_cast<std::size_t>(h.cols()));
  Matrix out = h;
  for (const auto& [id, iv] : spec.interventions) {
    auto col = out.col(static_cast<Eigen::Index>(id));
    std::visit(overloaded{[&](const Zero&) { col.setZero(); },
                          [&](const Set& s) {
                            for (Eigen::Index r = 0; r < col.size(); ++r) {
                              if (spec.set_everywhere || h(r, id) > 0.0f) col[r] = s.value;
                            }
                          },
                          [&](const Scale& s) { col *= s.factor; }},
               iv);
  }
  return out;
}

std::optional<std::size_t> first_divergence(const std::vector<TokenId>& a, const std::vector<TokenId>& b) {
  const std::size_t n = std::min(a.size(), b.size());
  for (std::size_t i = 0; i < n; ++i) {
    if (a[i] != b[i]) return i;
  }
  if (a.size() != b.size()) return n;
  return std::nullopt;
}

nlohmann::json SteerResult::to_json() const {
  nlohmann::json j{{"baseline_tokens", baseline_tokens},
                   {"steered_tokens", steered_tokens},
                   {"baseline_text", baseline_text},
                   {"steered_text", steered_text},
                   {"target_layer", target_layer},
                   {"first_divergence", nullptr}};
  if (first_divergence) j["first_divergence"] = *first_divergence;
  return j;
}

SteerResult steer_and_infer(const vlm::ToyVlm& model, const sae::SaeModel& sae, const Matrix& image,
                            const std::vector<TokenId>& prompt, const SteeringSpec& spec, std::size_t max_new) {
  const auto n_layers = static_cast<int>(model.config.vision_layers);
  const int layer = spec.target_layer < 0 ? n_layers - 1 : spec.target_layer;
  if (layer >= n_layers) {
    throw std::invalid_argument("target layer " + std::to_string(layer) + " outside vision tower");
  }
  if (sae.d_model() != model.config.d_model) {
    throw std::invalid_argument("SAE d_model " + std::to_string(sae.d_model()) + " does not match layer width " +
                                std::to_string(model.config.d_model));
  }
  spec.validate(sae.d_sae());

  SteerResult res;
  res.target_layer = layer;

  vlm::VisionHook base_hook{layer, [&](const Matrix& z) {
                              res.baseline_latents = sae::encode(sae, z);
                              if (spec.baseline == Baseline::raw) return z;
                              return sae::decode(sae, res.baseline_latents);
                            }};
  res.baseline = vlm::generate(model, image, prompt, max_new, base_hook);

  vlm::VisionHook steer_hook{layer, [&](const Matrix& z) {
                               res.steered_latents = apply_steering(sae::encode(sae, z), spec);
                               return sae::decode(sae, res.steered_latents);
                             }};
  res.steered = vlm::generate(model, image, prompt, max_new, steer_hook);

  res.baseline_tokens = res.baseline.output;
  res.steered_tokens = res.steered.output;
  res.baseline_text = res.baseline.output_text(model);
  res.steered_text = res.steered.output_text(model);
  res.first_divergence = first_divergence(res.baseline_tokens, res.steered_tokens);
  return res;
}

}  // namespace vspad::steer
