#include "vspad/service.hpp"

#include <cstdlib>
#include <regex>

#include "httplib.h"
#include "vspad/concept_linker.hpp"
#include "vspad/flip_fixture.hpp"
#include "vspad/heatmap.hpp"
#include "vspad/json_io.hpp"

namespace vspad::service {

namespace {

struct HttpError : std::runtime_error {
  HttpError(int status, const std::string& msg) : std::runtime_error(msg), status(status) {}
  int status;
};

Response error(int status, const std::string& msg) { return {status, {{"error", msg}}}; }

std::optional<std::string> param(const Params& params, const std::string& key) {
  const auto it = params.find(key);
  if (it == params.end() || it->second.empty()) return std::nullopt;
  return it->second;
}

std::size_t size_param(const Params& params, const std::string& key, std::size_t fallback) {
  const auto v = param(params, key);
  if (!v) return fallback;
  std::size_t used = 0;
  long long n = -1;
  try {
    n = std::stoll(*v, &used);
  } catch (const std::exception&) {
  }
  if (used != v->size() || n < 0) throw HttpError(400, "query parameter " + key + " must be a nonnegative integer");
  return static_cast<std::size_t>(n);
}

double double_param(const Params& params, const std::string& key, double fallback) {
  const auto v = param(params, key);
  if (!v) return fallback;
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(*v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v->size()) throw HttpError(400, "query parameter " + key + " must be a number");
  return d;
}

bool bool_param(const Params& params, const std::string& key, bool fallback) {
  const auto v = param(params, key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1") return true;
  if (*v == "false" || *v == "0") return false;
  throw HttpError(400, "query parameter " + key + " must be true or false");
}

vlm::InferenceRecord& require_inference(Session& s) {
  if (!s.last) throw HttpError(409, "session has no inference yet");
  return *s.last;
}

const vlm::TextRow& row_at(const vlm::InferenceRecord& rec, const Params& params) {
  const std::size_t i = size_param(params, "token", 0);
  if (i >= rec.rows.size()) {
    throw HttpError(400, "token index " + std::to_string(i) + " out of range (" + std::to_string(rec.rows.size()) +
                             " rows)");
  }
  return rec.rows[i];
}

linker::AttentionMap attention_for(const vlm::InferenceRecord& rec, const vlm::TextRow& row, std::size_t index,
                                   bool renormalize) {
  return linker::aggregate_attention(row.attn, {0, rec.n_image_positions}, index, renormalize);
}

std::size_t row_index(const vlm::InferenceRecord& rec, const vlm::TextRow& row) {
  return static_cast<std::size_t>(&row - rec.rows.data());
}

}  // namespace

Matrix pooled_rows(const vlm::InferenceRecord& rec, const Matrix& latents, std::vector<std::string>* labels) {
  Matrix pooled(static_cast<Eigen::Index>(rec.rows.size()), latents.cols());
  for (std::size_t i = 0; i < rec.rows.size(); ++i) {
    pooled.row(static_cast<Eigen::Index>(i)) =
        linker::weighted_pool(latents, attention_for(rec, rec.rows[i], i, false)).transpose();
    if (labels) labels->push_back(rec.rows[i].label);
  }
  return pooled;
}

int Artifacts::resolved_layer() const {
  const int n = static_cast<int>(model->config.vision_layers);
  return layer < 0 ? n - 1 : layer;
}

std::shared_ptr<const Artifacts> fixture_artifacts(std::uint64_t seed, std::size_t per_label) {
  auto fx = vlm::make_flip_fixture(seed);
  auto a = std::make_shared<Artifacts>();
  a->layer = fx.target_layer;
  const auto ds = vlm::make_fixture_dataset(fx, per_label, seed + 1);
  for (const auto& img : ds.images) {
    std::vector<Matrix> layers;
    vlm::encode_image(fx.model, img, std::nullopt, &layers);
    a->dataset.images.push_back(layers[static_cast<std::size_t>(fx.target_layer)]);
  }
  a->dataset.labels = ds.labels;
  a->dataset_patches = ds.images;
  a->stats = stats::compute_stats(fx.sae, a->dataset, 1e-6, 10);

  std::vector<std::string> names;
  std::map<std::string, std::pair<Vector, std::size_t>> sums;
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const Vector e = vlm::image_embedding(fx.model, ds.images[i]);
    auto [it, fresh] = sums.try_emplace(ds.labels[i], Vector::Zero(e.size()), 0);
    if (fresh) names.push_back(ds.labels[i]);
    it->second.first += e;
    it->second.second += 1;
  }
  Matrix classes(static_cast<Eigen::Index>(names.size()), static_cast<Eigen::Index>(fx.model.config.d_lm));
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto& [sum, count] = sums.at(names[k]);
    classes.row(static_cast<Eigen::Index>(k)) = (sum / static_cast<float>(count)).transpose();
  }
  a->class_embeddings["fixture"] = classes;
  a->class_names["fixture"] = names;

  a->images["A"] = fx.image_a;
  a->images["no_cue"] = fx.image_without_cue_direction();
  a->images["zero"] = Matrix::Zero(fx.image_a.rows(), fx.image_a.cols());
  a->fixture = fx.describe();
  a->model = std::make_shared<const vlm::ToyVlm>(std::move(fx.model));
  a->sae = std::make_shared<const sae::SaeModel>(std::move(fx.sae));
  return a;
}

std::shared_ptr<const Artifacts> load_artifacts(const ArtifactPaths& paths) {
  auto a = std::make_shared<Artifacts>();
  a->model = std::make_shared<const vlm::ToyVlm>(vlm::ToyVlm::from_file(io::load_tensor_file(paths.model)));
  a->sae = std::make_shared<const sae::SaeModel>(sae::SaeModel::from_file(io::load_tensor_file(paths.sae)));
  a->layer = paths.layer;
  if (a->sae->d_model() != a->model->config.d_model) {
    throw std::invalid_argument("SAE d_model does not match the model's vision width");
  }
  if (!paths.stats.empty()) a->stats = stats::LatentStats::from_file(io::load_tensor_file(paths.stats));
  if (!paths.trace.empty()) {
    const auto trace = ActivationTrace::from_file(io::load_tensor_file(paths.trace));
    a->dataset = stats::ImageSet::from_trace(trace, a->resolved_layer());
    if (trace.patches) {
      const auto np = static_cast<Eigen::Index>(trace.n_patches());
      for (std::size_t i = 0; i < trace.n_images; ++i) {
        a->dataset_patches.push_back(trace.patches->middleRows(static_cast<Eigen::Index>(i) * np, np));
      }
    }
  }
  if (a->stats && a->stats->d_sae() != a->sae->d_sae()) {
    throw std::invalid_argument("stats d_sae does not match the SAE");
  }
  return a;
}

Service::Service(std::shared_ptr<const Artifacts> artifacts) : artifacts_(std::move(artifacts)) {
  if (!artifacts_ || !artifacts_->model || !artifacts_->sae) throw std::invalid_argument("service needs a model and an SAE");
}

std::size_t Service::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

std::shared_ptr<Session> Service::find_session(const std::string& id) const {
  std::lock_guard lock(sessions_mutex_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw HttpError(404, "unknown session " + id);
  return it->second;
}

Response Service::handle(const std::string& method, const std::string& path, const Params& params,
                         const std::string& body) {
  static const std::regex session_re(R"(^/session/([^/]+)(/[a-z]+)?$)");
  static const std::regex refs_re(R"(^/latents/([^/]+)/references$)");
  try {
    nlohmann::json json_body = nlohmann::json::object();
    if (method == "POST" && !body.empty()) {
      json_body = nlohmann::json::parse(body, nullptr, false);
      if (json_body.is_discarded()) return error(400, "request body is not valid JSON");
    }
    std::smatch m;
    if (method == "GET" && path == "/health") {
      return {200, {{"status", "ok"}, {"version", kVersion}, {"tensor_file_version", io::kVersion}}};
    }
    if (method == "POST" && path == "/session") return create_session();
    if (method == "GET" && path == "/latents/stats") return latent_stats(params);
    if (method == "GET" && path == "/latents/projection") return projection(params);
    if (method == "POST" && path == "/classify") return classify(json_body);
    if (method == "GET" && std::regex_match(path, m, refs_re)) return references(m[1].str(), params);
    if (std::regex_match(path, m, session_re)) {
      const auto session = find_session(m[1].str());
      const std::string action = m[2].str();
      std::lock_guard lock(session->mutex);
      if (method == "GET" && action.empty()) return describe_session(*session);
      if (method == "POST" && action == "/infer") return infer(*session, json_body);
      if (method == "GET" && action == "/attention") return attention(*session, params);
      if (method == "GET" && action == "/concepts") return concepts(*session, params);
      if (method == "GET" && action == "/heatmap") return heatmap(*session, params);
      if (method == "POST" && action == "/steer") return steer(*session, json_body);
      if (method == "GET" && action == "/history") return history(*session);
    }
    return error(404, "no route for " + method + " " + path);
  } catch (const HttpError& e) {
    return error(e.status, e.what());
  } catch (const std::length_error& e) {
    return error(422, e.what());
  } catch (const nlohmann::json::exception& e) {
    return error(400, e.what());
  } catch (const std::invalid_argument& e) {
    return error(400, e.what());
  } catch (const std::exception& e) {
    return error(500, e.what());
  }
}

Response Service::create_session() {
  auto s = std::make_shared<Session>();
  s->id = "s" + std::to_string(next_id_.fetch_add(1));
  {
    std::lock_guard lock(sessions_mutex_);
    sessions_[s->id] = s;
  }
  std::lock_guard lock(s->mutex);
  auto r = describe_session(*s);
  r.status = 201;
  return r;
}

Response Service::describe_session(Session& s) {
  const auto& a = *artifacts_;
  nlohmann::json j{{"id", s.id},
                   {"model", a.model->config.to_json()},
                   {"d_model", a.sae->d_model()},
                   {"d_sae", a.sae->d_sae()},
                   {"layer", a.resolved_layer()},
                   {"has_inference", s.last.has_value()},
                   {"history_length", s.history.size()},
                   {"dataset_size", a.dataset.images.size()},
                   {"has_stats", a.stats.has_value()}};
  if (!a.fixture.is_null()) j["fixture"] = a.fixture;
  return {200, j};
}

Matrix Service::resolve_image(const nlohmann::json& body) const {
  const auto& a = *artifacts_;
  if (body.contains("patches")) return json_io::matrix_from_json(body.at("patches"));
  if (!body.contains("image_ref")) throw HttpError(400, "request needs image_ref or patches");
  const auto& ref = body.at("image_ref");
  if (ref.is_number_integer()) {
    const auto i = ref.get<long long>();
    if (i < 0 || static_cast<std::size_t>(i) >= a.dataset_patches.size()) {
      throw HttpError(400, "image_ref " + std::to_string(i) + " outside the dataset");
    }
    return a.dataset_patches[static_cast<std::size_t>(i)];
  }
  std::string name = ref.get<std::string>();
  if (name.rfind("fixture:", 0) == 0) name = name.substr(8);
  const auto it = a.images.find(name);
  if (it == a.images.end()) throw HttpError(400, "unknown image_ref " + ref.dump());
  return it->second;
}

stats::LatentMask Service::mask_for(const Params& params) const {
  const double pct = double_param(params, "filter_pct", 0.0);
  if (pct == 0.0) return stats::LatentMask::keep_all(artifacts_->sae->d_sae());
  if (!artifacts_->stats) throw HttpError(409, "filtering needs latent statistics");
  return stats::filter_noisy(*artifacts_->stats, pct);
}

Response Service::infer(Session& s, const nlohmann::json& body) {
  const auto& a = *artifacts_;
  Matrix image = resolve_image(body);
  std::vector<TokenId> prompt;
  if (body.contains("prompt") && body.at("prompt").is_array()) {
    prompt = body.at("prompt").get<std::vector<TokenId>>();
  } else if (body.contains("prompt")) {
    prompt = a.model->tokenize(body.at("prompt").get<std::string>());
  } else if (!a.fixture.is_null()) {
    prompt = a.model->tokenize(a.fixture.at("prompt").get<std::string>());
  } else {
    throw HttpError(400, "request needs a prompt");
  }
  const auto max_new = body.value("max_new", std::size_t{8});
  auto rec = vlm::generate(*a.model, image, prompt, max_new);
  s.latents = sae::encode(*a.sae, rec.layer_output(a.resolved_layer()));
  s.image = std::move(image);
  s.prompt = std::move(prompt);
  s.max_new = max_new;
  s.last = std::move(rec);
  auto j = json_io::inference_to_json(*s.last, *a.model, body.value("include_attention", false));
  j["session"] = s.id;
  return {200, j};
}

Response Service::attention(Session& s, const Params& params) {
  const auto& rec = require_inference(s);
  const auto& row = row_at(rec, params);
  const auto map = attention_for(rec, row, row_index(rec, row), bool_param(params, "renormalize", false));
  auto j = json_io::attention_to_json(map, artifacts_->model->config.grid);
  j["label"] = row.label;
  return {200, j};
}

Response Service::concepts(Session& s, const Params& params) {
  const auto& rec = require_inference(s);
  const auto& row = row_at(rec, params);
  const bool weighted = bool_param(params, "weighted", true);
  const Vector pooled =
      weighted ? linker::weighted_pool(s.latents, attention_for(rec, row, row_index(rec, row), false))
               : linker::mean_pool(s.latents);
  const auto ranked = linker::rank_concepts(pooled, mask_for(params), size_param(params, "top", 10));
  auto j = json_io::concepts_to_json(ranked);
  j["token"] = row_index(rec, row);
  j["label"] = row.label;
  j["weighted"] = weighted;
  return {200, j};
}

Response Service::heatmap(Session& s, const Params& params) {
  const auto& rec = require_inference(s);
  const std::size_t k = size_param(params, "k", 20);
  std::vector<std::string> labels;
  const Matrix pooled = pooled_rows(rec, s.latents, &labels);
  const auto mask = mask_for(params);
  auto hm = heatmap::build_heatmap(pooled, mask, k, labels);
  hm = heatmap::normalize_heatmap(std::move(hm), heatmap::norm_mode_from_string(param(params, "norm").value_or("column")));

  heatmap::ClusterOptions opts;
  opts.method = heatmap::method_from_string(param(params, "cluster").value_or("hierarchical"));
  opts.distance = cluster::distance_from_string(param(params, "distance").value_or("correlation"));
  if (param(params, "n_clusters")) opts.n_clusters = size_param(params, "n_clusters", 0);
  opts.seed = size_param(params, "seed", 0);
  hm = heatmap::cluster_heatmap(std::move(hm), opts);
  auto j = hm.to_json();
  j["k"] = k;
  return {200, j};
}

Response Service::steer(Session& s, const nlohmann::json& body) {
  const auto& a = *artifacts_;
  require_inference(s);
  auto spec = steer::SteeringSpec::from_json(body);
  if (spec.target_layer < 0) spec.target_layer = a.resolved_layer();
  const auto max_new = body.value("max_new", s.max_new);
  auto result = steer::steer_and_infer(*a.model, *a.sae, s.image, s.prompt, spec, max_new);
  auto j = result.to_json();
  j["spec"] = spec.to_json();
  j["history_index"] = s.history.size();
  s.history.emplace_back(std::move(spec), std::move(result));
  return {200, j};
}

Response Service::history(Session& s) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& [spec, result] : s.history) entries.push_back({{"spec", spec.to_json()}, {"result", result.to_json()}});
  return {200, {{"history", entries}}};
}

Response Service::latent_stats(const Params& params) {
  if (!artifacts_->stats) throw HttpError(409, "no latent statistics loaded");
  return {200, json_io::stats_to_json(*artifacts_->stats, mask_for(params))};
}

Response Service::references(const std::string& id, const Params& params) {
  const auto& a = *artifacts_;
  std::size_t used = 0;
  unsigned long long latent = 0;
  try {
    latent = std::stoull(id, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != id.size() || id[0] == '-' || latent >= a.sae->d_sae()) throw HttpError(404, "unknown latent " + id);
  if (a.dataset.images.empty()) throw HttpError(409, "no reference dataset loaded");
  const auto refs = stats::top_activating_references(*a.sae, a.dataset, static_cast<LatentId>(latent),
                                                     size_param(params, "k", 5));
  auto j = json_io::references_to_json(static_cast<LatentId>(latent), refs, a.dataset.labels);
  j["grid"] = {a.model->config.grid.rows, a.model->config.grid.cols};
  return {200, j};
}

Response Service::projection(const Params& params) {
  const auto proj = stats::project_decoder(*artifacts_->sae, size_param(params, "n_clusters", 8),
                                           size_param(params, "seed", 0));
  return {200, json_io::projection_to_json(proj)};
}

Response Service::classify(const nlohmann::json& body) {
  const auto& a = *artifacts_;
  const Matrix image = resolve_image(body);
  Matrix classes;
  std::vector<std::string> names;
  if (!body.contains("class_embeddings")) throw HttpError(400, "request needs class_embeddings");
  const auto& ce = body.at("class_embeddings");
  if (ce.is_string()) {
    const auto it = a.class_embeddings.find(ce.get<std::string>());
    if (it == a.class_embeddings.end()) throw HttpError(400, "unknown class embedding set " + ce.dump());
    classes = it->second;
    names = a.class_names.at(it->first);
  } else {
    classes = json_io::matrix_from_json(ce);
    if (body.contains("labels")) names = body.at("labels").get<std::vector<std::string>>();
  }
  const auto probs = vlm::classify(*a.model, image, classes);
  return {200, {{"probabilities", probs}, {"labels", names}}};
}

int effective_port(int configured) {
  if (const char* env = std::getenv("VSPAD_PORT"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end == '\0' && v > 0 && v < 65536) return static_cast<int>(v);
    throw std::invalid_argument(std::string("VSPAD_PORT is not a valid port: ") + env);
  }
  return configured;
}

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;
  explicit Impl(Service& s) : service(s) {}
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {
  auto route = [this](const httplib::Request& req, httplib::Response& res) {
    Params params(req.params.begin(), req.params.end());
    const auto r = impl_->service.handle(req.method, req.path, params, req.body);
    res.status = r.status;
    res.set_content(r.body.dump(), "application/json");
  };
  impl_->server.Get(".*", route);
  impl_->server.Post(".*", route);
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) return impl_->server.bind_to_any_port(host);
  return impl_->server.bind_to_port(host, port) ? port : -1;
}

bool HttpServer::listen() { return impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

bool serve(Service& service, const ServeConfig& config) {
  HttpServer server(service);
  if (server.bind(config.host, effective_port(config.port)) < 0) return false;
  return server.listen();
}

}  // namespace vspad::service
