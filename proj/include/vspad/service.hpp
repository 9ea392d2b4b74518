#pragma once

#include <atomic>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "vspad/latent_stats.hpp"
#include "vspad/sae.hpp"
#include "vspad/steering.hpp"
#include "vspad/toy_vlm.hpp"

namespace vspad::service {

inline constexpr const char* kVersion = "0.1.0";

/// Read-only state shared by every session.
struct Artifacts {
  std::shared_ptr<const vlm::ToyVlm> model;
  std::shared_ptr<const sae::SaeModel> sae;
  int layer = -1;  // vision layer the SAE reads; -1 = last
  stats::ImageSet dataset;               // SAE-layer activations per image
  std::vector<Matrix> dataset_patches;   // raw inputs, may be empty
  std::optional<stats::LatentStats> stats;
  std::map<std::string, Matrix> images;  // named images ("A", "zero", ...)
  std::map<std::string, Matrix> class_embeddings;
  std::map<std::string, std::vector<std::string>> class_names;
  nlohmann::json fixture = nullptr;      // fixture description when built from one

  int resolved_layer() const;
};

/// Everything built in memory from the flip fixture with a labeled
/// dataset, its stats and per-label class embeddings.
std::shared_ptr<const Artifacts> fixture_artifacts(std::uint64_t seed = 0, std::size_t per_label = 8);

struct ArtifactPaths {
  std::string model;
  std::string sae;
  std::string stats;  // optional
  std::string trace;  // optional dataset trace
  int layer = -1;
};
std::shared_ptr<const Artifacts> load_artifacts(const ArtifactPaths& paths);

/// Attention-weighted SAE codes for every recorded text row, [n_rows, d_sae],
/// plus the row labels.
Matrix pooled_rows(const vlm::InferenceRecord& rec, const Matrix& latents, std::vector<std::string>* labels = nullptr);

struct Session {
  std::string id;
  std::mutex mutex;
  std::optional<vlm::InferenceRecord> last;
  Matrix image;
  std::vector<TokenId> prompt;
  std::size_t max_new = 8;
  Matrix latents;  // SAE codes of the last inference at the SAE layer
  std::vector<std::pair<steer::SteeringSpec, steer::SteerResult>> history;
};

struct Response {
  int status = 200;
  nlohmann::json body;
};

using Params = std::multimap<std::string, std::string>;

/// Routing and handlers, independent of the transport.
class Service {
 public:
  explicit Service(std::shared_ptr<const Artifacts> artifacts);

  Response handle(const std::string& method, const std::string& path, const Params& params,
                  const std::string& body);

  std::size_t session_count() const;

 private:
  std::shared_ptr<Session> find_session(const std::string& id) const;

  Response create_session();
  Response describe_session(Session& s);
  Response infer(Session& s, const nlohmann::json& body);
  Response attention(Session& s, const Params& params);
  Response concepts(Session& s, const Params& params);
  Response heatmap(Session& s, const Params& params);
  Response steer(Session& s, const nlohmann::json& body);
  Response history(Session& s);
  Response latent_stats(const Params& params);
  Response references(const std::string& id, const Params& params);
  Response projection(const Params& params);
  Response classify(const nlohmann::json& body);

  Matrix resolve_image(const nlohmann::json& body) const;
  stats::LatentMask mask_for(const Params& params) const;

  std::shared_ptr<const Artifacts> artifacts_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::atomic<std::uint64_t> next_id_{1};
};

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
};

/// Port from VSPAD_PORT when set, else the configured one.
int effective_port(int configured);

/// cpp-httplib transport over a Service.
class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Port 0 picks a free port. Returns the bound port, or -1 on failure.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  bool listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// bind + listen. Returns false when binding fails.
bool serve(Service& service, const ServeConfig& config);

}  // namespace vspad::service
