#include <gtest/gtest.h>

#include <cstdlib>
#include <thread>

#include "oracles.hpp"
#include "vspad/concept_linker.hpp"
#include "vspad/flip_fixture.hpp"
#include "vspad/heatmap.hpp"
#include "vspad/service.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen internals.
#include "httplib.h"

using namespace vspad;
using namespace vspad::service;
using nlohmann::json;

namespace {

std::shared_ptr<const Artifacts> shared_fixture() {
  static const auto a = fixture_artifacts(0, 4);
  return a;
}

class ServiceTest : public ::testing::Test {
 protected:
  ServiceTest() : svc(shared_fixture()) {}

  Response get(const std::string& path, const Params& p = {}) { return svc.handle("GET", path, p, ""); }
  Response post(const std::string& path, const json& body) { return svc.handle("POST", path, {}, body.dump()); }

  std::string new_session() {
    const auto r = post("/session", json::object());
    EXPECT_EQ(r.status, 201);
    return r.body.at("id").get<std::string>();
  }

  std::string session_with_inference(const std::string& ref = "fixture:A") {
    const auto id = new_session();
    const auto r = post("/session/" + id + "/infer", {{"image_ref", ref}});
    EXPECT_EQ(r.status, 200) << r.body.dump();
    return id;
  }

  json zero_cue_spec() const {
    json ivs = json::object();
    for (const auto& id : shared_fixture()->fixture.at("cue_latents")) ivs[std::to_string(id.get<int>())] = {{"op", "zero"}};
    return {{"interventions", ivs}};
  }

  Service svc;
};

}  // namespace

TEST_F(ServiceTest, Health) {
  const auto r = get("/health");
  EXPECT_EQ(r.status, 200);
  EXPECT_EQ(r.body["status"], "ok");
  EXPECT_EQ(r.body["version"], kVersion);
}

TEST_F(ServiceTest, SessionLifecycle) {
  const auto a = new_session();
  const auto b = new_session();
  EXPECT_NE(a, b);
  EXPECT_EQ(svc.session_count(), 2u);
  const auto r = get("/session/" + a);
  EXPECT_EQ(r.status, 200);
  EXPECT_FALSE(r.body["has_inference"].get<bool>());
  EXPECT_EQ(r.body["d_sae"], shared_fixture()->sae->d_sae());
  EXPECT_EQ(get("/session/nope").status, 404);
  EXPECT_EQ(get("/no/such/route").status, 404);
}

TEST_F(ServiceTest, InferDecodesAAndReportsRows) {
  const auto id = new_session();
  const auto r = post("/session/" + id + "/infer", {{"image_ref", "fixture:A"}, {"include_attention", true}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["output_text"], "A");
  const auto& rows = r.body["rows"];
  const auto fx = vlm::make_flip_fixture();
  ASSERT_EQ(rows.size(), fx.prompt.size() + 1);
  EXPECT_TRUE(rows.back()["generated"].get<bool>());
  EXPECT_EQ(rows.back()["label"], "A");
  EXPECT_EQ(rows.back()["token"], fx.token_a);
  EXPECT_TRUE(rows[0].contains("attention"));
  EXPECT_TRUE(get("/session/" + id).body["has_inference"].get<bool>());

  EXPECT_EQ(post("/session/" + id + "/infer", {{"image_ref", "zero"}}).body["output_text"], "B");
  EXPECT_EQ(post("/session/" + id + "/infer", {{"image_ref", 0}}).status, 200);
}

TEST_F(ServiceTest, InferMatchesLibraryOnRawPatches) {
  const auto fx = vlm::make_flip_fixture();
  const Matrix img = fx.image_with_scaled_direction(2.0f);
  json patches = json::array();
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    patches.push_back(std::vector<float>(img.row(r).data(), img.row(r).data() + img.cols()));
  }
  const auto id = new_session();
  const auto r = post("/session/" + id + "/infer", {{"patches", patches}, {"max_new", 3}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto rec = vlm::generate(fx.model, img, fx.prompt, 3);
  EXPECT_EQ(r.body["output"].get<std::vector<TokenId>>(), rec.output);
  EXPECT_EQ(r.body["logits"][0].get<std::vector<float>>(), rec.logits[0]);
}

TEST_F(ServiceTest, InferErrors) {
  const auto id = new_session();
  EXPECT_EQ(post("/session/" + id + "/infer", json::object()).status, 400);
  EXPECT_EQ(post("/session/" + id + "/infer", {{"image_ref", "unknown"}}).status, 400);
  EXPECT_EQ(post("/session/" + id + "/infer", {{"image_ref", 100000}}).status, 400);
  EXPECT_EQ(post("/session/" + id + "/infer", {{"image_ref", "A"}, {"prompt", "zebra"}}).status, 400);
  EXPECT_EQ(post("/session/" + id + "/infer", {{"image_ref", "A"}, {"max_new", 100000}}).status, 422);
  EXPECT_EQ(svc.handle("POST", "/session/" + id + "/infer", {}, "{not json").status, 400);
  EXPECT_EQ(get("/session/" + id + "/heatmap").status, 409);
  EXPECT_EQ(post("/session/" + id + "/steer", json::object()).status, 409);
}

TEST_F(ServiceTest, AttentionIsMeanOverLayersAndHeads) {
  const auto id = session_with_inference();
  const auto r = get("/session/" + id + "/attention", {{"token", "1"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto weights = r.body["weights"].get<std::vector<float>>();
  ASSERT_EQ(weights.size(), 16u);

  const auto fx = vlm::make_flip_fixture();
  const auto rec = vlm::generate(fx.model, fx.image_a, fx.prompt, 8);
  const auto& attn = rec.rows[1].attn;
  for (std::size_t p = 0; p < 16; ++p) {
    double ref = 0.0;
    for (std::size_t l = 0; l < attn.n_layers; ++l) {
      for (std::size_t h = 0; h < attn.n_heads; ++h) ref += attn.at(l, h, p);
    }
    EXPECT_NEAR(weights[p], ref / static_cast<double>(attn.n_layers * attn.n_heads), 1e-6);
  }
  const auto renorm = get("/session/" + id + "/attention", {{"token", "1"}, {"renormalize", "true"}});
  double total = 0.0;
  for (float w : renorm.body["weights"].get<std::vector<float>>()) total += w;
  EXPECT_NEAR(total, 1.0, 1e-5);
  EXPECT_EQ(get("/session/" + id + "/attention", {{"token", "99"}}).status, 400);
  EXPECT_EQ(get("/session/" + id + "/attention", {{"token", "x"}}).status, 400);
}

TEST_F(ServiceTest, ConceptsAreRankedAndFiltered) {
  const auto id = session_with_inference();
  const auto r = get("/session/" + id + "/concepts", {{"token", "0"}, {"top", "5"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto& c = r.body["concepts"];
  ASSERT_EQ(c.size(), 5u);
  for (std::size_t i = 1; i < c.size(); ++i) EXPECT_GE(c[i - 1]["score"].get<float>(), c[i]["score"].get<float>());

  const auto filtered = get("/session/" + id + "/concepts", {{"top", "1000"}, {"filter_pct", "10"}});
  ASSERT_EQ(filtered.status, 200);
  const auto mask = stats::filter_noisy(*shared_fixture()->stats, 10.0);
  for (const auto& e : filtered.body["concepts"]) EXPECT_TRUE(mask.kept(e["latent"].get<LatentId>()));
  EXPECT_EQ(filtered.body["concepts"].size(), mask.kept());
  EXPECT_EQ(get("/session/" + id + "/concepts", {{"top", "0"}}).status, 400);
}

TEST_F(ServiceTest, HeatmapMatchesIndependentPoolingAndInvariants) {
  const auto id = session_with_inference();
  const auto r = get("/session/" + id + "/heatmap", {{"k", "5"}, {"norm", "none"}, {"cluster", "none"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto hm = heatmap::Heatmap::from_json(r.body);
  EXPECT_EQ(heatmap::check_invariants(hm, 5, shared_fixture()->sae->d_sae()), "");

  const auto fx = vlm::make_flip_fixture();
  const auto rec = vlm::generate(fx.model, fx.image_a, fx.prompt, 8);
  const Matrix h = sae::encode(fx.sae, rec.layer_output(fx.target_layer));
  Matrix pooled(static_cast<Eigen::Index>(rec.rows.size()), h.cols());
  for (std::size_t t = 0; t < rec.rows.size(); ++t) {
    const auto& a = rec.rows[t].attn;
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < 16; ++p) {
        double w = 0.0;
        for (std::size_t l = 0; l < a.n_layers; ++l) {
          for (std::size_t hd = 0; hd < a.n_heads; ++hd) w += a.at(l, hd, p);
        }
        s += w / static_cast<double>(a.n_layers * a.n_heads) * h(static_cast<Eigen::Index>(p), j);
      }
      pooled(static_cast<Eigen::Index>(t), j) = static_cast<float>(s);
    }
  }
  EXPECT_EQ(hm.n_tokens(), rec.rows.size());
  const auto ref = oracle::topk_union(pooled, 5);
  EXPECT_EQ(std::set<LatentId>(hm.latent_ids.begin(), hm.latent_ids.end()), ref);
  for (std::size_t c = 0; c < hm.latent_ids.size(); ++c) {
    for (Eigen::Index t = 0; t < pooled.rows(); ++t) {
      EXPECT_NEAR(hm.values(t, static_cast<Eigen::Index>(c)), pooled(t, hm.latent_ids[c]), 1e-5);
    }
  }
}

TEST_F(ServiceTest, HeatmapDefaultsAndErrors) {
  const auto id = session_with_inference();
  const auto r = get("/session/" + id + "/heatmap");
  ASSERT_EQ(r.status, 200);
  EXPECT_EQ(r.body["norm_mode"], "column");
  EXPECT_EQ(r.body["method"], "hierarchical");
  EXPECT_EQ(r.body["distance"], "correlation");
  EXPECT_EQ(r.body["k"], 20);
  EXPECT_EQ(heatmap::check_invariants(heatmap::Heatmap::from_json(r.body), 20, shared_fixture()->sae->d_sae()), "");
  EXPECT_EQ(get("/session/" + id + "/heatmap", {{"cluster", "kmeans"}}).status, 400);
  EXPECT_EQ(get("/session/" + id + "/heatmap", {{"cluster", "kmeans"}, {"n_clusters", "3"}}).status, 200);
  EXPECT_EQ(get("/session/" + id + "/heatmap", {{"norm", "zscore"}}).status, 400);
  EXPECT_EQ(get("/session/" + id + "/heatmap", {{"k", "0"}}).status, 400);
}

TEST_F(ServiceTest, FullFlowInferHeatmapSteer) {
  const auto id = session_with_inference();
  const auto hm = heatmap::Heatmap::from_json(get("/session/" + id + "/heatmap", {{"k", "20"}}).body);
  for (const auto& cue : shared_fixture()->fixture.at("cue_latents")) {
    EXPECT_NE(std::find(hm.latent_ids.begin(), hm.latent_ids.end(), cue.get<LatentId>()), hm.latent_ids.end());
  }
  const auto r = post("/session/" + id + "/steer", zero_cue_spec());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["baseline_text"], "A");
  EXPECT_EQ(r.body["steered_text"].get<std::string>().substr(0, 1), "B");
  EXPECT_EQ(r.body["first_divergence"], 0);
  EXPECT_EQ(r.body["history_index"], 0);

  const auto again = post("/session/" + id + "/steer", zero_cue_spec());
  EXPECT_EQ(again.body["history_index"], 1);
  auto a = r.body, b = again.body;
  a.erase("history_index");
  b.erase("history_index");
  EXPECT_EQ(a, b);

  const auto empty = post("/session/" + id + "/steer", json::object());
  EXPECT_TRUE(empty.body["first_divergence"].is_null());
  const auto hist = get("/session/" + id + "/history");
  ASSERT_EQ(hist.body["history"].size(), 3u);
  EXPECT_EQ(hist.body["history"][0]["result"]["first_divergence"], 0);
  EXPECT_EQ(get("/session/" + id).body["history_length"], 3);
}

TEST_F(ServiceTest, SteerErrors) {
  const auto id = session_with_inference();
  EXPECT_EQ(post("/session/" + id + "/steer", {{"interventions", {{"999", {{"op", "zero"}}}}}}).status, 400);
  EXPECT_EQ(post("/session/" + id + "/steer", {{"interventions", {{"1", {{"op", "scale"}, {"factor", -2}}}}}}).status,
            400);
  EXPECT_EQ(post("/session/" + id + "/steer", {{"interventions", {{"abc", {{"op", "zero"}}}}}}).status, 400);
  EXPECT_EQ(post("/session/" + id + "/steer", {{"layer", 9}}).status, 400);
}

TEST_F(ServiceTest, SessionsAreIndependentUnderConcurrency) {
  const auto a = session_with_inference("A");
  const auto b = session_with_inference("zero");
  std::vector<std::thread> threads;
  std::vector<std::string> outputs(8);
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] {
      const auto& id = i % 2 == 0 ? a : b;
      auto r = svc.handle("POST", "/session/" + id + "/steer", {}, json::object().dump());
      outputs[static_cast<std::size_t>(i)] = r.body["baseline_text"].get<std::string>();
    });
  }
  for (auto& t : threads) t.join();
  for (int i = 0; i < 8; ++i) EXPECT_EQ(outputs[static_cast<std::size_t>(i)].substr(0, 1), i % 2 == 0 ? "A" : "B");
  EXPECT_EQ(get("/session/" + a + "/history").body["history"].size(), 4u);
  EXPECT_EQ(get("/session/" + b + "/history").body["history"].size(), 4u);
}

TEST_F(ServiceTest, LatentStatsEndpoint) {
  const auto r = get("/latents/stats");
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto& st = *shared_fixture()->stats;
  const auto freq = r.body["frequency"].get<std::vector<double>>();
  ASSERT_EQ(freq.size(), st.d_sae());
  for (double f : freq) {
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 1.0);
  }
  const auto filtered = get("/latents/stats", {{"filter_pct", "5"}});
  EXPECT_EQ(filtered.body["removed"], stats::filter_noisy(st, 5.0).removed());
  EXPECT_EQ(get("/latents/stats", {{"filter_pct", "500"}}).status, 400);
}

TEST_F(ServiceTest, ReferencesEndpoint) {
  const auto cue = shared_fixture()->fixture.at("cue_latents")[0].get<int>();
  const auto r = get("/latents/" + std::to_string(cue) + "/references", {{"k", "3"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto& refs = r.body["references"];
  ASSERT_EQ(refs.size(), 3u);
  for (std::size_t i = 1; i < refs.size(); ++i) {
    EXPECT_GE(refs[i - 1]["activation"].get<float>(), refs[i]["activation"].get<float>());
  }
  EXPECT_EQ(get("/latents/5000/references").status, 404);
  EXPECT_EQ(get("/latents/x/references").status, 404);
}

TEST_F(ServiceTest, ProjectionEndpoint) {
  const auto r = get("/latents/projection", {{"n_clusters", "3"}, {"seed", "2"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["points"].size(), shared_fixture()->sae->d_sae());
  EXPECT_EQ(get("/latents/projection", {{"n_clusters", "3"}, {"seed", "2"}}).body, r.body);
}

TEST_F(ServiceTest, ClassifyEndpoint) {
  const auto r = post("/classify", {{"image_ref", "A"}, {"class_embeddings", "fixture"}});
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const auto probs = r.body["probabilities"].get<std::vector<double>>();
  double total = 0.0;
  for (double p : probs) total += p;
  EXPECT_NEAR(total, 1.0, 1e-9);
  EXPECT_EQ(r.body["labels"].size(), probs.size());

  const auto& a = *shared_fixture();
  const auto direct = vlm::classify(*a.model, a.images.at("A"), a.class_embeddings.at("fixture"));
  for (std::size_t i = 0; i < probs.size(); ++i) EXPECT_DOUBLE_EQ(probs[i], direct[i]);

  EXPECT_EQ(post("/classify", {{"image_ref", "A"}}).status, 400);
  EXPECT_EQ(post("/classify", {{"image_ref", "A"}, {"class_embeddings", "nope"}}).status, 400);
  json zero = json::array({std::vector<float>(a.model->config.d_lm, 0.0f)});
  EXPECT_EQ(post("/classify", {{"image_ref", "A"}, {"class_embeddings", zero}}).status, 400);
}

TEST(ServicePort, EnvironmentOverride) {
  ::unsetenv("VSPAD_PORT");
  EXPECT_EQ(effective_port(8080), 8080);
  ::setenv("VSPAD_PORT", "9123", 1);
  EXPECT_EQ(effective_port(8080), 9123);
  ::setenv("VSPAD_PORT", "abc", 1);
  EXPECT_THROW(effective_port(8080), std::invalid_argument);
  ::unsetenv("VSPAD_PORT");
}

TEST(HttpTransport, RoundTripOverLoopback) {
  Service svc(shared_fixture());
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  std::thread t([&] { server.listen(); });

  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(30, 0);
  httplib::Result health;
  for (int i = 0; i < 100 && !(health = cli.Get("/health")); ++i) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);

  auto created = cli.Post("/session", "{}", "application/json");
  ASSERT_TRUE(created);
  EXPECT_EQ(created->status, 201);
  const auto id = json::parse(created->body)["id"].get<std::string>();
  auto inf = cli.Post("/session/" + id + "/infer", R"({"image_ref": "fixture:A"})", "application/json");
  ASSERT_TRUE(inf);
  EXPECT_EQ(json::parse(inf->body)["output_text"], "A");
  auto hm = cli.Get("/session/" + id + "/heatmap?k=20&norm=column&cluster=hierarchical&distance=correlation");
  ASSERT_TRUE(hm);
  EXPECT_EQ(hm->status, 200);
  EXPECT_EQ(heatmap::check_invariants(heatmap::Heatmap::from_json(json::parse(hm->body)), 20, shared_fixture()->sae->d_sae()), "");
  json ivs = json::object();
  for (const auto& c : shared_fixture()->fixture.at("cue_latents")) ivs[std::to_string(c.get<int>())] = {{"op", "zero"}};
  auto st = cli.Post("/session/" + id + "/steer", json{{"interventions", ivs}}.dump(), "application/json");
  ASSERT_TRUE(st);
  EXPECT_EQ(json::parse(st->body)["first_divergence"], 0);
  auto missing = cli.Get("/session/zzz");
  ASSERT_TRUE(missing);
  EXPECT_EQ(missing->status, 404);

  server.stop();
  t.join();
}
