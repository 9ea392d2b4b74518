#include "vspad/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "vspad/concept_linker.hpp"
#include "vspad/flip_fixture.hpp"
#include "vspad/heatmap.hpp"
#include "vspad/json_io.hpp"
#include "vspad/latent_stats.hpp"
#include "vspad/service.hpp"
#include "vspad/steering.hpp"

namespace vspad::cli {

namespace {

struct ModelOptions {
  bool fixture = false;
  std::uint64_t seed = 0;
  std::string model;
  std::string sae;
  std::string image;
  std::size_t image_index = 0;
  std::string prompt;
  std::size_t max_new = 8;
  int layer = -1;

  void add_to(CLI::App* cmd, bool needs_sae) {
    cmd->add_flag("--fixture", fixture, "Use the built-in flip fixture model, SAE and images");
    cmd->add_option("--seed", seed, "Fixture seed");
    cmd->add_option("--model", model, "Toy VLM checkpoint");
    if (needs_sae) cmd->add_option("--sae", sae, "SAE checkpoint");
    cmd->add_option("--image", image, "Image tensor file, trace file, or fixture:A|no_cue|zero");
    cmd->add_option("--image-index", image_index, "Image index when --image is a trace");
    cmd->add_option("--prompt", prompt, "Prompt text");
    cmd->add_option("--max-new", max_new, "Maximum generated tokens")->check(CLI::PositiveNumber);
    cmd->add_option("--layer", layer, "Vision layer read by the SAE (-1 = last)");
  }
};

struct Workspace {
  vlm::ToyVlm model;
  sae::SaeModel sae;
  Matrix image;
  std::vector<TokenId> prompt;
  int layer = 0;
};

Matrix load_image(const std::string& path, std::size_t index) {
  const auto f = io::load_tensor_file(path);
  if (f.kind() == "trace") {
    const auto trace = ActivationTrace::from_file(f);
    if (!trace.patches) throw std::invalid_argument(path + ": trace has no raw patches");
    if (index >= trace.n_images) throw std::invalid_argument("image index outside trace");
    const auto np = static_cast<Eigen::Index>(trace.n_patches());
    return trace.patches->middleRows(static_cast<Eigen::Index>(index) * np, np);
  }
  return io::to_matrix(f.at("image"));
}

Workspace load_workspace(const ModelOptions& o, bool needs_sae, bool needs_prompt = true) {
  Workspace w;
  std::optional<vlm::FlipFixture> fx;
  if (o.fixture) {
    fx = vlm::make_flip_fixture(o.seed);
    w.model = fx->model;
    w.sae = fx->sae;
  } else {
    if (o.model.empty()) throw CLI::RequiredError("--model or --fixture");
    w.model = vlm::ToyVlm::from_file(io::load_tensor_file(o.model));
    if (needs_sae) {
      if (o.sae.empty()) throw CLI::RequiredError("--sae");
      w.sae = sae::SaeModel::from_file(io::load_tensor_file(o.sae));
    }
  }
  if (!o.fixture && !o.sae.empty() && !needs_sae) w.sae = sae::SaeModel::from_file(io::load_tensor_file(o.sae));

  const std::string image = o.image.empty() && fx ? "fixture:A" : o.image;
  if (image.empty()) throw CLI::RequiredError("--image");
  if (image.rfind("fixture:", 0) == 0) {
    const auto which = image.substr(8);
    const auto& f = fx ? *fx : vlm::make_flip_fixture(o.seed);
    if (which == "A") {
      w.image = f.image_a;
    } else if (which == "no_cue") {
      w.image = f.image_without_cue_direction();
    } else if (which == "zero") {
      w.image = Matrix::Zero(f.image_a.rows(), f.image_a.cols());
    } else {
      throw std::invalid_argument("unknown fixture image " + which);
    }
  } else {
    w.image = load_image(image, o.image_index);
  }

  if (!o.prompt.empty()) {
    w.prompt = w.model.tokenize(o.prompt);
  } else if (fx) {
    w.prompt = fx->prompt;
  } else if (needs_prompt) {
    throw CLI::RequiredError("--prompt");
  }
  const int n_layers = static_cast<int>(w.model.config.vision_layers);
  w.layer = o.layer < 0 ? n_layers - 1 : o.layer;
  if (w.layer >= n_layers) throw std::invalid_argument("--layer outside vision tower");
  return w;
}

void write_json(const nlohmann::json& j, const std::string& path, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error("write failed: " + path);
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  const auto j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded()) throw std::invalid_argument(path + ": invalid JSON");
  return j;
}

stats::ImageSet load_dataset(const std::string& trace_path, int& layer) {
  const auto trace = ActivationTrace::from_file(io::load_tensor_file(trace_path));
  if (trace.layers.empty()) throw std::invalid_argument(trace_path + ": trace has no layers");
  if (layer < 0) layer = trace.layers.back().layer;
  return stats::ImageSet::from_trace(trace, layer);
}

Matrix stack_rows(const std::vector<Matrix>& images) {
  Eigen::Index rows = 0;
  for (const auto& m : images) rows += m.rows();
  Matrix out(rows, images.empty() ? 0 : images.front().cols());
  Eigen::Index r = 0;
  for (const auto& m : images) {
    out.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  return out;
}

std::pair<heatmap::Method, cluster::Distance> parse_cluster(const std::string& s) {
  const auto colon = s.find(':');
  const auto method = heatmap::method_from_string(s.substr(0, colon));
  const auto distance =
      colon == std::string::npos ? cluster::Distance::correlation : cluster::distance_from_string(s.substr(colon + 1));
  return {method, distance};
}

ActivationTrace dataset_trace(const vlm::ToyVlm& model, const std::vector<Matrix>& images,
                              const std::vector<std::string>& labels) {
  ActivationTrace t;
  t.n_images = images.size();
  t.grid = model.config.grid;
  t.labels = labels;
  std::vector<std::vector<Matrix>> per_layer(model.config.vision_layers);
  for (const auto& img : images) {
    std::vector<Matrix> layers;
    vlm::encode_image(model, img, std::nullopt, &layers);
    for (std::size_t l = 0; l < layers.size(); ++l) per_layer[l].push_back(std::move(layers[l]));
  }
  for (std::size_t l = 0; l < per_layer.size(); ++l) t.layers.push_back({static_cast<int>(l), stack_rows(per_layer[l])});
  t.patches = stack_rows(images);
  return t;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sparse-autoencoder workbench for a toy vision-language model", "vspad"};
  app.require_subcommand(1);

  // train-sae
  auto* train = app.add_subcommand("train-sae", "Train an SAE on trace activations");
  std::string train_trace, train_out, train_report, train_mode = "standard";
  int train_layer = -1;
  std::size_t expansion = 8;
  sae::TrainConfig tc;
  train->add_option("--trace", train_trace, "Activation trace")->required();
  train->add_option("--layer", train_layer, "Recorded layer (default: last)");
  train->add_option("--expansion", expansion, "d_sae / d_model")->check(CLI::PositiveNumber);
  train->add_option("--mode", train_mode, "literal or standard")->check(CLI::IsMember({"literal", "standard"}));
  train->add_option("--l1", tc.l1_coefficient, "L1 coefficient")->check(CLI::NonNegativeNumber);
  train->add_option("--lr", tc.learning_rate, "Learning rate")->check(CLI::NonNegativeNumber);
  train->add_option("--steps", tc.steps, "Optimizer steps");
  train->add_option("--batch", tc.batch_size, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--seed", tc.seed, "Seed");
  train->add_option("--log-every", tc.log_every, "Loss curve spacing");
  train->add_option("--out", train_out, "Output checkpoint")->required();
  train->add_option("--report", train_report, "Training report JSON (default stdout)");

  // stats
  auto* stats_cmd = app.add_subcommand("stats", "Per-latent statistics over a dataset trace");
  std::string stats_sae, stats_trace, stats_out, stats_json;
  int stats_layer = -1;
  std::size_t stats_topk = 10;
  double stats_eps = 1e-6, stats_pct = 0.0;
  stats_cmd->add_option("--sae", stats_sae, "SAE checkpoint")->required();
  stats_cmd->add_option("--trace", stats_trace, "Dataset trace with labels")->required();
  stats_cmd->add_option("--layer", stats_layer, "Recorded layer (default: last)");
  stats_cmd->add_option("--topk", stats_topk, "Images used for label entropy (0 = skip)");
  stats_cmd->add_option("--epsilon", stats_eps, "Activity threshold")->check(CLI::NonNegativeNumber);
  stats_cmd->add_option("--filter-pct", stats_pct, "Noisy-latent filter percentile for the JSON summary");
  stats_cmd->add_option("--out", stats_out, "Output stats file")->required();
  stats_cmd->add_option("--json", stats_json, "JSON summary path (default stdout)");

  // infer
  auto* infer = app.add_subcommand("infer", "Greedy generation with activation capture");
  ModelOptions infer_opts;
  infer_opts.add_to(infer, false);
  std::string infer_out, infer_trace;
  bool infer_attn = false;
  infer->add_option("--out", infer_out, "Record JSON (default stdout)");
  infer->add_option("--trace-out", infer_trace, "Write the run as a trace file");
  infer->add_flag("--attention", infer_attn, "Include attention rows in the JSON");

  // heatmap
  auto* heat = app.add_subcommand("heatmap", "Token x latent heatmap for one inference");
  ModelOptions heat_opts;
  heat_opts.add_to(heat, true);
  std::size_t heat_k = 20;
  std::string heat_norm = "column", heat_cluster = "hierarchical:correlation", heat_out, heat_stats;
  std::optional<std::size_t> heat_n;
  double heat_pct = 0.0;
  std::uint64_t heat_seed = 0;
  heat->add_option("--k", heat_k, "Top latents per token")->check(CLI::PositiveNumber);
  heat->add_option("--norm", heat_norm, "none|row|column")->check(CLI::IsMember({"none", "row", "column"}));
  heat->add_option("--cluster", heat_cluster, "method[:distance], e.g. hierarchical:correlation");
  heat->add_option("--n-clusters", heat_n, "Cluster count");
  heat->add_option("--stats", heat_stats, "Stats file for filtering");
  heat->add_option("--filter-pct", heat_pct, "Noisy-latent filter percentile");
  heat->add_option("--cluster-seed", heat_seed, "k-means seed");
  heat->add_option("--out", heat_out, "Heatmap JSON (default stdout)");

  // steer
  auto* steer_cmd = app.add_subcommand("steer", "Intervene on SAE latents and compare outputs");
  ModelOptions steer_opts;
  steer_opts.add_to(steer_cmd, true);
  std::string steer_spec, steer_baseline, steer_out;
  steer_cmd->add_option("--spec", steer_spec, "Steering spec JSON")->required();
  steer_cmd->add_option("--baseline", steer_baseline, "raw|reconstructed (overrides the spec)")
      ->check(CLI::IsMember({"raw", "reconstructed"}));
  steer_cmd->add_option("--out", steer_out, "Result JSON (default stdout)");

  // project
  auto* proj = app.add_subcommand("project", "2D projection and clusters of decoder directions");
  std::string proj_sae, proj_out;
  std::size_t proj_k = 8;
  std::uint64_t proj_seed = 0;
  proj->add_option("--sae", proj_sae, "SAE checkpoint")->required();
  proj->add_option("--n-clusters", proj_k, "k-means clusters")->check(CLI::PositiveNumber);
  proj->add_option("--seed", proj_seed, "k-means seed");
  proj->add_option("--out", proj_out, "JSON (default stdout)");

  // classify
  auto* cls = app.add_subcommand("classify", "Cosine-softmax classification against class embeddings");
  ModelOptions cls_opts;
  cls_opts.add_to(cls, false);
  std::string cls_classes, cls_out;
  cls->add_option("--classes", cls_classes, "Tensor file with a 'classes' entry [n, d_lm]")->required();
  cls->add_option("--out", cls_out, "JSON (default stdout)");

  // fixture
  auto* fixture = app.add_subcommand("fixture", "Write the flip fixture artifacts to a directory");
  std::string fx_dir;
  std::uint64_t fx_seed = 0;
  std::size_t fx_per_label = 8;
  fixture->add_option("--out-dir", fx_dir, "Output directory")->required();
  fixture->add_option("--seed", fx_seed, "Fixture seed");
  fixture->add_option("--per-label", fx_per_label, "Dataset images per label")->check(CLI::PositiveNumber);

  // serve
  auto* serve_cmd = app.add_subcommand("serve", "HTTP service (VSPAD_PORT overrides --port)");
  bool serve_fixture = false;
  service::ArtifactPaths paths;
  service::ServeConfig sc;
  serve_cmd->add_flag("--fixture", serve_fixture, "Serve the in-memory flip fixture");
  serve_cmd->add_option("--model", paths.model, "Toy VLM checkpoint");
  serve_cmd->add_option("--sae", paths.sae, "SAE checkpoint");
  serve_cmd->add_option("--stats", paths.stats, "Stats file");
  serve_cmd->add_option("--trace", paths.trace, "Dataset trace for references");
  serve_cmd->add_option("--layer", paths.layer, "Vision layer read by the SAE");
  serve_cmd->add_option("--host", sc.host, "Bind address");
  serve_cmd->add_option("--port", sc.port, "Port")->check(CLI::Range(1, 65535));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*train) {
      int layer = train_layer;
      const auto data = load_dataset(train_trace, layer);
      const auto result = sae::train(stack_rows(data.images), tc, expansion, sae::bias_mode_from_string(train_mode));
      io::save_tensor_file(result.model.to_file(), train_out);
      auto report = json_io::train_report_to_json(result.report);
      report["layer"] = layer;
      write_json(report, train_report, out);
    } else if (*stats_cmd) {
      const auto model = sae::SaeModel::from_file(io::load_tensor_file(stats_sae));
      int layer = stats_layer;
      const auto data = load_dataset(stats_trace, layer);
      const auto s = stats::compute_stats(model, data, stats_eps, stats_topk);
      io::save_tensor_file(s.to_file(), stats_out);
      const auto mask = stats_pct > 0.0 ? stats::filter_noisy(s, stats_pct) : stats::LatentMask::keep_all(s.d_sae());
      write_json(json_io::stats_to_json(s, mask), stats_json, out);
    } else if (*infer) {
      const auto w = load_workspace(infer_opts, false);
      const auto rec = vlm::generate(w.model, w.image, w.prompt, infer_opts.max_new);
      if (!infer_trace.empty()) io::save_tensor_file(rec.to_trace(w.model, w.image).to_file(), infer_trace);
      write_json(json_io::inference_to_json(rec, w.model, infer_attn), infer_out, out);
    } else if (*heat) {
      const auto w = load_workspace(heat_opts, true);
      const auto rec = vlm::generate(w.model, w.image, w.prompt, heat_opts.max_new);
      const Matrix h = sae::encode(w.sae, rec.layer_output(w.layer));
      stats::LatentMask mask = stats::LatentMask::keep_all(w.sae.d_sae());
      if (heat_pct > 0.0) {
        if (heat_stats.empty()) throw CLI::RequiredError("--stats (needed by --filter-pct)");
        mask = stats::filter_noisy(stats::LatentStats::from_file(io::load_tensor_file(heat_stats)), heat_pct);
      }
      std::vector<std::string> labels;
      const Matrix pooled = service::pooled_rows(rec, h, &labels);
      auto hm = heatmap::build_heatmap(pooled, mask, heat_k, labels);
      hm = heatmap::normalize_heatmap(std::move(hm), heatmap::norm_mode_from_string(heat_norm));
      heatmap::ClusterOptions opts;
      std::tie(opts.method, opts.distance) = parse_cluster(heat_cluster);
      opts.n_clusters = heat_n;
      opts.seed = heat_seed;
      hm = heatmap::cluster_heatmap(std::move(hm), opts);
      auto j = hm.to_json();
      j["k"] = heat_k;
      write_json(j, heat_out, out);
    } else if (*steer_cmd) {
      const auto w = load_workspace(steer_opts, true);
      auto spec = steer::SteeringSpec::from_json(read_json(steer_spec));
      if (!steer_baseline.empty()) spec.baseline = steer::baseline_from_string(steer_baseline);
      if (spec.target_layer < 0) spec.target_layer = w.layer;
      const auto res = steer::steer_and_infer(w.model, w.sae, w.image, w.prompt, spec, steer_opts.max_new);
      auto j = res.to_json();
      j["spec"] = spec.to_json();
      write_json(j, steer_out, out);
    } else if (*proj) {
      const auto model = sae::SaeModel::from_file(io::load_tensor_file(proj_sae));
      write_json(json_io::projection_to_json(stats::project_decoder(model, proj_k, proj_seed)), proj_out, out);
    } else if (*cls) {
      const auto w = load_workspace(cls_opts, false, false);
      const auto f = io::load_tensor_file(cls_classes);
      const auto probs = vlm::classify(w.model, w.image, io::to_matrix(f.at("classes")));
      write_json({{"probabilities", probs}, {"labels", f.manifest.value("labels", std::vector<std::string>{})}},
                 cls_out, out);
    } else if (*fixture) {
      namespace fs = std::filesystem;
      fs::create_directories(fx_dir);
      const auto fx = vlm::make_flip_fixture(fx_seed);
      const auto ds = vlm::make_fixture_dataset(fx, fx_per_label, fx_seed + 1);
      const auto a = service::fixture_artifacts(fx_seed, fx_per_label);
      const fs::path dir(fx_dir);
      io::save_tensor_file(fx.model.to_file(), (dir / "model.vspad").string());
      io::save_tensor_file(fx.sae.to_file(), (dir / "sae.vspad").string());
      for (const auto& [name, img] : a->images) {
        io::TensorFile f;
        f.add("image", img);
        f.manifest = {{"kind", "image"}};
        io::save_tensor_file(f, (dir / ("image_" + name + ".vspad")).string());
      }
      io::save_tensor_file(dataset_trace(fx.model, ds.images, ds.labels).to_file(), (dir / "dataset.vspad").string());
      io::TensorFile classes;
      classes.add("classes", a->class_embeddings.at("fixture"));
      classes.manifest = {{"kind", "classes"}, {"labels", a->class_names.at("fixture")}};
      io::save_tensor_file(classes, (dir / "classes.vspad").string());

      steer::SteeringSpec cue;
      for (const auto id : fx.cue_latents) cue.interventions[id] = steer::Zero{};
      cue.target_layer = fx.target_layer;
      steer::SteeringSpec rival = cue;
      for (const auto id : fx.rival_latents) rival.interventions[id] = steer::Scale{3.0f};
      write_json(cue.to_json(), (dir / "spec_zero_cue.json").string(), out);
      write_json(rival.to_json(), (dir / "spec_rival_x3.json").string(), out);
      write_json(fx.describe(), (dir / "fixture.json").string(), out);
      out << fx_dir << "\n";
    } else if (*serve_cmd) {
      std::shared_ptr<const service::Artifacts> artifacts;
      if (serve_fixture) {
        artifacts = service::fixture_artifacts();
      } else {
        if (paths.model.empty() || paths.sae.empty()) throw CLI::RequiredError("--model and --sae (or --fixture)");
        artifacts = service::load_artifacts(paths);
      }
      service::Service svc(artifacts);
      const int port = service::effective_port(sc.port);
      service::HttpServer server(svc);
      if (server.bind(sc.host, port) < 0) throw std::runtime_error("cannot bind " + sc.host + ":" + std::to_string(port));
      err << "listening on " << sc.host << ":" << port << "\n";
      server.listen();
    }
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

int cli_dispatch(int argc, const char* const* argv) { return cli_dispatch(argc, argv, std::cout, std::cerr); }

}  // namespace vspad::cli
