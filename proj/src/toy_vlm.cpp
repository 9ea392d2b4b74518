#include "vspad/toy_vlm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <sstream>

namespace vspad::vlm {

void Config::validate() const {
  require_shape(patch_dim > 0 && d_model > 0 && d_lm > 0 && vocab_size > 0, "toy VLM dims must be positive");
  require_shape(n_heads > 0 && d_model % n_heads == 0 && d_lm % n_heads == 0,
                "d_model and d_lm must be divisible by n_heads");
  require_shape(vision_layers > 0, "toy VLM needs at least one vision layer");
  require_shape(grid.size() > 0, "patch grid must be nonempty");
  require_shape(end_token >= 0 && static_cast<std::size_t>(end_token) < vocab_size, "end token outside vocab");
}

nlohmann::json Config::to_json() const {
  return {{"patch_dim", patch_dim},        {"d_model", d_model},
          {"d_lm", d_lm},                  {"vision_layers", vision_layers},
          {"text_layers", text_layers},    {"n_heads", n_heads},
          {"vocab_size", vocab_size},      {"patch_grid", {grid.rows, grid.cols}},
          {"mlp_ratio", mlp_ratio},        {"use_norm", use_norm},
          {"norm_eps", norm_eps},          {"max_positions", max_positions},
          {"end_token", end_token}};
}

Config Config::from_json(const nlohmann::json& j) {
  Config c;
  c.patch_dim = j.value("patch_dim", c.patch_dim);
  c.d_model = j.value("d_model", c.d_model);
  c.d_lm = j.value("d_lm", c.d_lm);
  c.vision_layers = j.value("vision_layers", c.vision_layers);
  c.text_layers = j.value("text_layers", c.text_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  if (j.contains("patch_grid")) {
    c.grid.rows = j["patch_grid"].at(0).get<std::size_t>();
    c.grid.cols = j["patch_grid"].at(1).get<std::size_t>();
  }
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.use_norm = j.value("use_norm", c.use_norm);
  c.norm_eps = j.value("norm_eps", c.norm_eps);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.end_token = j.value("end_token", c.end_token);
  c.validate();
  return c;
}

namespace {

Matrix random_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, float scale) {
  std::normal_distribution<float> normal(0.0f, scale);
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

LayerNorm unit_norm(std::size_t d) {
  return {Vector::Ones(static_cast<Eigen::Index>(d)), Vector::Zero(static_cast<Eigen::Index>(d))};
}

Block random_block(std::mt19937_64& rng, std::size_t d, std::size_t mlp) {
  const float s = 1.0f / std::sqrt(static_cast<float>(d));
  Block b;
  b.ln1 = unit_norm(d);
  b.ln2 = unit_norm(d);
  b.wq = random_matrix(rng, d, d, s);
  b.wk = random_matrix(rng, d, d, s);
  b.wv = random_matrix(rng, d, d, s);
  b.wo = random_matrix(rng, d, d, s * 0.5f);
  b.w1 = random_matrix(rng, d, mlp, s);
  b.b1 = Vector::Zero(static_cast<Eigen::Index>(mlp));
  b.w2 = random_matrix(rng, mlp, d, 0.5f / std::sqrt(static_cast<float>(mlp)));
  b.b2 = Vector::Zero(static_cast<Eigen::Index>(d));
  return b;
}

Matrix layer_norm(const Matrix& x, const LayerNorm& ln, float eps) {
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const float mean = x.row(r).mean();
    const RowVector c = x.row(r).array() - mean;
    const float var = c.squaredNorm() / static_cast<float>(x.cols());
    out.row(r) = (c / std::sqrt(var + eps)).cwiseProduct(ln.gamma.transpose()) + ln.beta.transpose();
  }
  return out;
}

float gelu(float v) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * v * (1.0f + std::tanh(k * (v + 0.044715f * v * v * v)));
}

// Multi-head self-attention. probs (optional) receives one [P, P]
// row-stochastic matrix per head, zero above the diagonal when causal.
Matrix self_attention(const Block& b, const Matrix& x, std::size_t heads, bool causal, std::vector<Matrix>* probs) {
  const Eigen::Index p = x.rows();
  const Eigen::Index d = x.cols();
  const Eigen::Index hd = d / static_cast<Eigen::Index>(heads);
  const Matrix q = x * b.wq;
  const Matrix k = x * b.wk;
  const Matrix v = x * b.wv;
  Matrix concat = Matrix::Zero(p, d);
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  if (probs) probs->assign(heads, Matrix::Zero(p, p));
  std::vector<double> row(static_cast<std::size_t>(p));
  for (std::size_t h = 0; h < heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * hd;
    const auto qh = q.middleCols(off, hd);
    const auto kh = k.middleCols(off, hd);
    const auto vh = v.middleCols(off, hd);
    for (Eigen::Index i = 0; i < p; ++i) {
      const Eigen::Index limit = causal ? i + 1 : p;
      double mx = -std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < limit; ++j) {
        row[static_cast<std::size_t>(j)] = scale * static_cast<double>(qh.row(i).dot(kh.row(j)));
        mx = std::max(mx, row[static_cast<std::size_t>(j)]);
      }
      double total = 0.0;
      for (Eigen::Index j = 0; j < limit; ++j) {
        row[static_cast<std::size_t>(j)] = std::exp(row[static_cast<std::size_t>(j)] - mx);
        total += row[static_cast<std::size_t>(j)];
      }
      RowVector out = RowVector::Zero(hd);
      for (Eigen::Index j = 0; j < limit; ++j) {
        const double w = row[static_cast<std::size_t>(j)] / total;
        out += static_cast<float>(w) * vh.row(j);
        if (probs) (*probs)[h](i, j) = static_cast<float>(w);
      }
      concat.block(i, off, 1, hd) = out;
    }
  }
  return concat * b.wo;
}

Matrix run_block(const Block& b, const Matrix& x, const Config& c, bool causal, std::vector<Matrix>* probs) {
  const Matrix a_in = c.use_norm ? layer_norm(x, b.ln1, c.norm_eps) : x;
  Matrix h = x + self_attention(b, a_in, c.n_heads, causal, probs);
  const Matrix m_in = c.use_norm ? layer_norm(h, b.ln2, c.norm_eps) : h;
  Matrix hidden = m_in * b.w1;
  hidden.rowwise() += b.b1.transpose();
  hidden = hidden.unaryExpr(&gelu);
  Matrix mlp = hidden * b.w2;
  mlp.rowwise() += b.b2.transpose();
  return h + mlp;
}

void write_block(io::TensorFile& f, const std::string& prefix, const Block& b) {
  f.add(prefix + ".ln1.gamma", b.ln1.gamma);
  f.add(prefix + ".ln1.beta", b.ln1.beta);
  f.add(prefix + ".wq", b.wq);
  f.add(prefix + ".wk", b.wk);
  f.add(prefix + ".wv", b.wv);
  f.add(prefix + ".wo", b.wo);
  f.add(prefix + ".ln2.gamma", b.ln2.gamma);
  f.add(prefix + ".ln2.beta", b.ln2.beta);
  f.add(prefix + ".w1", b.w1);
  f.add(prefix + ".b1", b.b1);
  f.add(prefix + ".w2", b.w2);
  f.add(prefix + ".b2", b.b2);
}

Block read_block(const io::TensorFile& f, const std::string& prefix) {
  Block b;
  b.ln1 = {io::to_vector(f.at(prefix + ".ln1.gamma")), io::to_vector(f.at(prefix + ".ln1.beta"))};
  b.wq = io::to_matrix(f.at(prefix + ".wq"));
  b.wk = io::to_matrix(f.at(prefix + ".wk"));
  b.wv = io::to_matrix(f.at(prefix + ".wv"));
  b.wo = io::to_matrix(f.at(prefix + ".wo"));
  b.ln2 = {io::to_vector(f.at(prefix + ".ln2.gamma")), io::to_vector(f.at(prefix + ".ln2.beta"))};
  b.w1 = io::to_matrix(f.at(prefix + ".w1"));
  b.b1 = io::to_vector(f.at(prefix + ".b1"));
  b.w2 = io::to_matrix(f.at(prefix + ".w2"));
  b.b2 = io::to_vector(f.at(prefix + ".b2"));
  return b;
}

void check_block(const Block& b, std::size_t d, const std::string& name) {
  const auto di = static_cast<Eigen::Index>(d);
  require_shape(b.wq.rows() == di && b.wq.cols() == di && b.wk.rows() == di && b.wk.cols() == di &&
                    b.wv.rows() == di && b.wv.cols() == di && b.wo.rows() == di && b.wo.cols() == di,
                name + ": attention weights must be [d, d]");
  require_shape(b.w1.rows() == di && b.w2.cols() == di && b.w1.cols() == b.w2.rows() &&
                    b.b1.size() == b.w1.cols() && b.b2.size() == di,
                name + ": MLP shape mismatch");
  require_shape(b.ln1.gamma.size() == di && b.ln1.beta.size() == di && b.ln2.gamma.size() == di &&
                    b.ln2.beta.size() == di,
                name + ": norm shape mismatch");
  require_shape(b.wq.allFinite() && b.wk.allFinite() && b.wv.allFinite() && b.wo.allFinite() &&
                    b.w1.allFinite() && b.w2.allFinite() && b.b1.allFinite() && b.b2.allFinite(),
                name + ": non-finite weight");
}

}  // namespace

ToyVlm ToyVlm::random(const Config& config, std::uint64_t seed, std::vector<std::string> vocab) {
  config.validate();
  std::mt19937_64 rng(seed);
  ToyVlm m;
  m.config = config;
  if (vocab.empty()) {
    vocab.push_back("<eos>");
    for (std::size_t i = 1; i < config.vocab_size; ++i) vocab.push_back("t" + std::to_string(i));
  }
  m.vocab = std::move(vocab);
  const std::size_t dm = config.d_model, dl = config.d_lm;
  m.patch_embed = random_matrix(rng, config.patch_dim, dm, 1.0f / std::sqrt(static_cast<float>(config.patch_dim)));
  for (std::size_t i = 0; i < config.vision_layers; ++i) m.vision.push_back(random_block(rng, dm, dm * config.mlp_ratio));
  m.projector = random_matrix(rng, dm, dl, 1.0f / std::sqrt(static_cast<float>(dm)));
  m.token_embed = random_matrix(rng, config.vocab_size, dl, 1.0f);
  for (std::size_t i = 0; i < config.text_layers; ++i) m.language.push_back(random_block(rng, dl, dl * config.mlp_ratio));
  m.final_norm = unit_norm(dl);
  m.head = random_matrix(rng, dl, config.vocab_size, 1.0f / std::sqrt(static_cast<float>(dl)));
  m.check_invariants();
  return m;
}

TokenId ToyVlm::token_id(std::string_view word) const {
  const auto it = std::find(vocab.begin(), vocab.end(), word);
  if (it == vocab.end()) throw std::invalid_argument("unknown token: " + std::string(word));
  return static_cast<TokenId>(it - vocab.begin());
}

std::vector<TokenId> ToyVlm::tokenize(std::string_view prompt) const {
  std::istringstream in{std::string(prompt)};
  std::vector<TokenId> ids;
  std::string word;
  while (in >> word) ids.push_back(token_id(word));
  return ids;
}

std::string ToyVlm::detokenize(const std::vector<TokenId>& ids) const {
  std::string out;
  for (const TokenId id : ids) {
    if (!out.empty()) out += ' ';
    out += vocab.at(static_cast<std::size_t>(id));
  }
  return out;
}

void ToyVlm::check_invariants() const {
  const Config& c = config;
  c.validate();
  require_shape(vocab.size() == c.vocab_size, "vocab list length != vocab_size");
  require_shape(patch_embed.rows() == static_cast<Eigen::Index>(c.patch_dim) &&
                    patch_embed.cols() == static_cast<Eigen::Index>(c.d_model),
                "patch_embed must be [patch_dim, d_model]");
  require_shape(vision.size() == c.vision_layers && language.size() == c.text_layers, "layer count mismatch");
  for (std::size_t i = 0; i < vision.size(); ++i) check_block(vision[i], c.d_model, "vision." + std::to_string(i));
  for (std::size_t i = 0; i < language.size(); ++i) check_block(language[i], c.d_lm, "language." + std::to_string(i));
  require_shape(projector.rows() == static_cast<Eigen::Index>(c.d_model) &&
                    projector.cols() == static_cast<Eigen::Index>(c.d_lm),
                "projector must be [d_model, d_lm]");
  require_shape(token_embed.rows() == static_cast<Eigen::Index>(c.vocab_size) &&
                    token_embed.cols() == static_cast<Eigen::Index>(c.d_lm),
                "token_embed must be [vocab, d_lm]");
  require_shape(head.rows() == static_cast<Eigen::Index>(c.d_lm) && head.cols() == static_cast<Eigen::Index>(c.vocab_size),
                "head must be [d_lm, vocab]");
  require_shape(patch_embed.allFinite() && projector.allFinite() && token_embed.allFinite() && head.allFinite(),
                "non-finite weight");
}

io::TensorFile ToyVlm::to_file() const {
  check_invariants();
  io::TensorFile f;
  f.add("patch_embed", patch_embed);
  for (std::size_t i = 0; i < vision.size(); ++i) write_block(f, "vision." + std::to_string(i), vision[i]);
  f.add("projector", projector);
  f.add("token_embed", token_embed);
  for (std::size_t i = 0; i < language.size(); ++i) write_block(f, "language." + std::to_string(i), language[i]);
  f.add("final_norm.gamma", final_norm.gamma);
  f.add("final_norm.beta", final_norm.beta);
  f.add("head", head);
  f.manifest = {{"kind", "toy_vlm"}, {"config", config.to_json()}, {"vocab", vocab}};
  return f;
}

ToyVlm ToyVlm::from_file(const io::TensorFile& f) {
  if (f.kind() != "toy_vlm") throw io::FormatError("not a toy_vlm checkpoint (kind=" + f.kind() + ")");
  ToyVlm m;
  m.config = Config::from_json(f.manifest.at("config"));
  m.vocab = f.manifest.at("vocab").get<std::vector<std::string>>();
  m.patch_embed = io::to_matrix(f.at("patch_embed"));
  for (std::size_t i = 0; i < m.config.vision_layers; ++i) m.vision.push_back(read_block(f, "vision." + std::to_string(i)));
  m.projector = io::to_matrix(f.at("projector"));
  m.token_embed = io::to_matrix(f.at("token_embed"));
  for (std::size_t i = 0; i < m.config.text_layers; ++i) m.language.push_back(read_block(f, "language." + std::to_string(i)));
  m.final_norm = {io::to_vector(f.at("final_norm.gamma")), io::to_vector(f.at("final_norm.beta"))};
  m.head = io::to_matrix(f.at("head"));
  m.check_invariants();
  return m;
}

const Matrix& InferenceRecord::layer_output(int layer) const {
  if (layer == injected_layer && injected) return *injected;
  require_shape(layer >= 0 && static_cast<std::size_t>(layer) < vision_layers.size(), "vision layer out of range");
  return vision_layers[static_cast<std::size_t>(layer)];
}

std::string InferenceRecord::output_text(const ToyVlm& model) const { return model.detokenize(output); }

ActivationTrace InferenceRecord::to_trace(const ToyVlm& model, const Matrix& image) const {
  ActivationTrace t;
  t.n_images = 1;
  t.grid = model.config.grid;
  for (std::size_t l = 0; l < vision_layers.size(); ++l) {
    t.layers.push_back({static_cast<int>(l), layer_output(static_cast<int>(l))});
  }
  t.patches = image;
  std::size_t positions = 0;
  for (const auto& r : rows) positions = std::max(positions, r.attn.n_positions);
  for (const auto& r : rows) {
    t.attn.push_back(r.attn.padded(positions));
    t.token_ids.push_back(r.token);
    t.tokens.push_back(r.label);
  }
  t.meta = {{"prompt_length", prompt.size()},
            {"n_image_positions", n_image_positions},
            {"output", output},
            {"injected_layer", injected_layer}};
  return t;
}

Matrix encode_image(const ToyVlm& model, const Matrix& image, const std::optional<VisionHook>& hook,
                    std::vector<Matrix>* layers, std::optional<Matrix>* injected) {
  const Config& c = model.config;
  require_shape(image.rows() == static_cast<Eigen::Index>(c.n_patches()), "image has " + std::to_string(image.rows()) +
                                                                              " patches, model expects " +
                                                                              std::to_string(c.n_patches()));
  require_shape(image.cols() == static_cast<Eigen::Index>(c.patch_dim), "image patch_dim mismatch");
  if (hook) {
    require_shape(hook->layer >= 0 && static_cast<std::size_t>(hook->layer) < c.vision_layers,
                  "hook layer " + std::to_string(hook->layer) + " outside vision tower");
  }
  Matrix x = image * model.patch_embed;
  if (layers) layers->clear();
  for (std::size_t l = 0; l < model.vision.size(); ++l) {
    x = run_block(model.vision[l], x, c, false, nullptr);
    if (layers) layers->push_back(x);
    if (hook && static_cast<std::size_t>(hook->layer) == l) {
      Matrix replaced = hook->replace(x);
      require_shape(replaced.rows() == x.rows() && replaced.cols() == x.cols(), "hook returned wrong shape");
      x = std::move(replaced);
      if (injected) *injected = x;
    }
  }
  return x;
}

InferenceRecord generate(const ToyVlm& model, const Matrix& image, const std::vector<TokenId>& prompt,
                         std::size_t max_new, const std::optional<VisionHook>& hook) {
  const Config& c = model.config;
  if (max_new == 0) throw std::invalid_argument("generate: max_new must be >= 1");
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be nonempty");
  for (const TokenId t : prompt) {
    require_shape(t >= 0 && static_cast<std::size_t>(t) < c.vocab_size, "prompt token outside vocab");
  }
  const std::size_t n_img = c.n_patches();
  if (n_img + prompt.size() + max_new - 1 > c.max_positions) {
    throw std::length_error("generation budget exceeded: " + std::to_string(n_img + prompt.size() + max_new - 1) +
                            " positions > max " + std::to_string(c.max_positions));
  }

  InferenceRecord rec;
  rec.prompt = prompt;
  rec.n_image_positions = n_img;
  if (hook) rec.injected_layer = hook->layer;
  const Matrix z = encode_image(model, image, hook, &rec.vision_layers, &rec.injected);
  rec.image_tokens = z * model.projector;

  std::vector<TokenId> text = prompt;
  for (std::size_t step = 0; step < max_new; ++step) {
    const std::size_t total = n_img + text.size();
    Matrix x(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(c.d_lm));
    x.topRows(static_cast<Eigen::Index>(n_img)) = rec.image_tokens;
    for (std::size_t t = 0; t < text.size(); ++t) {
      x.row(static_cast<Eigen::Index>(n_img + t)) = model.token_embed.row(text[t]);
    }

    // Rows to record: every prompt position on the first pass, then the
    // position that produces each generated token.
    std::vector<std::size_t> record_positions;
    if (step == 0) {
      for (std::size_t t = 0; t < prompt.size(); ++t) record_positions.push_back(n_img + t);
    }
    record_positions.push_back(total - 1);
    std::vector<AttentionStack> stacks(record_positions.size(), AttentionStack(c.text_layers, c.n_heads, total));

    std::vector<Matrix> probs;
    for (std::size_t l = 0; l < model.language.size(); ++l) {
      x = run_block(model.language[l], x, c, true, &probs);
      for (std::size_t r = 0; r < record_positions.size(); ++r) {
        for (std::size_t h = 0; h < c.n_heads; ++h) {
          const auto row = probs[h].row(static_cast<Eigen::Index>(record_positions[r]));
          for (std::size_t p = 0; p < total; ++p) stacks[r].at(l, h, p) = row[static_cast<Eigen::Index>(p)];
        }
      }
    }
    Matrix last = x.bottomRows(1);
    if (c.use_norm) last = layer_norm(last, model.final_norm, c.norm_eps);
    const RowVector logits = last * model.head;
    rec.logits.emplace_back(logits.data(), logits.data() + logits.size());

    TokenId best = 0;
    for (Eigen::Index v = 1; v < logits.size(); ++v) {
      if (logits[v] > logits[best]) best = static_cast<TokenId>(v);
    }

    if (step == 0) {
      for (std::size_t t = 0; t < prompt.size(); ++t) {
        rec.rows.push_back({prompt[t], model.vocab[static_cast<std::size_t>(prompt[t])], false,
                            record_positions[t], std::move(stacks[t])});
      }
    }
    if (best == c.end_token) {
      rec.hit_end = true;
      break;
    }
    rec.rows.push_back({best, model.vocab[static_cast<std::size_t>(best)], true, total - 1, std::move(stacks.back())});
    rec.output.push_back(best);
    text.push_back(best);
  }
  return rec;
}

Vector image_embedding(const ToyVlm& model, const Matrix& image) {
  const Matrix z = encode_image(model, image);
  return (z * model.projector).colwise().mean().transpose();
}

std::vector<double> classify(const ToyVlm& model, const Matrix& image, const Matrix& class_embeddings) {
  require_shape(class_embeddings.rows() > 0, "classify: no classes");
  require_shape(class_embeddings.cols() == static_cast<Eigen::Index>(model.config.d_lm),
                "classify: class embedding dim != d_lm");
  const Eigen::VectorXd img = image_embedding(model, image).cast<double>();
  const double img_norm = img.norm();
  std::vector<double> sims(static_cast<std::size_t>(class_embeddings.rows()));
  for (Eigen::Index k = 0; k < class_embeddings.rows(); ++k) {
    const Eigen::VectorXd e = class_embeddings.row(k).transpose().cast<double>();
    const double en = e.norm();
    if (en == 0.0) throw std::invalid_argument("classify: zero-norm class embedding " + std::to_string(k));
    sims[static_cast<std::size_t>(k)] = img_norm > 0.0 ? img.dot(e) / (img_norm * en) : 0.0;
  }
  const double mx = *std::max_element(sims.begin(), sims.end());
  double total = 0.0;
  for (auto& s : sims) total += (s = std::exp(s - mx));
  for (auto& s : sims) s /= total;
  return sims;
}

}  // namespace vspad::vlm
