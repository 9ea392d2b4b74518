#include "vspad/flip_fixture.hpp"

#include <random>

namespace vspad::vlm {

namespace {

constexpr Eigen::Index kGapChannel = 16;
constexpr Eigen::Index kFloorChannel = 17;
constexpr Eigen::Index kEndChannel = 18;
constexpr Eigen::Index kFreeChannel = 19;

constexpr float kCueValue = 1.2f;
constexpr float kRivalValue = 1.0f;
constexpr float kCounterValue = 1.5f;

std::vector<std::string> fixture_vocab(std::size_t size) {
  std::vector<std::string> v = {"<eos>", "B", "A", "what", "is", "in", "the", "image", "?", "describe", "answer"};
  for (std::size_t i = v.size(); i < size; ++i) v.push_back("w" + std::to_string(i));
  return v;
}

void fill_noise(Matrix& img, std::mt19937_64& rng, float sigma, Eigen::Index first_col) {
  std::normal_distribution<float> normal(0.0f, sigma);
  for (Eigen::Index r = 0; r < img.rows(); ++r) {
    for (Eigen::Index c = first_col; c < img.cols(); ++c) img(r, c) = normal(rng);
  }
}

}  // namespace

Matrix FlipFixture::image_without_cue_direction() const { return image_with_scaled_direction(0.0f); }

Matrix FlipFixture::image_with_scaled_direction(float c) const {
  const Eigen::Index pd = image_a.cols();
  const Vector u = direction.head(pd);
  Matrix out = image_a;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const float proj = out.row(r).dot(u.transpose());
    out.row(r) += (c - 1.0f) * proj * u.transpose();
  }
  return out;
}

nlohmann::json FlipFixture::describe() const {
  return {{"token_a", token_a},
          {"token_b", token_b},
          {"prompt", model.detokenize(prompt)},
          {"target_layer", target_layer},
          {"cue_latents", cue_latents},
          {"rival_latents", rival_latents},
          {"counter_latents", counter_latents},
          {"cue_patches", cue_patches},
          {"rival_patches", rival_patches},
          {"counter_patches", counter_patches},
          {"direction", std::vector<float>(direction.data(), direction.data() + direction.size())}};
}

FlipFixture make_flip_fixture(std::uint64_t seed) {
  Config cfg;
  cfg.use_norm = false;
  FlipFixture fx;
  fx.model = ToyVlm::random(cfg, seed, fixture_vocab(cfg.vocab_size));
  ToyVlm& m = fx.model;
  const auto dm = static_cast<Eigen::Index>(cfg.d_model);
  const auto dl = static_cast<Eigen::Index>(cfg.d_lm);
  const auto pd = static_cast<Eigen::Index>(cfg.patch_dim);
  const auto np = static_cast<Eigen::Index>(cfg.n_patches());
  const auto head_dim = dl / static_cast<Eigen::Index>(cfg.n_heads);
  std::mt19937_64 rng(seed ^ 0xf11bf11bULL);
  std::normal_distribution<float> small(0.0f, 0.1f);

  fx.token_b = m.token_id("B");
  fx.token_a = m.token_id("A");
  fx.prompt = m.tokenize("what is in the image ?");

  // z = [patch, 0]; every vision block is an exact identity.
  m.patch_embed = Matrix::Zero(pd, dm);
  m.patch_embed.leftCols(pd).setIdentity();
  for (auto& b : m.vision) {
    b.wo.setZero();
    b.w2.setZero();
    b.b2.setZero();
  }
  m.projector = Matrix::Identity(dm, dl);

  fx.direction = Vector::Zero(dm);
  fx.direction[0] = 0.5f;
  fx.direction[3] = 0.5f;
  fx.direction[1] = 0.5f;
  fx.direction[2] = -0.5f;
  fx.cue_latents = {0, 3};
  fx.rival_latents = {1};
  fx.counter_latents = {2};
  fx.target_layer = static_cast<int>(cfg.vision_layers) - 1;

  // Head 0 of the first language block: zero queries/keys (uniform
  // attention), value = gain * u . x, written to the gap channel. The gain
  // undoes the dilution by the prompt positions on the first step.
  const float gain = static_cast<float>(np + static_cast<Eigen::Index>(fx.prompt.size())) / static_cast<float>(np);
  for (std::size_t l = 0; l < m.language.size(); ++l) {
    Block& b = m.language[l];
    b.wo.setZero();
    b.w2.setZero();
    b.b2.setZero();
    if (l == 0) {
      b.wq.leftCols(head_dim).setZero();
      b.wk.leftCols(head_dim).setZero();
      b.wv.setZero();
      b.wv.col(0).head(dm) = gain * fx.direction;
      b.wo(0, kGapChannel) = 1.0f;
    }
  }

  m.token_embed.setZero();
  for (Eigen::Index t = 0; t < m.token_embed.rows(); ++t) {
    for (Eigen::Index c = kFreeChannel; c < dl; ++c) m.token_embed(t, c) = small(rng);
  }
  for (const TokenId t : fx.prompt) m.token_embed(t, kFloorChannel) = 10.0f;
  m.token_embed(fx.token_a, kEndChannel) = 100.0f;
  m.token_embed(fx.token_b, kEndChannel) = 100.0f;

  m.head.setZero();
  for (Eigen::Index v = 0; v < m.head.cols(); ++v) {
    if (v == fx.token_a || v == fx.token_b || v == cfg.end_token) continue;
    for (Eigen::Index c = kFreeChannel; c < dl; ++c) m.head(c, v) = small(rng);
  }
  m.head(kGapChannel, fx.token_a) = 0.5f;
  m.head(kFloorChannel, fx.token_a) = 1.0f;
  m.head(kGapChannel, fx.token_b) = -0.5f;
  m.head(kFloorChannel, fx.token_b) = 1.0f;
  m.head(kEndChannel, cfg.end_token) = 1.0f;

  fx.rival_patches = {0, 1, 2, 3};
  fx.cue_patches = {5, 6, 9, 10};
  fx.counter_patches = {12, 13, 14, 15};
  fx.image_a = Matrix::Zero(np, pd);
  fill_noise(fx.image_a, rng, 0.2f, 4);
  for (const auto p : fx.cue_patches) {
    fx.image_a(static_cast<Eigen::Index>(p), 0) = kCueValue;
    fx.image_a(static_cast<Eigen::Index>(p), 3) = kCueValue;
  }
  for (const auto p : fx.rival_patches) fx.image_a(static_cast<Eigen::Index>(p), 1) = kRivalValue;
  for (const auto p : fx.counter_patches) fx.image_a(static_cast<Eigen::Index>(p), 2) = kCounterValue;

  fx.sae = sae::SaeModel::identity(cfg.d_model);
  m.check_invariants();
  return fx;
}

FixtureDataset make_fixture_dataset(const FlipFixture& fx, std::size_t per_label, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> amp(0.5f, 1.5f);
  const auto np = fx.image_a.rows();
  const auto pd = fx.image_a.cols();
  FixtureDataset ds;
  const std::vector<std::string> labels = {"cue", "rival", "counter", "mixed"};
  for (const auto& label : labels) {
    for (std::size_t i = 0; i < per_label; ++i) {
      Matrix img = Matrix::Zero(np, pd);
      fill_noise(img, rng, 0.2f, 4);
      const float a = amp(rng);
      if (label == "cue" || label == "mixed") {
        for (const auto p : fx.cue_patches) {
          img(static_cast<Eigen::Index>(p), 0) = a * kCueValue;
          img(static_cast<Eigen::Index>(p), 3) = a * kCueValue;
        }
      }
      if (label == "rival" || label == "mixed") {
        for (const auto p : fx.rival_patches) img(static_cast<Eigen::Index>(p), 1) = a * kRivalValue;
      }
      if (label == "counter" || label == "mixed") {
        for (const auto p : fx.counter_patches) img(static_cast<Eigen::Index>(p), 2) = a * kCounterValue;
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(label);
    }
  }
  return ds;
}

}  // namespace vspad::vlm
