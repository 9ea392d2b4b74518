#include <gtest/gtest.h>

#include "oracles.hpp"
#include "vspad/flip_fixture.hpp"
#include "vspad/toy_vlm.hpp"

using namespace vspad;
using namespace vspad::vlm;

namespace {

Config small_config() {
  Config c;
  c.patch_dim = 6;
  c.d_model = 8;
  c.d_lm = 12;
  c.n_heads = 2;
  c.vocab_size = 10;
  c.grid = {2, 3};
  c.max_positions = 20;
  return c;
}

double first_gap(const InferenceRecord& rec, const FlipFixture& fx) {
  return rec.logits.at(0)[static_cast<std::size_t>(fx.token_a)] - rec.logits.at(0)[static_cast<std::size_t>(fx.token_b)];
}

double projected_mean(const Matrix& z, const Vector& u) {
  double s = 0.0;
  for (Eigen::Index p = 0; p < z.rows(); ++p) {
    for (Eigen::Index j = 0; j < z.cols(); ++j) s += static_cast<double>(z(p, j)) * u[j];
  }
  return s / static_cast<double>(z.rows());
}

}  // namespace

TEST(ToyVlm, GenerationIsDeterministic) {
  const auto m = ToyVlm::random(small_config(), 3);
  const Matrix img = oracle::random_matrix(6, 6, 4);
  const auto a = generate(m, img, {1, 2, 3}, 5);
  const auto b = generate(m, img, {1, 2, 3}, 5);
  EXPECT_EQ(a.output, b.output);
  EXPECT_EQ(a.logits, b.logits);
  EXPECT_LE(a.output.size(), 5u);
  const auto m2 = ToyVlm::random(small_config(), 3);
  EXPECT_EQ(m2.head, m.head);
}

TEST(ToyVlm, GreedyPicksArgmaxOfRecordedLogits) {
  const auto m = ToyVlm::random(small_config(), 5);
  const auto rec = generate(m, oracle::random_matrix(6, 6, 6), {4, 5}, 6);
  for (std::size_t s = 0; s < rec.output.size(); ++s) {
    const auto& l = rec.logits[s];
    const auto best = static_cast<TokenId>(std::max_element(l.begin(), l.end()) - l.begin());
    EXPECT_EQ(rec.output[s], best);
  }
  if (rec.hit_end) {
    EXPECT_EQ(rec.logits.size(), rec.output.size() + 1);
  }
}

TEST(ToyVlm, IdentityHookLeavesOutputUnchanged) {
  const auto m = ToyVlm::random(small_config(), 7);
  const Matrix img = oracle::random_matrix(6, 6, 8);
  const auto plain = generate(m, img, {1, 2}, 4);
  for (int layer = 0; layer < 2; ++layer) {
    const auto hooked = generate(m, img, {1, 2}, 4, VisionHook{layer, [](const Matrix& z) { return z; }});
    EXPECT_EQ(hooked.output, plain.output);
    EXPECT_EQ(hooked.logits, plain.logits);
    EXPECT_EQ(hooked.injected_layer, layer);
    ASSERT_TRUE(hooked.injected.has_value());
    EXPECT_EQ(hooked.layer_output(layer), plain.layer_output(layer));
  }
}

TEST(ToyVlm, HookReplacementPropagates) {
  const auto m = ToyVlm::random(small_config(), 9);
  const Matrix img = oracle::random_matrix(6, 6, 10);
  const auto zeroed = generate(m, img, {1}, 3, VisionHook{0, [](const Matrix& z) { return Matrix::Zero(z.rows(), z.cols()).eval(); }});
  EXPECT_TRUE(zeroed.layer_output(0).isZero());
  EXPECT_FALSE(zeroed.vision_layers[0].isZero());
  EXPECT_THROW(generate(m, img, {1}, 3, VisionHook{5, [](const Matrix& z) { return z; }}), ShapeError);
  EXPECT_THROW(generate(m, img, {1}, 3, VisionHook{0, [](const Matrix&) { return Matrix(2, 2); }}), ShapeError);
}

TEST(ToyVlm, AttentionRowsAreDistributions) {
  const auto m = ToyVlm::random(small_config(), 11);
  const auto rec = generate(m, oracle::random_matrix(6, 6, 12), {1, 2, 3}, 4);
  ASSERT_GE(rec.rows.size(), 3u);
  for (std::size_t r = 0; r < rec.rows.size(); ++r) {
    const auto& row = rec.rows[r];
    EXPECT_EQ(row.generated, r >= 3);
    ASSERT_GT(row.attn.n_positions, row.position);
    for (std::size_t l = 0; l < row.attn.n_layers; ++l) {
      for (std::size_t h = 0; h < row.attn.n_heads; ++h) {
        double s = 0.0;
        for (std::size_t p = 0; p < row.attn.n_positions; ++p) {
          EXPECT_GE(row.attn.at(l, h, p), 0.0f);
          if (p > row.position) {
            EXPECT_EQ(row.attn.at(l, h, p), 0.0f);  // causal mask
          }
          s += row.attn.at(l, h, p);
        }
        EXPECT_NEAR(s, 1.0, 1e-5);
      }
    }
  }
  EXPECT_EQ(rec.n_image_positions, 6u);
}

TEST(ToyVlm, TraceExportValidates) {
  const auto m = ToyVlm::random(small_config(), 13);
  const Matrix img = oracle::random_matrix(6, 6, 14);
  const auto rec = generate(m, img, {1, 2}, 3);
  const auto t = rec.to_trace(m, img);
  EXPECT_NO_THROW(t.validate());
  EXPECT_EQ(t.tokens.size(), rec.rows.size());
  const auto back = ActivationTrace::from_file(io::parse(io::serialize(t.to_file())));
  EXPECT_EQ(back.layer(1).z, rec.layer_output(1));
}

TEST(ToyVlm, BudgetAndArgumentErrors) {
  const auto m = ToyVlm::random(small_config(), 15);
  const Matrix img = oracle::random_matrix(6, 6, 16);
  EXPECT_NO_THROW(generate(m, img, {1, 2, 3}, 12));  // 6 + 3 + 11 = 20 positions
  EXPECT_THROW(generate(m, img, {1, 2, 3}, 13), std::length_error);
  EXPECT_THROW(generate(m, img, {1}, 0), std::invalid_argument);
  EXPECT_THROW(generate(m, img, {}, 2), std::invalid_argument);
  EXPECT_THROW(generate(m, img, {99}, 2), ShapeError);
  EXPECT_THROW(generate(m, oracle::random_matrix(5, 6, 1), {1}, 2), ShapeError);
}

TEST(ToyVlm, CheckpointRoundTrip) {
  const auto m = ToyVlm::random(small_config(), 17);
  oracle::TempDir dir;
  io::save_tensor_file(m.to_file(), dir / "m.vspad");
  const auto back = ToyVlm::from_file(io::load_tensor_file(dir / "m.vspad"));
  EXPECT_EQ(back.vocab, m.vocab);
  EXPECT_EQ(back.head, m.head);
  EXPECT_EQ(back.language[1].w2, m.language[1].w2);
  const Matrix img = oracle::random_matrix(6, 6, 18);
  EXPECT_EQ(generate(back, img, {3}, 4).logits, generate(m, img, {3}, 4).logits);
  io::TensorFile wrong;
  wrong.manifest = {{"kind", "sae"}};
  EXPECT_THROW(ToyVlm::from_file(wrong), io::FormatError);
}

TEST(ToyVlm, Tokenizer) {
  const auto m = ToyVlm::random(small_config(), 19);
  EXPECT_EQ(m.tokenize("t1  t3 t2"), (std::vector<TokenId>{1, 3, 2}));
  EXPECT_EQ(m.detokenize({1, 3}), "t1 t3");
  EXPECT_THROW(m.tokenize("t1 zebra"), std::invalid_argument);
}

TEST(ToyVlm, ClassifyMatchesCosineSoftmax) {
  const auto m = ToyVlm::random(small_config(), 21);
  const Matrix img = oracle::random_matrix(6, 6, 22);
  const Matrix classes = oracle::random_matrix(4, 12, 23);
  const auto probs = classify(m, img, classes);

  const Matrix z = encode_image(m, img);
  const auto proj = oracle::matmul(z, m.projector);
  std::vector<double> pooled(12, 0.0);
  for (const auto& row : proj) {
    for (std::size_t j = 0; j < 12; ++j) pooled[j] += row[j] / 6.0;
  }
  std::vector<double> sims;
  for (Eigen::Index k = 0; k < 4; ++k) {
    double dot = 0, nn = 0, ne = 0;
    for (std::size_t j = 0; j < 12; ++j) {
      const double e = classes(k, static_cast<Eigen::Index>(j));
      dot += pooled[j] * e;
      nn += pooled[j] * pooled[j];
      ne += e * e;
    }
    sims.push_back(dot / std::sqrt(nn * ne));
  }
  const auto ref = oracle::softmax(sims);
  ASSERT_EQ(probs.size(), 4u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(probs[k], ref[k], 1e-5);

  EXPECT_DOUBLE_EQ(classify(m, img, classes.topRows(1))[0], 1.0);
  Matrix zero_row = classes;
  zero_row.row(2).setZero();
  EXPECT_THROW(classify(m, img, zero_row), std::invalid_argument);
  EXPECT_THROW(classify(m, img, Matrix(3, 5)), ShapeError);
}

TEST(FlipFixture, FirstStepGapIsProjectedPatchMean) {
  const auto fx = make_flip_fixture();
  EXPECT_NEAR(fx.direction.norm(), 1.0, 1e-6);
  for (float c : {0.0f, 0.5f, 1.0f, 2.0f}) {
    const Matrix img = fx.image_with_scaled_direction(c);
    const auto rec = generate(fx.model, img, fx.prompt, 4);
    EXPECT_NEAR(first_gap(rec, fx), projected_mean(rec.layer_output(fx.target_layer), fx.direction), 1e-4);
  }
}

TEST(FlipFixture, GapIsMonotoneInDirectionScale) {
  const auto fx = make_flip_fixture();
  double prev = -INFINITY;
  for (float c = -1.0f; c <= 3.0f; c += 0.25f) {
    const auto rec = generate(fx.model, fx.image_with_scaled_direction(c), fx.prompt, 1);
    const double gap = first_gap(rec, fx);
    EXPECT_GT(gap, prev);
    prev = gap;
  }
}

TEST(FlipFixture, BaselineAndDegenerateImages) {
  const auto fx = make_flip_fixture();
  const auto base = generate(fx.model, fx.image_a, fx.prompt, 8);
  ASSERT_FALSE(base.output.empty());
  EXPECT_EQ(base.output[0], fx.token_a);
  EXPECT_GT(first_gap(base, fx), 0.0);

  const auto none = generate(fx.model, fx.image_without_cue_direction(), fx.prompt, 8);
  EXPECT_NEAR(first_gap(none, fx), 0.0, 1e-5);
  const Matrix zero = Matrix::Zero(fx.image_a.rows(), fx.image_a.cols());
  const auto z = generate(fx.model, zero, fx.prompt, 8);
  EXPECT_EQ(z.output.at(0), fx.token_b);
  EXPECT_LT(fx.token_b, fx.token_a);
}

TEST(FlipFixture, IdentitySaeIsExactOnFixtureLayer) {
  const auto fx = make_flip_fixture();
  const auto rec = generate(fx.model, fx.image_a, fx.prompt, 1);
  const Matrix& z = rec.layer_output(fx.target_layer);
  const Matrix back = sae::decode(fx.sae, sae::encode(fx.sae, z));
  EXPECT_LE((back - z).cwiseAbs().maxCoeff(), 1e-6f);
}

TEST(FlipFixture, DatasetShape) {
  const auto fx = make_flip_fixture();
  const auto ds = make_fixture_dataset(fx, 3, 1);
  EXPECT_EQ(ds.images.size(), ds.labels.size());
  EXPECT_EQ(ds.images.size(), 12u);
  std::set<std::string> labels(ds.labels.begin(), ds.labels.end());
  EXPECT_EQ(labels.size(), 4u);
  for (const auto& img : ds.images) {
    EXPECT_EQ(img.rows(), fx.image_a.rows());
    EXPECT_EQ(img.cols(), fx.image_a.cols());
  }
  EXPECT_TRUE(fx.describe().contains("cue_latents"));
}
