#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vspad/activation_trace.hpp"
#include "vspad/matrix.hpp"
#include "vspad/tensor_file.hpp"

namespace vspad::vlm {

struct Config {
  std::size_t patch_dim = 16;
  std::size_t d_model = 32;
  std::size_t d_lm = 32;
  std::size_t vision_layers = 2;
  std::size_t text_layers = 2;
  std::size_t n_heads = 4;
  std::size_t vocab_size = 64;
  PatchGrid grid{4, 4};
  std::size_t mlp_ratio = 4;
  bool use_norm = true;
  float norm_eps = 1e-5f;
  std::size_t max_positions = 128;
  TokenId end_token = 0;

  std::size_t n_patches() const { return grid.size(); }
  void validate() const;
  nlohmann::json to_json() const;
  static Config from_json(const nlohmann::json& j);
};

struct LayerNorm {
  Vector gamma;
  Vector beta;
};

/// Pre-norm block: x += Attn(LN1(x)); x += W2 GELU(W1 LN2(x) + b1) + b2.
struct Block {
  LayerNorm ln1, ln2;
  Matrix wq, wk, wv, wo;  // [d, d]
  Matrix w1;              // [d, mlp]
  Vector b1;
  Matrix w2;              // [mlp, d]
  Vector b2;
};

struct ToyVlm {
  Config config;
  std::vector<std::string> vocab;
  Matrix patch_embed;  // [patch_dim, d_model]
  std::vector<Block> vision;
  Matrix projector;    // [d_model, d_lm]
  Matrix token_embed;  // [vocab, d_lm]
  std::vector<Block> language;
  LayerNorm final_norm;
  Matrix head;         // [d_lm, vocab]

  /// Seeded random weights; vocabulary "<eos>", "t1", ... unless given.
  static ToyVlm random(const Config& config, std::uint64_t seed, std::vector<std::string> vocab = {});

  TokenId token_id(std::string_view word) const;
  /// Whitespace tokenizer; unknown words are an error.
  std::vector<TokenId> tokenize(std::string_view prompt) const;
  std::string detokenize(const std::vector<TokenId>& ids) const;

  void check_invariants() const;
  io::TensorFile to_file() const;
  static ToyVlm from_file(const io::TensorFile& f);
};

/// Replaces the output of vision block `layer` before later blocks and
/// the projector see it.
struct VisionHook {
  int layer = -1;
  std::function<Matrix(const Matrix& z)> replace;
};

struct TextRow {
  TokenId token = 0;
  std::string label;
  bool generated = false;
  std::size_t position = 0;  // query position whose attention this is
  AttentionStack attn;       // [text_layers, heads, positions at that step]
};

struct InferenceRecord {
  std::vector<TokenId> prompt;
  std::vector<TokenId> output;  // end token excluded
  bool hit_end = false;
  std::vector<Matrix> vision_layers;  // per-block outputs as computed
  int injected_layer = -1;
  std::optional<Matrix> injected;     // replacement returned by the hook
  Matrix image_tokens;                // projected, [n_patches, d_lm]
  std::vector<TextRow> rows;          // prompt tokens, then generated tokens
  std::vector<std::vector<float>> logits;  // per generation step
  std::size_t n_image_positions = 0;

  /// Vision activations seen by the language side at `layer`
  /// (the injected tensor when that layer was hooked).
  const Matrix& layer_output(int layer) const;
  std::string output_text(const ToyVlm& model) const;
  /// Single-image trace with attention padded to a common length.
  ActivationTrace to_trace(const ToyVlm& model, const Matrix& image) const;
};

/// Runs the vision tower; `layers` receives every block output.
Matrix encode_image(const ToyVlm& model, const Matrix& image, const std::optional<VisionHook>& hook = std::nullopt,
                    std::vector<Matrix>* layers = nullptr, std::optional<Matrix>* injected = nullptr);

/// Greedy decoding (argmax, ties to the lower token id) until the end
/// token or max_new tokens.
InferenceRecord generate(const ToyVlm& model, const Matrix& image, const std::vector<TokenId>& prompt,
                         std::size_t max_new, const std::optional<VisionHook>& hook = std::nullopt);

/// Mean-pooled projected image tokens, [d_lm].
Vector image_embedding(const ToyVlm& model, const Matrix& image);

/// Softmax over cosine similarities between the pooled image embedding and
/// each row of class_embeddings [n_classes, d_lm].
std::vector<double> classify(const ToyVlm& model, const Matrix& image, const Matrix& class_embeddings);

}  // namespace vspad::vlm
