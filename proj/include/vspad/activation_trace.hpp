#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "vspad/matrix.hpp"
#include "vspad/tensor_file.hpp"

namespace vspad {

struct PatchGrid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t size() const { return rows * cols; }
};

/// Raw attention rows of one query position: [n_layers, n_heads, n_positions].
struct AttentionStack {
  std::size_t n_layers = 0;
  std::size_t n_heads = 0;
  std::size_t n_positions = 0;
  std::vector<float> weights;

  AttentionStack() = default;
  AttentionStack(std::size_t layers, std::size_t heads, std::size_t positions)
      : n_layers(layers), n_heads(heads), n_positions(positions),
        weights(layers * heads * positions, 0.0f) {}

  float& at(std::size_t l, std::size_t h, std::size_t p) {
    return weights[(l * n_heads + h) * n_positions + p];
  }
  float at(std::size_t l, std::size_t h, std::size_t p) const {
    return weights[(l * n_heads + h) * n_positions + p];
  }

  /// Returns a copy zero-padded along the position axis.
  AttentionStack padded(std::size_t positions) const;
};

/// Activations for one recorded layer: [n_images * n_patches, d_model],
/// images stacked row-block by row-block.
struct LayerActivations {
  int layer = 0;
  Matrix z;
};

struct ActivationTrace {
  std::size_t n_images = 0;
  PatchGrid grid;
  std::vector<LayerActivations> layers;
  std::optional<Matrix> patches;        // raw model inputs, [n_images * n_patches, patch_dim]
  std::vector<AttentionStack> attn;     // one per text token, equal n_positions
  std::vector<TokenId> token_ids;
  std::vector<std::string> tokens;
  std::vector<std::string> labels;      // per image; empty when unlabeled
  nlohmann::json meta = nlohmann::json::object();

  std::size_t n_patches() const { return grid.size(); }
  const LayerActivations& layer(int index) const;
  /// Patch activations of image i at the given recorded layer, [n_patches, d_model].
  Matrix image(int layer_index, std::size_t i) const;
  std::vector<std::string> distinct_labels() const;

  /// Throws ShapeError on any violated invariant; attention rows must
  /// be nonnegative and sum to 1 within tol.
  void validate(double tol = 1e-5) const;

  io::TensorFile to_file() const;
  static ActivationTrace from_file(const io::TensorFile& file);
};

}  // namespace vspad
