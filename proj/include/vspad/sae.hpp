#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vspad/matrix.hpp"
#include "vspad/tensor_file.hpp"

namespace vspad::sae {

/// literal:  h = ReLU(W_enc^T z),                 z_hat = W_dec^T h
/// standard: h = ReLU(W_enc^T (z - b_dec) + b_enc), z_hat = W_dec^T h + b_dec,
///           decoder rows kept at unit L2 norm during training.
enum class BiasMode { literal, standard };

std::string to_string(BiasMode m);
BiasMode bias_mode_from_string(const std::string& s);

struct TrainConfig {
  double l1_coefficient = 8e-5;
  double learning_rate = 1e-4;
  std::uint64_t steps = 1000;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  std::uint64_t log_every = 100;
  // Adam
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct SaeModel {
  Matrix w_enc;  // [d_model, d_sae]
  Vector b_enc;  // [d_sae]
  Matrix w_dec;  // [d_sae, d_model]
  Vector b_dec;  // [d_model]
  BiasMode bias_mode = BiasMode::standard;
  nlohmann::json train_config = nlohmann::json::object();
  std::uint64_t seed = 0;

  std::size_t d_model() const { return static_cast<std::size_t>(w_enc.rows()); }
  std::size_t d_sae() const { return static_cast<std::size_t>(w_enc.cols()); }
  double expansion_factor() const { return static_cast<double>(d_sae()) / static_cast<double>(d_model()); }

  /// Seeded init: W_dec ~ N(0, 1/d_model) (rows unit-normalized in standard
  /// mode), W_enc = W_dec^T, zero biases.
  static SaeModel initialize(std::size_t d_model, std::size_t expansion_factor, BiasMode mode,
                             std::uint64_t seed);

  /// W_enc = [I | -I], W_dec = [I; -I], zero biases, literal mode.
  /// decode(encode(z)) == z exactly since ReLU(z) - ReLU(-z) = z.
  static SaeModel identity(std::size_t d_model);

  void check_invariants() const;

  io::TensorFile to_file() const;
  static SaeModel from_file(const io::TensorFile& f);
};

/// z: [n, d_model] -> h: [n, d_sae]
Matrix encode(const SaeModel& model, const Matrix& z);
/// h: [n, d_sae] -> z_hat: [n, d_model]
Matrix decode(const SaeModel& model, const Matrix& h);
Matrix reconstruct(const SaeModel& model, const Matrix& z);

struct Loss {
  double total = 0.0;
  double mse = 0.0;  // mean over all elements
  double l1 = 0.0;   // mean over samples of sum |h|
};

Loss sae_loss(const Matrix& z, const Matrix& z_hat, const Matrix& h, double l1_coefficient);

/// Mean number of nonzero latents per sample.
double mean_l0(const Matrix& h);

struct TrainReport {
  struct Point {
    std::uint64_t step;
    Loss loss;
  };
  std::vector<Point> curve;
  double final_mean_l0 = 0.0;
  double final_mse = 0.0;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::uint64_t step, std::uint64_t batch);
  std::uint64_t step;
  std::uint64_t batch;
};

struct TrainResult {
  SaeModel model;
  TrainReport report;
};

/// Trains on rows of `data` ([n_samples, d_model]) with Adam and a linear
/// learning-rate decay to zero. Batches are drawn from a seeded
/// per-epoch shuffle, so the result is bit-deterministic for fixed inputs.
TrainResult train(const Matrix& data, const TrainConfig& config, std::size_t expansion_factor,
                  BiasMode mode = BiasMode::standard);

/// Same, starting from a given model.
TrainResult train(const Matrix& data, const TrainConfig& config, SaeModel init);

}  // namespace vspad::sae
