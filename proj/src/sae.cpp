#include "vspad/sae.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace vspad::sae {

std::string to_string(BiasMode m) { return m == BiasMode::literal ? "literal" : "standard"; }

BiasMode bias_mode_from_string(const std::string& s) {
  if (s == "literal") return BiasMode::literal;
  if (s == "standard") return BiasMode::standard;
  throw std::invalid_argument("unknown bias mode: " + s);
}

nlohmann::json TrainConfig::to_json() const {
  return {{"l1_coefficient", l1_coefficient}, {"learning_rate", learning_rate},
          {"lr_decay", "linear"},             {"steps", steps},
          {"batch_size", batch_size},         {"seed", seed},
          {"log_every", log_every},           {"beta1", beta1},
          {"beta2", beta2},                   {"epsilon", epsilon}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.l1_coefficient = j.value("l1_coefficient", c.l1_coefficient);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.steps = j.value("steps", c.steps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.log_every = j.value("log_every", c.log_every);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  return c;
}

namespace {

void normalize_rows(Matrix& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const float n = m.row(r).norm();
    if (n > 0.0f) m.row(r) /= n;
  }
}

}  // namespace

SaeModel SaeModel::initialize(std::size_t d_model, std::size_t expansion_factor, BiasMode mode,
                              std::uint64_t seed) {
  if (d_model == 0 || expansion_factor == 0) throw std::invalid_argument("SAE dimensions must be positive");
  const auto dm = static_cast<Eigen::Index>(d_model);
  const auto ds = static_cast<Eigen::Index>(d_model * expansion_factor);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f / std::sqrt(static_cast<float>(d_model)));

  SaeModel m;
  m.bias_mode = mode;
  m.seed = seed;
  m.w_dec.resize(ds, dm);
  for (Eigen::Index i = 0; i < m.w_dec.size(); ++i) m.w_dec.data()[i] = normal(rng);
  if (mode == BiasMode::standard) normalize_rows(m.w_dec);
  m.w_enc = m.w_dec.transpose();
  m.b_enc = Vector::Zero(ds);
  m.b_dec = Vector::Zero(dm);
  return m;
}

SaeModel SaeModel::identity(std::size_t d_model) {
  const auto d = static_cast<Eigen::Index>(d_model);
  SaeModel m;
  m.bias_mode = BiasMode::literal;
  m.w_enc = Matrix::Zero(d, 2 * d);
  m.w_enc.leftCols(d).setIdentity();
  m.w_enc.rightCols(d) = -Matrix::Identity(d, d);
  m.w_dec = m.w_enc.transpose();
  m.b_enc = Vector::Zero(2 * d);
  m.b_dec = Vector::Zero(d);
  return m;
}

void SaeModel::check_invariants() const {
  require_shape(w_enc.rows() > 0 && w_enc.cols() > 0, "empty SAE");
  require_shape(w_dec.rows() == w_enc.cols() && w_dec.cols() == w_enc.rows(), "W_dec shape != W_enc^T shape");
  require_shape(b_enc.size() == w_enc.cols(), "b_enc length != d_sae");
  require_shape(b_dec.size() == w_enc.rows(), "b_dec length != d_model");
  require_shape(w_enc.allFinite() && w_dec.allFinite() && b_enc.allFinite() && b_dec.allFinite(),
                "SAE weights not finite");
}

io::TensorFile SaeModel::to_file() const {
  check_invariants();
  io::TensorFile f;
  f.add("W_enc", w_enc);
  f.add("b_enc", b_enc);
  f.add("W_dec", w_dec);
  f.add("b_dec", b_dec);
  f.manifest = {{"kind", "sae"},
                {"d_model", d_model()},
                {"d_sae", d_sae()},
                {"bias_mode", to_string(bias_mode)},
                {"train_config", train_config},
                {"seed", seed}};
  return f;
}

SaeModel SaeModel::from_file(const io::TensorFile& f) {
  if (f.kind() != "sae") throw io::FormatError("not an SAE checkpoint (kind=" + f.kind() + ")");
  SaeModel m;
  m.w_enc = io::to_matrix(f.at("W_enc"));
  m.b_enc = io::to_vector(f.at("b_enc"));
  m.w_dec = io::to_matrix(f.at("W_dec"));
  m.b_dec = io::to_vector(f.at("b_dec"));
  m.bias_mode = bias_mode_from_string(f.manifest.value("bias_mode", std::string("standard")));
  m.train_config = f.manifest.value("train_config", nlohmann::json::object());
  m.seed = f.manifest.value("seed", std::uint64_t{0});
  m.check_invariants();
  require_shape(f.manifest.value("d_model", m.d_model()) == m.d_model() &&
                    f.manifest.value("d_sae", m.d_sae()) == m.d_sae(),
                "SAE manifest dims disagree with tensors");
  return m;
}

Matrix encode(const SaeModel& model, const Matrix& z) {
  require_shape(static_cast<std::size_t>(z.cols()) == model.d_model(),
                "encode: trailing dim " + std::to_string(z.cols()) + " != d_model " +
                    std::to_string(model.d_model()));
  Matrix pre;
  if (model.bias_mode == BiasMode::literal) {
    pre.noalias() = z * model.w_enc;
  } else {
    pre.noalias() = (z.rowwise() - model.b_dec.transpose()) * model.w_enc;
    pre.rowwise() += model.b_enc.transpose();
  }
  return pre.cwiseMax(0.0f);
}

Matrix decode(const SaeModel& model, const Matrix& h) {
  require_shape(static_cast<std::size_t>(h.cols()) == model.d_sae(),
                "decode: trailing dim " + std::to_string(h.cols()) + " != d_sae " +
                    std::to_string(model.d_sae()));
  Matrix out;
  out.noalias() = h * model.w_dec;
  if (model.bias_mode == BiasMode::standard) out.rowwise() += model.b_dec.transpose();
  return out;
}

Matrix reconstruct(const SaeModel& model, const Matrix& z) { return decode(model, encode(model, z)); }

Loss sae_loss(const Matrix& z, const Matrix& z_hat, const Matrix& h, double l1_coefficient) {
  require_shape(z.rows() == z_hat.rows() && z.cols() == z_hat.cols(), "sae_loss: z / z_hat shape mismatch");
  require_shape(h.rows() == z.rows(), "sae_loss: h sample count mismatch");
  require_shape(z.rows() > 0, "sae_loss: empty batch");
  Loss loss;
  loss.mse = (z - z_hat).cast<double>().squaredNorm() / static_cast<double>(z.size());
  loss.l1 = h.cast<double>().cwiseAbs().sum() / static_cast<double>(h.rows());
  loss.total = loss.mse + l1_coefficient * loss.l1;
  return loss;
}

double mean_l0(const Matrix& h) {
  if (h.rows() == 0) return 0.0;
  return static_cast<double>((h.array() != 0.0f).count()) / static_cast<double>(h.rows());
}

TrainingDiverged::TrainingDiverged(std::uint64_t s, std::uint64_t b)
    : std::runtime_error("non-finite SAE loss at step " + std::to_string(s) + ", batch " + std::to_string(b)),
      step(s),
      batch(b) {}

namespace {

struct AdamSlot {
  Matrix m, v;
  AdamSlot(Eigen::Index r, Eigen::Index c) : m(Matrix::Zero(r, c)), v(Matrix::Zero(r, c)) {}
};

template <typename Param, typename Grad>
void adam_step(Param& param, const Grad& grad, AdamSlot& slot, const TrainConfig& c, double lr,
               std::uint64_t t) {
  const auto b1 = static_cast<float>(c.beta1);
  const auto b2 = static_cast<float>(c.beta2);
  slot.m.array() = b1 * slot.m.array() + (1.0f - b1) * grad.array();
  slot.v.array() = b2 * slot.v.array() + (1.0f - b2) * grad.array().square();
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  const auto step = static_cast<float>(lr / bc1);
  const auto eps = static_cast<float>(c.epsilon);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  param.array() -= step * slot.m.array() / ((slot.v.array() * inv_bc2).sqrt() + eps);
}

}  // namespace

TrainResult train(const Matrix& data, const TrainConfig& config, std::size_t expansion_factor,
                  BiasMode mode) {
  require_shape(data.rows() > 0 && data.cols() > 0, "train_sae: empty dataset");
  return train(data, config,
               SaeModel::initialize(static_cast<std::size_t>(data.cols()), expansion_factor, mode, config.seed));
}

TrainResult train(const Matrix& data, const TrainConfig& config, SaeModel model) {
  require_shape(data.rows() > 0, "train_sae: empty dataset");
  require_shape(static_cast<std::size_t>(data.cols()) == model.d_model(), "train_sae: data width != d_model");
  if (config.l1_coefficient < 0.0) throw std::invalid_argument("l1_coefficient must be >= 0");
  if (!(config.learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be > 0");
  if (config.batch_size == 0) throw std::invalid_argument("batch_size must be >= 1");
  model.check_invariants();
  model.train_config = config.to_json();
  model.seed = config.seed;

  const bool standard = model.bias_mode == BiasMode::standard;
  const Eigen::Index n = data.rows();
  const Eigen::Index d = data.cols();
  const Eigen::Index batch = std::min<Eigen::Index>(static_cast<Eigen::Index>(config.batch_size), n);
  const auto lambda = static_cast<float>(config.l1_coefficient);

  AdamSlot s_wenc(model.w_enc.rows(), model.w_enc.cols());
  AdamSlot s_benc(model.b_enc.size(), 1);
  AdamSlot s_wdec(model.w_dec.rows(), model.w_dec.cols());
  AdamSlot s_bdec(model.b_dec.size(), 1);

  std::mt19937_64 rng(config.seed ^ 0x5ae5ae5ae5ae5ae5ULL);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::size_t cursor = order.size();

  TrainReport report;
  Matrix x(batch, d), xc, pre, h, z_hat, d_out, d_pre, d_h;
  for (std::uint64_t step = 0; step < config.steps; ++step) {
    if (cursor + static_cast<std::size_t>(batch) > order.size()) {
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const std::uint64_t batch_index = cursor / static_cast<std::size_t>(batch);
    for (Eigen::Index r = 0; r < batch; ++r) x.row(r) = data.row(order[cursor + static_cast<std::size_t>(r)]);
    cursor += static_cast<std::size_t>(batch);

    if (standard) {
      xc = x.rowwise() - model.b_dec.transpose();
    } else {
      xc = x;
    }
    pre.noalias() = xc * model.w_enc;
    if (standard) pre.rowwise() += model.b_enc.transpose();
    h = pre.cwiseMax(0.0f);
    z_hat.noalias() = h * model.w_dec;
    if (standard) z_hat.rowwise() += model.b_dec.transpose();

    const Loss loss = sae_loss(x, z_hat, h, config.l1_coefficient);
    if (!std::isfinite(loss.total)) throw TrainingDiverged(step, batch_index);
    if (config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.steps)) {
      report.curve.push_back({step, loss});
    }

    // d(mse)/d(z_hat) = 2 (z_hat - z) / (B * d)
    d_out = (z_hat - x) * (2.0f / static_cast<float>(batch * d));
    const Matrix g_wdec = h.transpose() * d_out;
    d_h.noalias() = d_out * model.w_dec.transpose();
    d_pre = (pre.array() > 0.0f).select(d_h.array() + lambda / static_cast<float>(batch), 0.0f);
    const Matrix g_wenc = xc.transpose() * d_pre;
    Vector g_benc, g_bdec;
    if (standard) {
      g_benc = d_pre.colwise().sum().transpose();
      g_bdec = d_out.colwise().sum().transpose() - (d_pre * model.w_enc.transpose()).colwise().sum().transpose();
    }

    const double lr = config.learning_rate *
                      (1.0 - static_cast<double>(step) / static_cast<double>(config.steps));
    const std::uint64_t t = step + 1;
    adam_step(model.w_enc, g_wenc, s_wenc, config, lr, t);
    adam_step(model.w_dec, g_wdec, s_wdec, config, lr, t);
    if (standard) {
      adam_step(model.b_enc, g_benc, s_benc, config, lr, t);
      adam_step(model.b_dec, g_bdec, s_bdec, config, lr, t);
      normalize_rows(model.w_dec);
    }
  }

  const Matrix h_all = encode(model, data);
  report.final_mean_l0 = mean_l0(h_all);
  report.final_mse = (decode(model, h_all) - data).cast<double>().squaredNorm() / static_cast<double>(data.size());
  return {std::move(model), std::move(report)};
}

}  // namespace vspad::sae
