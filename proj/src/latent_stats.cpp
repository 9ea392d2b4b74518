#include "vspad/latent_stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "vspad/clustering.hpp"

namespace vspad::stats {

ImageSet ImageSet::from_trace(const ActivationTrace& trace, int layer) {
  ImageSet s;
  s.images.reserve(trace.n_images);
  for (std::size_t i = 0; i < trace.n_images; ++i) s.images.push_back(trace.image(layer, i));
  s.labels = trace.labels;
  return s;
}

io::TensorFile LatentStats::to_file() const {
  auto as_vec = [](const std::vector<double>& v) {
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) out[static_cast<Eigen::Index>(i)] = static_cast<float>(v[i]);
    return out;
  };
  io::TensorFile f;
  f.add("mean_activation", as_vec(mean_activation));
  f.add("frequency", as_vec(frequency));
  f.add("label_entropy", as_vec(label_entropy));
  f.manifest = {{"kind", "stats"},        {"epsilon", active_threshold}, {"topk", topk},
                {"n_images", n_images},   {"n_labels", n_labels},        {"d_sae", d_sae()}};
  return f;
}

LatentStats LatentStats::from_file(const io::TensorFile& f) {
  if (f.kind() != "stats") throw io::FormatError("not a stats file (kind=" + f.kind() + ")");
  auto as_vec = [](const io::Tensor& t) {
    require_shape(t.rank() == 1, t.name + " must be rank 1");
    return std::vector<double>(t.data.begin(), t.data.end());
  };
  LatentStats s;
  s.mean_activation = as_vec(f.at("mean_activation"));
  s.frequency = as_vec(f.at("frequency"));
  s.label_entropy = as_vec(f.at("label_entropy"));
  require_shape(s.mean_activation.size() == s.frequency.size() && s.frequency.size() == s.label_entropy.size(),
                "stats vectors differ in length");
  s.active_threshold = f.manifest.value("epsilon", 1e-6);
  s.topk = f.manifest.value("topk", std::size_t{0});
  s.n_images = f.manifest.value("n_images", std::size_t{0});
  s.n_labels = f.manifest.value("n_labels", std::size_t{0});
  return s;
}

Matrix image_level_activations(const sae::SaeModel& model, const ImageSet& data) {
  Matrix out(static_cast<Eigen::Index>(data.images.size()), static_cast<Eigen::Index>(model.d_sae()));
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    require_shape(data.images[i].rows() > 0, "image " + std::to_string(i) + " has no patches");
    out.row(static_cast<Eigen::Index>(i)) = sae::encode(model, data.images[i]).colwise().maxCoeff();
  }
  return out;
}

namespace {

// Indices sorted by value descending, ties by lower index.
std::vector<std::size_t> descending_order(const std::vector<double>& values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  return idx;
}

double entropy_bits(const std::map<std::string, std::size_t>& hist, std::size_t total) {
  double h = 0.0;
  for (const auto& [label, count] : hist) {
    const double p = static_cast<double>(count) / static_cast<double>(total);
    h -= p * std::log2(p);
  }
  return std::max(h, 0.0);
}

}  // namespace

LatentStats compute_stats(const sae::SaeModel& model, const ImageSet& data, double active_threshold,
                          std::size_t topk_for_entropy) {
  if (data.images.empty()) throw std::invalid_argument("compute_stats: empty dataset");
  if (!(active_threshold > 0.0)) throw std::invalid_argument("compute_stats: threshold must be > 0");
  if (topk_for_entropy > 0 && data.labels.size() != data.images.size()) {
    throw std::invalid_argument("compute_stats: label entropy requires one label per image");
  }

  const Matrix act = image_level_activations(model, data);
  const std::size_t n = data.images.size();
  const std::size_t d = model.d_sae();

  LatentStats s;
  s.active_threshold = active_threshold;
  s.topk = topk_for_entropy;
  s.n_images = n;
  s.n_labels = std::set<std::string>(data.labels.begin(), data.labels.end()).size();
  s.mean_activation.assign(d, 0.0);
  s.frequency.assign(d, 0.0);
  s.label_entropy.assign(d, 0.0);

  // Sorted by activation, then label, then index, so neither the top-k
  // label multiset nor the summation order depends on image order.
  const std::vector<std::string> no_labels;
  const auto& labels = data.labels.size() == n ? data.labels : no_labels;
  std::vector<std::pair<double, std::size_t>> active;
  for (std::size_t j = 0; j < d; ++j) {
    active.clear();
    for (std::size_t i = 0; i < n; ++i) {
      const double a = act(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      if (a > active_threshold) active.emplace_back(a, i);
    }
    if (active.empty()) continue;
    std::sort(active.begin(), active.end(), [&](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      if (!labels.empty() && labels[a.second] != labels[b.second]) return labels[a.second] < labels[b.second];
      return a.second < b.second;
    });
    double sum = 0.0;
    for (const auto& [a, i] : active) sum += a;
    s.frequency[j] = static_cast<double>(active.size()) / static_cast<double>(n);
    s.mean_activation[j] = sum / static_cast<double>(active.size());
    if (topk_for_entropy > 0) {
      const std::size_t take = std::min(topk_for_entropy, active.size());
      std::map<std::string, std::size_t> hist;
      for (std::size_t t = 0; t < take; ++t) ++hist[data.labels[active[t].second]];
      s.label_entropy[j] = entropy_bits(hist, take);
    }
  }
  return s;
}

LatentMask LatentMask::keep_all(std::size_t d_sae) {
  LatentMask m;
  m.keep.assign(d_sae, true);
  return m;
}

std::size_t LatentMask::kept() const {
  return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
}

std::size_t per_axis_count(double percentile, std::size_t d_sae) {
  const double x = percentile * static_cast<double>(d_sae) / 100.0;
  const double c = std::ceil(x - 1e-9 * std::max(1.0, x));
  return std::min(d_sae, static_cast<std::size_t>(std::max(0.0, c)));
}

LatentMask filter_noisy(const LatentStats& stats, double percentile) {
  if (!(percentile > 0.0 && percentile < 100.0)) {
    throw std::invalid_argument("filter_noisy: percentile must lie in (0, 100)");
  }
  const std::size_t d = stats.d_sae();
  LatentMask mask = LatentMask::keep_all(d);
  mask.percentile = percentile;
  const std::size_t count = per_axis_count(percentile, d);
  const auto by_mean = descending_order(stats.mean_activation);
  const auto by_freq = descending_order(stats.frequency);
  for (std::size_t i = 0; i < count; ++i) {
    mask.keep[by_mean[i]] = false;
    mask.keep[by_freq[i]] = false;
  }
  mask.removed_by_mean = count;
  mask.removed_by_frequency = count;
  return mask;
}

std::vector<Reference> top_activating_references(const sae::SaeModel& model, const ImageSet& data,
                                                 LatentId latent, std::size_t k) {
  if (latent >= model.d_sae()) throw std::out_of_range("latent id " + std::to_string(latent) + " >= d_sae");
  if (k == 0) throw std::invalid_argument("references: k must be >= 1");
  std::vector<Reference> refs;
  refs.reserve(data.images.size());
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const Matrix h = sae::encode(model, data.images[i]);
    Reference r;
    r.image_index = i;
    r.patch_mask.resize(static_cast<std::size_t>(h.rows()));
    for (Eigen::Index p = 0; p < h.rows(); ++p) r.patch_mask[static_cast<std::size_t>(p)] = h(p, latent);
    r.activation = h.rows() > 0 ? h.col(latent).maxCoeff() : 0.0f;
    refs.push_back(std::move(r));
  }
  std::stable_sort(refs.begin(), refs.end(), [](const Reference& a, const Reference& b) { return a.activation > b.activation; });
  if (refs.size() > k) refs.resize(k);
  return refs;
}

Projection project_decoder(const sae::SaeModel& model, std::size_t n_clusters, std::uint64_t seed) {
  if (model.d_sae() < 2) throw std::invalid_argument("project_decoder: d_sae must be >= 2");
  if (n_clusters == 0) throw std::invalid_argument("project_decoder: n_clusters must be >= 1");

  Eigen::MatrixXd rows = model.w_dec.cast<double>();
  for (Eigen::Index r = 0; r < rows.rows(); ++r) {
    const double nrm = rows.row(r).norm();
    if (nrm > 0.0) rows.row(r) /= nrm;
  }
  const Eigen::RowVectorXd mean = rows.colwise().mean();
  const Eigen::MatrixXd centered = rows.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(rows.rows());

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("project_decoder: eigen decomposition failed");
  const Eigen::Index dm = cov.rows();
  Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(dm, 2);
  Projection out;
  out.explained_variance.assign(2, 0.0);
  for (Eigen::Index c = 0; c < std::min<Eigen::Index>(2, dm); ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(dm - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0.0) v = -v;
    basis.col(c) = v;
    out.explained_variance[static_cast<std::size_t>(c)] = std::max(0.0, eig.eigenvalues()[dm - 1 - c]);
  }
  out.coords = (centered * basis).cast<float>();
  out.cluster_id = cluster::kmeans(rows, n_clusters, seed).labels;
  return out;
}

}  // namespace vspad::stats
