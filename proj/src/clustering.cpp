#include "vspad/clustering.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <random>

namespace vspad::cluster {

std::string to_string(Distance d) { return d == Distance::euclidean ? "euclidean" : "correlation"; }

Distance distance_from_string(const std::string& s) {
  if (s == "euclidean") return Distance::euclidean;
  if (s == "correlation") return Distance::correlation;
  throw std::invalid_argument("unknown distance: " + s);
}

double correlation_distance(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  require_shape(a.size() == b.size(), "correlation_distance: length mismatch");
  if (a == b) return 0.0;
  const Eigen::VectorXd ca = a.array() - a.mean();
  const Eigen::VectorXd cb = b.array() - b.mean();
  const double na = ca.norm();
  const double nb = cb.norm();
  if (na == 0.0 || nb == 0.0) return 1.0;
  const double r = std::clamp(ca.dot(cb) / (na * nb), -1.0, 1.0);
  return 1.0 - r;
}

DistanceMatrix pairwise(const Eigen::MatrixXd& points, Distance metric) {
  const Eigen::Index n = points.rows();
  DistanceMatrix d = DistanceMatrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = metric == Distance::euclidean
                           ? (points.row(i) - points.row(j)).norm()
                           : correlation_distance(points.row(i).transpose(), points.row(j).transpose());
      d(i, j) = v;
      d(j, i) = v;
    }
  }
  return d;
}

Dendrogram average_linkage(const DistanceMatrix& dist) {
  require_shape(dist.rows() == dist.cols(), "distance matrix must be square");
  const auto n = static_cast<std::size_t>(dist.rows());
  Dendrogram dg;
  dg.n_leaves = n;
  if (n == 0) return dg;

  // A merged cluster lives in the smaller of its two slots, so slot s
  // always holds the cluster whose smallest leaf index is s.
  DistanceMatrix d = dist;
  std::vector<std::size_t> size(n, 1);
  std::vector<bool> active(n, true);
  std::vector<std::vector<std::size_t>> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = {i};

  for (std::size_t step = 0; step + 1 < n; ++step) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bi = 0, bj = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      for (std::size_t j = i + 1; j < n; ++j) {
        if (!active[j]) continue;
        const double v = d(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
        if (v < best) {
          best = v;
          bi = i;
          bj = j;
        }
      }
    }
    dg.merges.push_back({bi, bj, best});
    const double wi = static_cast<double>(size[bi]);
    const double wj = static_cast<double>(size[bj]);
    for (std::size_t k = 0; k < n; ++k) {
      if (!active[k] || k == bi || k == bj) continue;
      const auto ik = static_cast<Eigen::Index>(k);
      const double v = (wi * d(static_cast<Eigen::Index>(bi), ik) + wj * d(static_cast<Eigen::Index>(bj), ik)) /
                       (wi + wj);
      d(static_cast<Eigen::Index>(bi), ik) = v;
      d(ik, static_cast<Eigen::Index>(bi)) = v;
    }
    size[bi] += size[bj];
    active[bj] = false;
    order[bi].insert(order[bi].end(), order[bj].begin(), order[bj].end());
    order[bj].clear();
  }
  dg.leaf_order = std::move(order[0]);
  return dg;
}

std::vector<std::size_t> Dendrogram::cut(std::size_t n_clusters) const {
  const std::size_t n = n_leaves;
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), std::size_t{0});
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  const std::size_t target = std::max<std::size_t>(1, n_clusters);
  const std::size_t to_apply = n > target ? n - target : 0;
  for (std::size_t m = 0; m < merges.size(); ++m) {
    if (m >= to_apply && merges[m].height > 0.0) break;
    parent[find(merges[m].right)] = find(merges[m].left);
  }
  std::vector<std::size_t> labels(n, 0);
  std::vector<std::size_t> root_label(n, std::numeric_limits<std::size_t>::max());
  std::size_t next = 0;
  for (const std::size_t leaf : leaf_order) {
    const std::size_t r = find(leaf);
    if (root_label[r] == std::numeric_limits<std::size_t>::max()) root_label[r] = next++;
    labels[leaf] = root_label[r];
  }
  return labels;
}

Eigen::MatrixXd standardize_rows(const Eigen::MatrixXd& points) {
  Eigen::MatrixXd out = points;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    out.row(r).array() -= out.row(r).mean();
    const double nrm = out.row(r).norm();
    if (nrm > 0.0) {
      out.row(r) /= nrm;
    } else {
      out.row(r).setZero();
    }
  }
  return out;
}

namespace {

std::size_t nearest(const Eigen::MatrixXd& centers, const Eigen::RowVectorXd& p) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centers.rows(); ++c) {
    const double dd = (centers.row(c) - p).squaredNorm();
    if (dd < best_d) {
      best_d = dd;
      best = static_cast<std::size_t>(c);
    }
  }
  return best;
}

}  // namespace

KMeansResult kmeans(const Eigen::MatrixXd& points, std::size_t k, std::uint64_t seed, std::size_t max_iterations) {
  const auto n = static_cast<std::size_t>(points.rows());
  KMeansResult res;
  if (n == 0) return res;
  if (k == 0) throw std::invalid_argument("kmeans: n_clusters must be >= 1");
  k = std::min(k, n);

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::MatrixXd centers(static_cast<Eigen::Index>(k), points.cols());
  std::size_t first = static_cast<std::size_t>(unit(rng) * static_cast<double>(n));
  first = std::min(first, n - 1);
  centers.row(0) = points.row(static_cast<Eigen::Index>(first));
  std::vector<double> d2(n);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < c; ++j) {
        best = std::min(best, (points.row(static_cast<Eigen::Index>(i)) - centers.row(static_cast<Eigen::Index>(j)))
                                  .squaredNorm());
      }
      d2[i] = best;
      total += best;
    }
    std::size_t pick = n - 1;
    if (total > 0.0) {
      const double target = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && acc >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = std::min(static_cast<std::size_t>(unit(rng) * static_cast<double>(n)), n - 1);
    }
    centers.row(static_cast<Eigen::Index>(c)) = points.row(static_cast<Eigen::Index>(pick));
  }

  std::vector<std::size_t> assign(n, std::numeric_limits<std::size_t>::max());
  std::size_t it = 0;
  for (; it < max_iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = nearest(centers, points.row(static_cast<Eigen::Index>(i)));
      if (a != assign[i]) {
        assign[i] = a;
        changed = true;
      }
    }
    if (!changed) break;
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(centers.rows(), centers.cols());
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(assign[i])) += points.row(static_cast<Eigen::Index>(i));
      ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) centers.row(static_cast<Eigen::Index>(c)) = sums.row(static_cast<Eigen::Index>(c)) / static_cast<double>(counts[c]);
    }
  }

  std::vector<std::size_t> relabel(k, std::numeric_limits<std::size_t>::max());
  std::size_t next = 0;
  res.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (relabel[assign[i]] == std::numeric_limits<std::size_t>::max()) relabel[assign[i]] = next++;
    res.labels[i] = relabel[assign[i]];
  }
  res.centers = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(next), points.cols());
  for (std::size_t c = 0; c < k; ++c) {
    if (relabel[c] != std::numeric_limits<std::size_t>::max()) {
      res.centers.row(static_cast<Eigen::Index>(relabel[c])) = centers.row(static_cast<Eigen::Index>(c));
    }
  }
  res.iterations = it;
  return res;
}

}  // namespace vspad::cluster
