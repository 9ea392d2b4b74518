#pragma once

// Independent reference computations used to check library outputs. They
// avoid the library code paths on purpose (plain loops, double precision).

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vspad/matrix.hpp"

namespace oracle {

using vspad::Matrix;

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, float lo = -1.0f,
                            float hi = 1.0f) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(lo, hi);
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  }
  return m;
}

inline std::vector<std::vector<double>> matmul(const Matrix& a, const Matrix& b) {
  std::vector<std::vector<double>> out(static_cast<std::size_t>(a.rows()),
                                       std::vector<double>(static_cast<std::size_t>(b.cols()), 0.0));
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < a.cols(); ++k) s += static_cast<double>(a(i, k)) * b(k, j);
      out[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = s;
    }
  }
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = -INFINITY;
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += (e[i] = std::exp(x[i] - mx));
  for (auto& v : e) v /= sum;
  return e;
}

/// Cyclic Jacobi rotations on a symmetric matrix. Returns eigenvalues in
/// descending order with matching eigenvector columns.
inline std::pair<std::vector<double>, std::vector<std::vector<double>>> jacobi_eigen(
    std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) v[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    }
    if (off < 1e-22) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k][p], vkq = v[k][q];
          v[k][p] = c * vkp - s * vkq;
          v[k][q] = s * vkp + c * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return a[x][x] > a[y][y]; });
  std::vector<double> vals;
  std::vector<std::vector<double>> vecs(n, std::vector<double>(n));
  for (std::size_t j = 0; j < n; ++j) {
    vals.push_back(a[idx[j]][idx[j]]);
    for (std::size_t k = 0; k < n; ++k) vecs[k][j] = v[k][idx[j]];
  }
  return {vals, vecs};
}

/// Union of each row's top-k column indices, by sorting every row in full.
inline std::set<std::uint32_t> topk_union(const Matrix& m, std::size_t k, const std::vector<bool>& keep = {}) {
  std::set<std::uint32_t> out;
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    std::vector<std::pair<float, std::uint32_t>> row;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      if (keep.empty() || keep[static_cast<std::size_t>(c)]) row.push_back({m(r, c), static_cast<std::uint32_t>(c)});
    }
    std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    for (std::size_t i = 0; i < std::min(k, row.size()); ++i) out.insert(row[i].second);
  }
  return out;
}

inline double entropy_bits(const std::vector<std::string>& labels) {
  std::map<std::string, double> counts;
  for (const auto& l : labels) counts[l] += 1.0;
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = c / static_cast<double>(labels.size());
    h -= p * std::log2(p);
  }
  return h;
}

/// Average-linkage merge heights by recomputing every cluster-pair mean
/// distance from the leaves at each step.
inline std::vector<double> average_linkage_heights(const Eigen::MatrixXd& dist) {
  std::vector<std::vector<std::size_t>> clusters;
  for (Eigen::Index i = 0; i < dist.rows(); ++i) clusters.push_back({static_cast<std::size_t>(i)});
  std::vector<double> heights;
  while (clusters.size() > 1) {
    double best = INFINITY;
    std::size_t bi = 0, bj = 1;
    for (std::size_t i = 0; i < clusters.size(); ++i) {
      for (std::size_t j = i + 1; j < clusters.size(); ++j) {
        double s = 0.0;
        for (auto a : clusters[i]) {
          for (auto b : clusters[j]) s += dist(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b));
        }
        s /= static_cast<double>(clusters[i].size() * clusters[j].size());
        if (s < best - 1e-12) {
          best = s;
          bi = i;
          bj = j;
        }
      }
    }
    heights.push_back(best);
    clusters[bi].insert(clusters[bi].end(), clusters[bj].begin(), clusters[bj].end());
    clusters.erase(clusters.begin() + static_cast<std::ptrdiff_t>(bj));
  }
  return heights;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("vspad_test_" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace oracle
