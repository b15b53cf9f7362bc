#pragma once

// Test-only reference computations. Nothing here calls into the code paths
// it is used to check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <vector>

#include "dgmr/linalg.hpp"
#include "dgmr/random.hpp"

namespace oracle {

using dgmr::Matrix;
using dgmr::Vector;

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::uint64_t seed, double scale = 1.0) {
  dgmr::Rng rng(seed);
  Matrix m(rows, cols);
  for (double& x : m.values()) x = scale * rng.normal();
  return m;
}

inline Matrix triple_loop_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < a.cols(); ++k) s += a(i, k) * b(k, j);
      c(i, j) = s;
    }
  return c;
}

/// Pivot order of Householder QR with column pivoting on `a` (rows x cols).
/// Column norms of the trailing block are recomputed from scratch each step;
/// ties go to the lowest column index. Returns at most min(rows, cols) pivots.
inline std::vector<std::size_t> householder_cpqr_pivots(Matrix a, std::size_t count) {
  const std::size_t n = a.rows();
  const std::size_t m = a.cols();
  count = std::min({count, n, m});
  std::vector<bool> used(m, false);
  std::vector<std::size_t> pivots;
  for (std::size_t s = 0; s < count; ++s) {
    std::size_t best = m;
    double best_norm = -1.0;
    for (std::size_t j = 0; j < m; ++j) {
      if (used[j]) continue;
      double acc = 0.0;
      for (std::size_t r = s; r < n; ++r) acc += a(r, j) * a(r, j);
      const double norm = std::sqrt(acc);
      if (norm > best_norm) {
        best_norm = norm;
        best = j;
      }
    }
    used[best] = true;
    pivots.push_back(best);
    // reflector mapping a[s:, best] onto a multiple of e_s
    std::vector<double> v(n - s);
    for (std::size_t r = s; r < n; ++r) v[r - s] = a(r, best);
    const double alpha = (v[0] >= 0.0 ? -1.0 : 1.0) * best_norm;
    v[0] -= alpha;
    double vv = 0.0;
    for (double x : v) vv += x * x;
    if (vv == 0.0) continue;
    for (std::size_t j = 0; j < m; ++j) {
      double proj = 0.0;
      for (std::size_t r = s; r < n; ++r) proj += v[r - s] * a(r, j);
      const double f = 2.0 * proj / vv;
      for (std::size_t r = s; r < n; ++r) a(r, j) -= f * v[r - s];
    }
  }
  return pivots;
}

/// Exhaustive kNN: full sort of every training vector by cosine similarity.
inline int brute_force_knn(const Matrix& train, const std::vector<int>& labels, std::span<const double> query,
                           std::size_t k) {
  auto cosine = [](std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      ab += a[i] * b[i];
      aa += a[i] * a[i];
      bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / (std::sqrt(aa) * std::sqrt(bb));
  };
  std::vector<std::pair<double, std::size_t>> all;
  for (std::size_t i = 0; i < train.rows(); ++i) all.push_back({cosine(train.row(i), query), i});
  std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) {
    if (x.first != y.first) return x.first > y.first;
    return x.second < y.second;
  });
  std::map<int, std::pair<int, double>> votes;
  for (std::size_t r = 0; r < k; ++r) {
    votes[labels[all[r].second]].first += 1;
    votes[labels[all[r].second]].second += all[r].first;
  }
  std::vector<std::pair<int, std::pair<int, double>>> ranked(votes.begin(), votes.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& x, const auto& y) {
    if (x.second.first != y.second.first) return x.second.first > y.second.first;
    if (x.second.second != y.second.second) return x.second.second > y.second.second;
    return x.first < y.first;
  });
  return ranked.front().first;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::sqrt(std::max(na, nb));
  return scale == 0.0 ? 0.0 : std::sqrt(diff) / scale;
}

}  // namespace oracle
