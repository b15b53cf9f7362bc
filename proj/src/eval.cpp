#include "dgmr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "dgmr/error.hpp"
#include "dgmr/random.hpp"

namespace dgmr {

void EmbeddingSet::validate() const {
  if (!labels.empty() && labels.size() != vectors.rows()) {
    throw DimensionError("embedding set: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(vectors.rows()) + " vectors");
  }
  for (double v : vectors.values())
    if (!std::isfinite(v)) throw ValidationError("embedding set: non-finite vector entry");
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  const double na = std::sqrt(dot(a, a));
  const double nb = std::sqrt(dot(b, b));
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

int knn_classify(const EmbeddingSet& train, std::span<const double> query, std::size_t k) {
  const std::size_t n = train.size();
  if (n == 0) throw ValidationError("knn_classify: empty training set");
  if (!train.labeled()) throw ValidationError("knn_classify: training set has no labels");
  if (k < 1 || k > n) {
    throw BoundsError("knn_classify: k " + std::to_string(k) + " outside [1, " + std::to_string(n) + "]");
  }
  if (query.size() != train.vectors.cols()) {
    throw DimensionError("knn_classify: query length " + std::to_string(query.size()) +
                         " vs embedding size " + std::to_string(train.vectors.cols()));
  }
  std::vector<std::pair<double, std::size_t>> sims(n);
  for (std::size_t i = 0; i < n; ++i) sims[i] = {cosine_similarity(train.vectors.row(i), query), i};
  auto closer = [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  };
  std::partial_sort(sims.begin(), sims.begin() + static_cast<std::ptrdiff_t>(k), sims.end(), closer);

  std::map<int, std::pair<std::size_t, double>> votes;  // label -> (count, summed similarity)
  for (std::size_t r = 0; r < k; ++r) {
    auto& v = votes[train.labels[sims[r].second]];
    ++v.first;
    v.second += sims[r].first;
  }
  // std::map iterates labels ascending, so strict comparisons keep the lowest label on ties
  int best_label = votes.begin()->first;
  auto best = votes.begin()->second;
  for (const auto& [label, v] : votes) {
    if (v.first > best.first || (v.first == best.first && v.second > best.second)) {
      best = v;
      best_label = label;
    }
  }
  return best_label;
}

double knn_accuracy(const EmbeddingSet& train, const EmbeddingSet& eval, std::size_t k) {
  if (!eval.labeled() || eval.size() == 0) throw ValidationError("knn_accuracy: eval set needs labels");
  std::vector<int> hits(eval.size(), 0);
  const auto n = static_cast<std::ptrdiff_t>(eval.size());
  std::vector<std::exception_ptr> errors(eval.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(i);
    try {
      hits[s] = knn_classify(train, eval.vectors.row(s), k) == eval.labels[s] ? 1 : 0;
    } catch (...) {
      errors[s] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  const auto correct = std::accumulate(hits.begin(), hits.end(), std::size_t{0});
  return static_cast<double>(correct) / static_cast<double>(eval.size());
}

EmbeddingSet embed(const Model& model, const Dataset& data) {
  const auto outs = forward(model, data.images);
  EmbeddingSet set;
  set.vectors = Matrix(outs.size(), model.config.embed_dim);
  for (std::size_t i = 0; i < outs.size(); ++i)
    std::copy(outs[i].cls.begin(), outs[i].cls.end(), set.vectors.row(i).begin());
  set.labels = data.labels;
  return set;
}

double knn_accuracy(const Model& model, const Dataset& data, std::size_t k, double split_fraction,
                    std::uint64_t seed) {
  if (!data.labeled()) throw ValidationError("knn_accuracy: dataset has no labels");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ValidationError("knn_accuracy: split fraction must be in (0, 1)");
  }
  const std::size_t n = data.size();
  const auto n_train = static_cast<std::size_t>(std::floor(split_fraction * static_cast<double>(n)));
  if (n_train < k || n_train >= n) {
    throw ValidationError("knn_accuracy: too few samples (" + std::to_string(n) + ") for a " +
                          std::to_string(split_fraction) + " split with k=" + std::to_string(k));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(Rng::mix(seed, 3));
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  const EmbeddingSet all = embed(model, data);
  auto take = [&](std::size_t from, std::size_t to) {
    EmbeddingSet s;
    s.vectors = Matrix(to - from, all.vectors.cols());
    for (std::size_t r = from; r < to; ++r) {
      std::copy(all.vectors.row(order[r]).begin(), all.vectors.row(order[r]).end(),
                s.vectors.row(r - from).begin());
      s.labels.push_back(all.labels[order[r]]);
    }
    return s;
  };
  return knn_accuracy(take(0, n_train), take(n_train, n), k);
}

FunctionalMse functional_mse(const Model& teacher, const Model& student, const ImageBatch& images) {
  check_distill_compatible(teacher.config, student.config);
  if (images.count == 0) throw ValidationError("functional_mse: no images");
  const auto t = forward(teacher, images);
  const auto s = forward(student, images);
  const LossParts parts = distill_loss(t, s, LossSpec{});
  return {parts.cls, parts.patch};
}

DiversitySpectrum diversity_spectrum(const Matrix& w, std::size_t block, std::string layer) {
  const std::size_t rows = w.rows();
  const std::size_t d = w.cols();
  if (rows < 2) throw ValidationError("diversity_spectrum: need at least 2 rows, got " + std::to_string(rows));
  Vector mean(d, 0.0);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < d; ++k) mean[k] += w(i, k);
  for (double& m : mean) m /= static_cast<double>(rows);

  Matrix centered(rows, d);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t k = 0; k < d; ++k) centered(i, k) = w(i, k) - mean[k];

  Matrix cov(d, d);
  const double denom = static_cast<double>(rows - 1);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < rows; ++i) s += centered(i, a) * centered(i, b);
      cov(a, b) = cov(b, a) = s / denom;
    }
  }
  DiversitySpectrum out;
  out.variances = sym_eig_descending(cov);
  for (double& v : out.variances) v = std::max(v, 0.0);
  out.block = block;
  out.layer = std::move(layer);
  return out;
}

Matrix gather_rows(const Matrix& w, std::span<const std::size_t> indices) {
  Matrix out(indices.size(), w.cols());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    if (indices[r] >= w.rows()) throw BoundsError("gather_rows: index out of range");
    std::copy(w.row(indices[r]).begin(), w.row(indices[r]).end(), out.row(r).begin());
  }
  return out;
}

}  // namespace dgmr
