#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dgmr/distill.hpp"
#include "dgmr/linalg.hpp"
#include "dgmr/model.hpp"

namespace dgmr {

struct EmbeddingSet {
  Matrix vectors;           // n x C
  std::vector<int> labels;  // empty or length n

  std::size_t size() const { return vectors.rows(); }
  bool labeled() const { return !labels.empty(); }
  void validate() const;
  bool operator==(const EmbeddingSet&) const = default;
};

/// Cosine similarity; 0 when either vector is all zeros.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Majority vote over the k most cosine-similar training vectors (ties in
/// similarity go to the lower index). Vote ties are broken by summed
/// similarity, then by the lower label.
int knn_classify(const EmbeddingSet& train, std::span<const double> query, std::size_t k);

/// Fraction of `eval` vectors whose kNN prediction matches their label.
double knn_accuracy(const EmbeddingSet& train, const EmbeddingSet& eval, std::size_t k);

/// Class-token embeddings of every image, labels copied from the dataset.
EmbeddingSet embed(const Model& model, const Dataset& data);

/// Embeds the labeled dataset, splits it with a seeded shuffle
/// (split_fraction goes to the kNN memory bank) and scores the rest.
double knn_accuracy(const Model& model, const Dataset& data, std::size_t k,
                    double split_fraction = 0.9, std::uint64_t seed = 0);

struct FunctionalMse {
  double cls = 0.0;
  double patch = 0.0;
  double combined() const { return cls + patch; }
};

/// Distillation loss terms between teacher and student, averaged over the
/// images, without training.
FunctionalMse functional_mse(const Model& teacher, const Model& student, const ImageBatch& images);

struct DiversitySpectrum {
  Vector variances;  // descending, clamped at 0
  std::size_t block = 0;
  std::string layer;
};

/// PCA spectrum of the rows of `w` (each row one observation): eigenvalues of
/// the centered covariance X^T X / (rows - 1).
DiversitySpectrum diversity_spectrum(const Matrix& w, std::size_t block = 0, std::string layer = {});

/// Rows of `w` picked by `indices`.
Matrix gather_rows(const Matrix& w, std::span<const std::size_t> indices);

}  // namespace dgmr
