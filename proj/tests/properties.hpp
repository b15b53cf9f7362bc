#pragma once

// Seeded statistical properties shared by the unit and acceptance suites.

#include <numeric>

#include "dgmr/eval.hpp"
#include "dgmr/pruning.hpp"
#include "oracles.hpp"

namespace oracle {

/// Total variance of the DGMR-selected rows of a Gaussian 64x32 matrix
/// against the mean total variance of `subsets` uniformly random row subsets
/// of the same size (32).
inline bool dgmr_variance_dominates(std::uint64_t seed, std::size_t subsets = 20) {
  const Matrix w = random_matrix(64, 32, seed);
  const std::size_t keep = 32;
  auto total = [&](const std::vector<std::size_t>& idx) {
    const auto s = dgmr::diversity_spectrum(dgmr::gather_rows(w, idx));
    return std::accumulate(s.variances.begin(), s.variances.end(), 0.0);
  };
  const double picked = total(dgmr::select_dgmr(w, keep).selected);
  double mean = 0.0;
  for (std::size_t k = 0; k < subsets; ++k)
    mean += total(dgmr::select_random(64, keep, dgmr::Rng::mix(seed, 1000 + k)).selected);
  mean /= static_cast<double>(subsets);
  return picked >= mean;
}

}  // namespace oracle
