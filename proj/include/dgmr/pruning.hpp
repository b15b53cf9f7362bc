#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dgmr/linalg.hpp"
#include "dgmr/model.hpp"

namespace dgmr {

/// Ordered neuron selection plus the audit trail of how it was made.
struct SelectionResult {
  std::vector<std::size_t> selected;
  /// Norm of the chosen row at the moment it was chosen (residual norm for
  /// DGMR, original norm or importance score for the baselines).
  std::vector<double> residual_norm_log;
  /// Number of selections made when the working set was re-initialized.
  std::vector<std::size_t> resets;
  /// DGMR only: residual vector of each pick, one row per selection step.
  Matrix residuals;
};

/// Diversity-guided greedy selection over the rows of `w_hidden` (M x N).
///
/// Each step takes the working row with the largest l2 norm (lowest index on
/// ties) and removes its direction from every working row. After N picks in a
/// cycle the residual space is exhausted and the working set restarts from
/// the original rows of the still-unselected neurons; the restart happens
/// early if every residual drops to `rel_eps` x mean original row norm.
///
/// The number of picks is a neuron count, so a target expansion ratio r maps
/// to round(r * N) picks (see prune_model).
SelectionResult select_dgmr(const Matrix& w_hidden, std::size_t target, double rel_eps = 1e-10);

/// Top-`target` rows by original l2 norm.
SelectionResult select_l2(const Matrix& w_hidden, std::size_t target);

/// Uniform sample without replacement.
SelectionResult select_random(std::size_t m, std::size_t target, std::uint64_t seed);

/// First-order Taylor importance sum_k |w_ik * g_ik|.
SelectionResult select_taylor(const Matrix& w_hidden, const Matrix& hidden_grads, std::size_t target);

/// Structural slice: keeps hidden rows / bias entries / output columns in
/// the order of `selection`. b_output is unchanged.
MlpWeights prune_mlp(const MlpWeights& mlp, const SelectionResult& selection);
MlpWeights prune_mlp(const MlpWeights& mlp, const std::vector<std::size_t>& indices);

enum class Criterion { dgmr, l2, random, taylor };

const char* to_string(Criterion c);
/// Throws ValidationError for unknown names.
Criterion parse_criterion(const std::string& name);

struct PruneOptions {
  std::uint64_t seed = 0;
  double rel_eps = 1e-10;
  /// Per-block gradients of a calibration loss w.r.t. w_hidden; required for
  /// Criterion::taylor.
  std::vector<Matrix> taylor_grads;
};

struct PruneReport {
  Criterion criterion = Criterion::dgmr;
  double target_ratio = 0.0;
  std::size_t original_hidden = 0;
  std::size_t pruned_hidden = 0;
  std::uint64_t original_params = 0;
  std::uint64_t pruned_params = 0;
  std::uint64_t original_flops = 0;
  std::uint64_t pruned_flops = 0;
  std::uint64_t seed = 0;
  std::string rounding_note;
  std::vector<SelectionResult> selections;  // one per block

  double param_reduction() const;
  double flops_reduction() const;
  /// JSON with a stable field order.
  std::string to_json(int indent = 2) const;
};

struct PruneOutcome {
  Model model;
  PruneReport report;
};

/// Prunes every block's MLP to round(r * C) hidden neurons. Attention,
/// norms and embeddings are left untouched.
PruneOutcome prune_model(const Model& model, Criterion criterion, double ratio,
                         const PruneOptions& options = {});

}  // namespace dgmr
