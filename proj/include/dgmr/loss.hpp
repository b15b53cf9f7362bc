#pragma once

#include <span>
#include <string>
#include <vector>

#include "dgmr/linalg.hpp"

namespace dgmr {

/// Final-layernorm outputs of one image: class token and patch tokens.
struct TokenOutput {
  Vector cls;    // C
  Matrix patch;  // num_patches x C
  bool operator==(const TokenOutput&) const = default;
};

/// Which distillation terms are active.
///
/// total = [cls] L_cls + [patch] L_patch + [xent] lambda * CE, with
/// L_cls = ||z_cls - z'_cls||^2 / C and L_patch = ||z_patch - z'_patch||^2 / (L*C),
/// each averaged over the batch. CE uses logits label_head * z'_cls.
struct LossSpec {
  bool cls = true;
  bool patch = true;
  bool xent = false;
  double lambda_xent = 0.0;
  const Matrix* label_head = nullptr;  // num_classes x C, required with xent

  void validate() const;
  /// "cls,patch[,xent]" -> spec. Throws ValidationError.
  static LossSpec parse(const std::string& terms, double lambda_xent = 0.0);
  std::string terms_string() const;
};

struct LossParts {
  double total = 0.0;
  double cls = 0.0;    // always computed, even when not part of total
  double patch = 0.0;  // always computed, even when not part of total
  double xent = 0.0;   // only with xent enabled
};

/// Batch-mean distillation loss. When `grad` is non-null it receives
/// d total / d student output for every sample.
LossParts distill_loss(std::span<const TokenOutput> teacher, std::span<const TokenOutput> student,
                       const LossSpec& spec, std::span<const int> labels = {},
                       std::vector<TokenOutput>* grad = nullptr);

}  // namespace dgmr
