#include "dgmr/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

#include "dgmr/error.hpp"
#include "dgmr/random.hpp"

namespace dgmr {
namespace {

void check_target(std::size_t target, std::size_t m, const char* who) {
  if (target < 1 || target > m) {
    throw BoundsError(std::string(who) + ": target " + std::to_string(target) +
                      " outside [1, " + std::to_string(m) + "]");
  }
}

// Indices of the `target` largest scores, descending, ties by lowest index.
SelectionResult top_by_score(const Vector& score, std::size_t target) {
  std::vector<std::size_t> order(score.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  SelectionResult r;
  r.selected.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(target));
  for (std::size_t i : r.selected) r.residual_norm_log.push_back(score[i]);
  return r;
}

}  // namespace

SelectionResult select_dgmr(const Matrix& w_hidden, std::size_t target, double rel_eps) {
  const std::size_t m = w_hidden.rows();
  const std::size_t n = w_hidden.cols();
  check_target(target, m, "select_dgmr");
  if (!(rel_eps > 0.0)) throw ValidationError("select_dgmr: eps must be positive");

  const Vector original_norms = row_l2_norms(w_hidden);
  const double mean_norm =
      std::accumulate(original_norms.begin(), original_norms.end(), 0.0) / static_cast<double>(m);
  const double eps = rel_eps * mean_norm;

  SelectionResult result;
  result.residuals = Matrix(target, n);
  std::vector<bool> taken(m, false);
  Matrix work = w_hidden;
  std::size_t cycle_picks = 0;

  auto restart = [&] {
    work = w_hidden;
    for (std::size_t i = 0; i < m; ++i)
      if (taken[i]) std::fill(work.row(i).begin(), work.row(i).end(), 0.0);
    cycle_picks = 0;
    result.resets.push_back(result.selected.size());
  };

  auto argmax_residual = [&](double& best_norm) {
    std::size_t best = m;
    best_norm = -1.0;
    for (std::size_t i = 0; i < m; ++i) {
      if (taken[i]) continue;
      const auto r = work.row(i);
      const double norm = std::sqrt(dot(r, r));
      if (norm > best_norm) {
        best_norm = norm;
        best = i;
      }
    }
    return best;
  };

  for (std::size_t step = 0; step < target; ++step) {
    double best_norm = 0.0;
    std::size_t j = argmax_residual(best_norm);
    if (!(best_norm > eps)) {
      // The current cycle's residual space is exhausted before N picks.
      if (cycle_picks > 0) {
        restart();
        j = argmax_residual(best_norm);
      }
      if (!(best_norm > eps)) {
        throw RankExhaustedError("select_dgmr: all remaining neuron rows are zero after " +
                                     std::to_string(result.selected.size()) +
                                     " selections; requested " + std::to_string(target),
                                 result.selected.size());
      }
    }

    taken[j] = true;
    result.selected.push_back(j);
    result.residual_norm_log.push_back(best_norm);
    std::copy(work.row(j).begin(), work.row(j).end(), result.residuals.row(step).begin());
    eliminate_component_inplace(work, j, eps * eps);
    ++cycle_picks;

    if (cycle_picks == n && step + 1 < target) restart();
  }
  return result;
}

SelectionResult select_l2(const Matrix& w_hidden, std::size_t target) {
  check_target(target, w_hidden.rows(), "select_l2");
  return top_by_score(row_l2_norms(w_hidden), target);
}

SelectionResult select_random(std::size_t m, std::size_t target, std::uint64_t seed) {
  check_target(target, m, "select_random");
  std::vector<std::size_t> pool(m);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  Rng rng(seed);
  // partial Fisher-Yates: the first `target` slots are the sample
  for (std::size_t i = 0; i < target; ++i) {
    const std::size_t k = i + static_cast<std::size_t>(rng.below(m - i));
    std::swap(pool[i], pool[k]);
  }
  SelectionResult r;
  r.selected.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(target));
  r.residual_norm_log.assign(target, 0.0);
  return r;
}

SelectionResult select_taylor(const Matrix& w_hidden, const Matrix& hidden_grads,
                              std::size_t target) {
  if (w_hidden.rows() != hidden_grads.rows() || w_hidden.cols() != hidden_grads.cols()) {
    throw DimensionError("select_taylor: weights " + w_hidden.shape_string() +
                         " vs gradients " + hidden_grads.shape_string());
  }
  check_target(target, w_hidden.rows(), "select_taylor");
  Vector importance(w_hidden.rows(), 0.0);
  for (std::size_t i = 0; i < w_hidden.rows(); ++i) {
    const auto w = w_hidden.row(i);
    const auto g = hidden_grads.row(i);
    for (std::size_t k = 0; k < w.size(); ++k) importance[i] += std::abs(w[k] * g[k]);
  }
  return top_by_score(importance, target);
}

MlpWeights prune_mlp(const MlpWeights& mlp, const std::vector<std::size_t>& indices) {
  mlp.validate();
  const std::size_t m = mlp.hidden();
  const std::size_t n = mlp.dim();
  for (std::size_t j : indices) {
    if (j >= m) {
      throw BoundsError("prune_mlp: index " + std::to_string(j) + " out of range for hidden size " +
                        std::to_string(m));
    }
  }
  const std::size_t kept = indices.size();
  MlpWeights out;
  out.w_hidden = Matrix(kept, n);
  out.b_hidden.resize(kept);
  out.w_output = Matrix(n, kept);
  out.b_output = mlp.b_output;
  for (std::size_t s = 0; s < kept; ++s) {
    const std::size_t j = indices[s];
    std::copy(mlp.w_hidden.row(j).begin(), mlp.w_hidden.row(j).end(), out.w_hidden.row(s).begin());
    out.b_hidden[s] = mlp.b_hidden[j];
    for (std::size_t r = 0; r < n; ++r) out.w_output(r, s) = mlp.w_output(r, j);
  }
  return out;
}

MlpWeights prune_mlp(const MlpWeights& mlp, const SelectionResult& selection) {
  return prune_mlp(mlp, selection.selected);
}

const char* to_string(Criterion c) {
  switch (c) {
    case Criterion::dgmr: return "dgmr";
    case Criterion::l2: return "l2";
    case Criterion::random: return "random";
    case Criterion::taylor: return "taylor";
  }
  return "?";
}

Criterion parse_criterion(const std::string& name) {
  if (name == "dgmr") return Criterion::dgmr;
  if (name == "l2") return Criterion::l2;
  if (name == "random") return Criterion::random;
  if (name == "taylor") return Criterion::taylor;
  throw ValidationError("unknown criterion '" + name + "'; expected dgmr|l2|random|taylor");
}

double PruneReport::param_reduction() const {
  return original_params == 0 ? 0.0
                              : 1.0 - static_cast<double>(pruned_params) /
                                          static_cast<double>(original_params);
}

double PruneReport::flops_reduction() const {
  return original_flops == 0 ? 0.0
                             : 1.0 - static_cast<double>(pruned_flops) /
                                         static_cast<double>(original_flops);
}

std::string PruneReport::to_json(int indent) const {
  nlohmann::ordered_json j;
  j["criterion"] = to_string(criterion);
  j["target_ratio"] = target_ratio;
  j["original_hidden"] = original_hidden;
  j["pruned_hidden"] = pruned_hidden;
  j["original_params"] = original_params;
  j["pruned_params"] = pruned_params;
  j["param_reduction"] = param_reduction();
  j["original_flops"] = original_flops;
  j["pruned_flops"] = pruned_flops;
  j["flops_reduction"] = flops_reduction();
  if (criterion == Criterion::random) j["seed"] = seed;
  if (!rounding_note.empty()) j["rounding_note"] = rounding_note;
  auto blocks = nlohmann::ordered_json::array();
  for (std::size_t b = 0; b < selections.size(); ++b) {
    nlohmann::ordered_json e;
    e["block"] = b;
    e["selected"] = selections[b].selected;
    if (criterion == Criterion::dgmr) {
      e["residual_norms"] = selections[b].residual_norm_log;
      e["resets"] = selections[b].resets;
    } else if (criterion != Criterion::random) {
      e["scores"] = selections[b].residual_norm_log;
    }
    blocks.push_back(std::move(e));
  }
  j["blocks"] = std::move(blocks);
  return j.dump(indent);
}

PruneOutcome prune_model(const Model& model, Criterion criterion, double ratio,
                         const PruneOptions& options) {
  model.validate();
  const ModelConfig& cfg = model.config;
  const double max_ratio = cfg.mlp_ratio();
  if (!(ratio > 0.0) || ratio > max_ratio + 1e-12) {
    throw BoundsError("prune_model: ratio " + std::to_string(ratio) + " outside (0, " +
                      std::to_string(max_ratio) + "]");
  }
  const double exact = ratio * static_cast<double>(cfg.embed_dim);
  const std::size_t target = hidden_for_ratio(cfg, ratio);
  if (target < 1 || target > cfg.mlp_hidden) {
    throw BoundsError("prune_model: ratio " + std::to_string(ratio) + " gives hidden size " +
                      std::to_string(target) + ", need 1.." + std::to_string(cfg.mlp_hidden));
  }
  if (criterion == Criterion::taylor && options.taylor_grads.size() != model.blocks.size()) {
    throw ValidationError("prune_model: taylor criterion needs one gradient matrix per block");
  }

  PruneOutcome out{model, {}};
  PruneReport& report = out.report;
  report.criterion = criterion;
  report.target_ratio = ratio;
  report.original_hidden = cfg.mlp_hidden;
  report.pruned_hidden = target;
  report.seed = options.seed;
  if (std::abs(exact - static_cast<double>(target)) > 1e-9) {
    report.rounding_note = "r*C = " + std::to_string(exact) + " rounded to " + std::to_string(target);
  }
  report.selections.resize(model.blocks.size());

  const auto depth = static_cast<std::ptrdiff_t>(model.blocks.size());
  std::vector<std::exception_ptr> failures(model.blocks.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t bi = 0; bi < depth; ++bi) {
    const auto b = static_cast<std::size_t>(bi);
    try {
      const MlpWeights& mlp = model.blocks[b].mlp;
      SelectionResult sel;
      switch (criterion) {
        case Criterion::dgmr: sel = select_dgmr(mlp.w_hidden, target, options.rel_eps); break;
        case Criterion::l2: sel = select_l2(mlp.w_hidden, target); break;
        case Criterion::random:
          sel = select_random(mlp.hidden(), target, Rng::mix(options.seed, b));
          break;
        case Criterion::taylor: sel = select_taylor(mlp.w_hidden, options.taylor_grads[b], target); break;
      }
      out.model.blocks[b].mlp = prune_mlp(mlp, sel);
      report.selections[b] = std::move(sel);
    } catch (...) {
      failures[b] = std::current_exception();
    }
  }
  for (const auto& f : failures)
    if (f) std::rethrow_exception(f);

  out.model.config.mlp_hidden = target;
  report.original_params = param_count(model);
  report.pruned_params = param_count(out.model);
  report.original_flops = flops_estimate(cfg);
  report.pruned_flops = flops_estimate(out.model.config);
  return out;
}

}  // namespace dgmr
