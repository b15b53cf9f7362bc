#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "doctest.h"
#include "dgmr/error.hpp"
#include "dgmr/nn.hpp"
#include "dgmr/pruning.hpp"
#include "oracles.hpp"

using namespace dgmr;

namespace {

// y = W_out * gelu(W_h x + b_h) + b_out, written out longhand.
Vector mlp_forward(const MlpWeights& mlp, const Vector& x) {
  Vector y = mlp.b_output;
  for (std::size_t j = 0; j < mlp.hidden(); ++j) {
    double pre = mlp.b_hidden[j];
    for (std::size_t k = 0; k < x.size(); ++k) pre += mlp.w_hidden(j, k) * x[k];
    const double act = 0.5 * pre * (1.0 + std::erf(pre / std::sqrt(2.0)));
    for (std::size_t r = 0; r < y.size(); ++r) y[r] += mlp.w_output(r, j) * act;
  }
  return y;
}

MlpWeights random_mlp(std::size_t m, std::size_t n, std::uint64_t seed) {
  MlpWeights mlp;
  mlp.w_hidden = oracle::random_matrix(m, n, seed);
  mlp.w_output = oracle::random_matrix(n, m, seed + 1);
  const Matrix b = oracle::random_matrix(1, m + n, seed + 2);
  mlp.b_hidden.assign(b.values().begin(), b.values().begin() + static_cast<std::ptrdiff_t>(m));
  mlp.b_output.assign(b.values().begin() + static_cast<std::ptrdiff_t>(m), b.values().end());
  return mlp;
}

std::vector<std::vector<std::size_t>> split_cycles(const SelectionResult& r) {
  std::vector<std::vector<std::size_t>> cycles(1);
  std::size_t next = 0;
  for (std::size_t s = 0; s < r.selected.size(); ++s) {
    if (next < r.resets.size() && r.resets[next] == s) {
      cycles.emplace_back();
      ++next;
    }
    cycles.back().push_back(s);
  }
  return cycles;
}

}  // namespace

TEST_CASE("dgmr hand example") {
  const Matrix w = Matrix::from_rows({{3, 0}, {0, 2}, {1, 1}});
  const SelectionResult r = select_dgmr(w, 2);
  CHECK(r.selected == std::vector<std::size_t>{0, 1});
  REQUIRE(r.residual_norm_log.size() == 2);
  CHECK(r.residual_norm_log[0] == doctest::Approx(3.0).epsilon(1e-15));
  CHECK(r.residual_norm_log[1] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(r.resets.empty());
}

TEST_CASE("dgmr on orthogonal rows is the descending-norm order") {
  Matrix w(4, 4);
  const double norms[] = {1.0, 4.0, 2.5, 3.0};
  for (std::size_t i = 0; i < 4; ++i) w(i, (i + 1) % 4) = norms[i];
  const SelectionResult r = select_dgmr(w, 4);
  CHECK(r.selected == std::vector<std::size_t>{1, 3, 2, 0});
}

TEST_CASE("dgmr first cycle equals column-pivoted QR pivots of the transpose") {
  const Matrix w = oracle::random_matrix(20, 8, 2024);
  const SelectionResult r = select_dgmr(w, 8);
  CHECK(r.selected == oracle::householder_cpqr_pivots(transpose(w), 8));
}

TEST_CASE("dgmr resets to the unselected original rows after N picks") {
  const Matrix w = oracle::random_matrix(20, 8, 77);
  const SelectionResult r = select_dgmr(w, 16);
  const auto qr = oracle::householder_cpqr_pivots(transpose(w), 8);
  CHECK(std::equal(qr.begin(), qr.end(), r.selected.begin()));
  REQUIRE(r.resets == std::vector<std::size_t>{8});

  const Vector norms = row_l2_norms(w);
  std::size_t best = 20;
  for (std::size_t i = 0; i < 20; ++i) {
    if (std::find(r.selected.begin(), r.selected.begin() + 8, i) != r.selected.begin() + 8) continue;
    if (best == 20 || norms[i] > norms[best]) best = i;
  }
  CHECK(r.selected[8] == best);
  CHECK(r.residual_norm_log[8] == doctest::Approx(norms[best]).epsilon(1e-14));
}

TEST_CASE("dgmr matches QR pivots on every cycle of random instances") {
  for (std::uint64_t seed = 0; seed < 120; ++seed) {
    dgmr::Rng rng(seed);
    const std::size_t n = 2 + rng.below(31);
    const std::size_t m = n + rng.below(64 - n + 1);
    const std::size_t target = 1 + rng.below(m);
    const Matrix w = oracle::random_matrix(m, n, 5000 + seed);
    const SelectionResult r = select_dgmr(w, target);

    std::set<std::size_t> taken;
    for (const auto& cycle : split_cycles(r)) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < m; ++i)
        if (!taken.count(i)) pool.push_back(i);
      Matrix sub(pool.size(), n);
      for (std::size_t p = 0; p < pool.size(); ++p)
        std::copy(w.row(pool[p]).begin(), w.row(pool[p]).end(), sub.row(p).begin());
      const auto pivots = oracle::householder_cpqr_pivots(transpose(sub), cycle.size());
      REQUIRE(pivots.size() == cycle.size());
      for (std::size_t s = 0; s < cycle.size(); ++s) {
        CHECK(r.selected[cycle[s]] == pool[pivots[s]]);
        taken.insert(r.selected[cycle[s]]);
      }
    }
  }
}

TEST_CASE("dgmr residual invariants") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const Matrix w = oracle::random_matrix(48, 12, 900 + seed);
    const SelectionResult r = select_dgmr(w, 40);
    const std::set<std::size_t> unique(r.selected.begin(), r.selected.end());
    CHECK(unique.size() == r.selected.size());
    CHECK(r.resets == std::vector<std::size_t>{12, 24, 36});

    const Vector norms = row_l2_norms(w);
    const double mean = std::accumulate(norms.begin(), norms.end(), 0.0) / 48.0;
    for (double x : r.residual_norm_log) CHECK(x > 1e-10 * mean);

    for (const auto& cycle : split_cycles(r)) {
      for (std::size_t a = 0; a < cycle.size(); ++a) {
        if (a > 0) CHECK(r.residual_norm_log[cycle[a]] <= r.residual_norm_log[cycle[a - 1]] * (1 + 1e-12));
        for (std::size_t b = a + 1; b < cycle.size(); ++b) {
          const auto u = r.residuals.row(cycle[a]);
          const auto v = r.residuals.row(cycle[b]);
          const double scale = std::sqrt(dot(u, u) * dot(v, v));
          CHECK(std::abs(dot(u, v)) <= 1e-8 * scale);
        }
      }
    }
  }
}

TEST_CASE("dgmr early reset on rank-deficient rows") {
  const Matrix w = Matrix::from_rows({{1, 0, 0}, {2, 0, 0}, {3, 0, 0}});
  const SelectionResult r = select_dgmr(w, 3);
  CHECK(r.selected == std::vector<std::size_t>{2, 1, 0});
  CHECK(r.resets == std::vector<std::size_t>{1, 2});
  CHECK(r.residual_norm_log == std::vector<double>{3.0, 2.0, 1.0});
}

TEST_CASE("dgmr rank exhaustion and bounds") {
  const Matrix w = Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 0}, {0, 0, 0}});
  try {
    select_dgmr(w, 3);
    FAIL("expected RankExhaustedError");
  } catch (const RankExhaustedError& e) {
    CHECK(e.selectable() == 2);
  }
  CHECK_THROWS_AS(select_dgmr(w, 5), BoundsError);
  CHECK_THROWS_AS(select_dgmr(w, 0), BoundsError);
}

TEST_CASE("selection is invariant to positive scaling") {
  const Matrix w = oracle::random_matrix(30, 10, 3);
  const Matrix g = oracle::random_matrix(30, 10, 4);
  Matrix scaled = w;
  for (double& x : scaled.values()) x *= 37.5;
  CHECK(select_dgmr(w, 25).selected == select_dgmr(scaled, 25).selected);
  CHECK(select_l2(w, 12).selected == select_l2(scaled, 12).selected);
  CHECK(select_taylor(w, g, 12).selected == select_taylor(scaled, g, 12).selected);
}

TEST_CASE("select_l2") {
  Matrix w(3, 1);
  w(0, 0) = 5;
  w(1, 0) = 1;
  w(2, 0) = -3;
  CHECK(select_l2(w, 2).selected == std::vector<std::size_t>{0, 2});
  CHECK(select_l2(Matrix(4, 2, 1.0), 2).selected == std::vector<std::size_t>{0, 1});

  const Matrix r = oracle::random_matrix(10, 4, 8);
  std::vector<std::pair<double, std::size_t>> sorted;
  for (std::size_t i = 0; i < 10; ++i) {
    double s = 0.0;
    for (double x : r.row(i)) s += x * x;
    sorted.push_back({-std::sqrt(s), i});
  }
  std::sort(sorted.begin(), sorted.end());
  const auto got = select_l2(r, 6).selected;
  for (std::size_t i = 0; i < 6; ++i) CHECK(got[i] == sorted[i].second);
  CHECK_THROWS_AS(select_l2(r, 11), BoundsError);
}

TEST_CASE("select_random") {
  CHECK(select_random(50, 10, 3).selected == select_random(50, 10, 3).selected);
  auto full = select_random(9, 9, 1).selected;
  std::sort(full.begin(), full.end());
  std::vector<std::size_t> iota(9);
  std::iota(iota.begin(), iota.end(), std::size_t{0});
  CHECK(full == iota);
  CHECK_THROWS_AS(select_random(3, 4, 0), BoundsError);

  // each of 4 indices drawn ~ Binomial(10000, 0.25); 3 sigma = 3*sqrt(10000*0.25*0.75)
  std::vector<int> counts(4, 0);
  for (std::uint64_t seed = 0; seed < 10000; ++seed) ++counts[select_random(4, 1, seed).selected[0]];
  const double sigma = std::sqrt(10000 * 0.25 * 0.75);
  for (int c : counts) CHECK(std::abs(c - 2500.0) <= 3 * sigma);
}

TEST_CASE("select_taylor") {
  const Matrix w = oracle::random_matrix(8, 3, 21);
  CHECK(select_taylor(w, Matrix(8, 3), 3).selected == std::vector<std::size_t>{0, 1, 2});
  CHECK(select_taylor(w, w, 5).selected == select_l2(w, 5).selected);

  const Matrix g = oracle::random_matrix(8, 3, 22);
  const SelectionResult r = select_taylor(w, g, 8);
  std::vector<std::pair<double, std::size_t>> imp;
  for (std::size_t i = 0; i < 8; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += std::abs(w(i, k) * g(i, k));
    imp.push_back({-s, i});
  }
  std::sort(imp.begin(), imp.end());
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(r.selected[i] == imp[i].second);
    CHECK(r.residual_norm_log[i] == doctest::Approx(-imp[i].first).epsilon(1e-12));
  }
  CHECK_THROWS_AS(select_taylor(w, Matrix(8, 4), 2), DimensionError);
}

TEST_CASE("prune_mlp gathers rows, bias entries and output columns") {
  const MlpWeights mlp = random_mlp(4, 3, 10);
  const MlpWeights p = prune_mlp(mlp, std::vector<std::size_t>{2, 0});
  CHECK(p.w_hidden.rows() == 2);
  CHECK(p.w_hidden.cols() == 3);
  CHECK(p.b_hidden.size() == 2);
  CHECK(p.w_output.rows() == 3);
  CHECK(p.w_output.cols() == 2);
  CHECK(p.b_output == mlp.b_output);
  for (std::size_t k = 0; k < 3; ++k) {
    CHECK(p.w_hidden(0, k) == mlp.w_hidden(2, k));
    CHECK(p.w_hidden(1, k) == mlp.w_hidden(0, k));
    CHECK(p.w_output(k, 0) == mlp.w_output(k, 2));
    CHECK(p.w_output(k, 1) == mlp.w_output(k, 0));
  }
  CHECK(p.b_hidden == Vector{mlp.b_hidden[2], mlp.b_hidden[0]});
  CHECK_THROWS_AS(prune_mlp(mlp, std::vector<std::size_t>{4}), BoundsError);
}

TEST_CASE("prune_mlp with a full permutation preserves the function") {
  const MlpWeights mlp = random_mlp(12, 5, 30);
  std::vector<std::size_t> ident(12), rev(12);
  std::iota(ident.begin(), ident.end(), std::size_t{0});
  std::iota(rev.rbegin(), rev.rend(), std::size_t{0});
  const Matrix xs = oracle::random_matrix(6, 5, 31);
  const MlpWeights same = prune_mlp(mlp, ident);
  const MlpWeights reversed = prune_mlp(mlp, rev);
  const MlpWeights twice = prune_mlp(reversed, ident);
  for (std::size_t s = 0; s < 6; ++s) {
    const Vector x(xs.row(s).begin(), xs.row(s).end());
    const Vector y = mlp_forward(mlp, x);
    CHECK(mlp_forward(same, x) == y);
    const Vector yr = mlp_forward(reversed, x);
    CHECK(oracle::relative_error(yr, y) < 1e-13);
    CHECK(mlp_forward(twice, x) == yr);
  }
}

TEST_CASE("prune_model on toy-small") {
  const Model model = init_model(preset("toy-small"), 5);
  const PruneOutcome r1 = prune_model(model, Criterion::dgmr, 1.0);
  CHECK(r1.model.config.mlp_hidden == 16);
  for (const auto& b : r1.model.blocks) CHECK(b.mlp.hidden() == 16);
  const std::uint64_t c = 16, m = 64, mp = 16;
  CHECK(r1.report.original_params - r1.report.pruned_params == 2 * (2 * c * (m - mp) + (m - mp)));
  CHECK(r1.report.pruned_params == param_count(r1.model));
  CHECK(r1.model.blocks[0].attn == model.blocks[0].attn);
  CHECK(r1.model.pos_embed == model.pos_embed);
  CHECK_NOTHROW(r1.model.validate());

  const PruneOutcome half = prune_model(model, Criterion::l2, 0.5);
  CHECK(half.model.config.mlp_hidden == 8);
  CHECK(half.report.pruned_params < half.report.original_params);
  CHECK(half.report.pruned_flops < half.report.original_flops);

  CHECK_THROWS_AS(prune_model(model, Criterion::dgmr, 0.0), BoundsError);
  CHECK_THROWS_AS(prune_model(model, Criterion::dgmr, 4.5), BoundsError);
  CHECK_THROWS_AS(prune_model(model, Criterion::dgmr, 0.01), BoundsError);
  CHECK_THROWS_AS(prune_model(model, Criterion::taylor, 1.0), ValidationError);

  const PruneOutcome odd = prune_model(model, Criterion::dgmr, 0.3);
  CHECK(odd.model.config.mlp_hidden == 5);
  CHECK_FALSE(odd.report.rounding_note.empty());
}

TEST_CASE("prune_model at the full ratio is lossless") {
  const Model model = init_model(preset("toy-small"), 9);
  ImageBatch batch;
  batch.count = 3;
  batch.height = batch.width = 16;
  dgmr::Rng rng(4);
  batch.pixels.resize(3 * batch.image_size());
  for (double& p : batch.pixels) p = rng.uniform();
  const auto want = forward(model, batch);
  for (Criterion c : {Criterion::dgmr, Criterion::l2, Criterion::random}) {
    const PruneOutcome r = prune_model(model, c, 4.0);
    const auto got = forward(r.model, batch);
    for (std::size_t s = 0; s < 3; ++s) {
      for (std::size_t k = 0; k < 16; ++k) CHECK(std::abs(got[s].cls[k] - want[s].cls[k]) <= 1e-12);
      for (std::size_t k = 0; k < got[s].patch.size(); ++k)
        CHECK(std::abs(got[s].patch.values()[k] - want[s].patch.values()[k]) <= 1e-12);
    }
  }
}

TEST_CASE("prune report json has a stable field order") {
  const Model model = init_model(preset("toy-small"), 2);
  const PruneOutcome r = prune_model(model, Criterion::dgmr, 1.0);
  const std::string js = r.report.to_json();
  const auto pos = [&](const char* key) { return js.find(std::string("\"") + key + "\""); };
  CHECK(pos("criterion") < pos("target_ratio"));
  CHECK(pos("target_ratio") < pos("original_params"));
  CHECK(pos("pruned_flops") < pos("blocks"));
  CHECK(pos("residual_norms") != std::string::npos);
  CHECK(pos("resets") != std::string::npos);
  CHECK(js == prune_model(model, Criterion::dgmr, 1.0).report.to_json());
}
