#include <benchmark/benchmark.h>

#include "dgmr/distill.hpp"
#include "dgmr/linalg.hpp"
#include "dgmr/nn.hpp"
#include "dgmr/random.hpp"

namespace {

dgmr::Matrix gaussian(std::size_t r, std::size_t c, std::uint64_t seed) {
  dgmr::Rng rng(seed);
  dgmr::Matrix m(r, c);
  for (double& x : m.values()) x = rng.normal();
  return m;
}

void BM_MatmulSerial(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = gaussian(n, n, 1), b = gaussian(n, n, 2);
  for (auto _ : st) benchmark::DoNotOptimize(dgmr::serial::matmul(a, b));
}

void BM_MatmulParallel(benchmark::State& st) {
  const auto n = static_cast<std::size_t>(st.range(0));
  const auto a = gaussian(n, n, 1), b = gaussian(n, n, 2);
  for (auto _ : st) benchmark::DoNotOptimize(dgmr::matmul(a, b));
}

void BM_RowNormsSerial(benchmark::State& st) {
  const auto w = gaussian(static_cast<std::size_t>(st.range(0)), 512, 3);
  for (auto _ : st) benchmark::DoNotOptimize(dgmr::serial::row_l2_norms(w));
}

void BM_RowNormsParallel(benchmark::State& st) {
  const auto w = gaussian(static_cast<std::size_t>(st.range(0)), 512, 3);
  for (auto _ : st) benchmark::DoNotOptimize(dgmr::row_l2_norms(w));
}

struct Fixture {
  dgmr::Model teacher, student;
  dgmr::Dataset data;
  std::vector<dgmr::TokenOutput> targets;

  Fixture() {
    const auto cfg = dgmr::preset("toy-medium");
    teacher = dgmr::init_model(cfg, 1);
    student = dgmr::init_model(cfg, 2);
    data = dgmr::gen_synthetic_dataset(cfg, 16, 3);
    targets = dgmr::forward(teacher, data.images);
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

void BM_ForwardSerial(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st) benchmark::DoNotOptimize(dgmr::serial::forward(f.teacher, f.data.images));
}

void BM_ForwardParallel(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st) benchmark::DoNotOptimize(dgmr::forward(f.teacher, f.data.images));
}

void BM_ForwardBackwardSerial(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st)
    benchmark::DoNotOptimize(dgmr::serial::forward_backward(f.student, f.data.images, f.targets, dgmr::LossSpec{}));
}

void BM_ForwardBackwardParallel(benchmark::State& st) {
  const auto& f = fixture();
  for (auto _ : st)
    benchmark::DoNotOptimize(dgmr::forward_backward(f.student, f.data.images, f.targets, dgmr::LossSpec{}));
}

}  // namespace

BENCHMARK(BM_MatmulSerial)->Arg(64)->Arg(256);
BENCHMARK(BM_MatmulParallel)->Arg(64)->Arg(256);
BENCHMARK(BM_RowNormsSerial)->Arg(1024)->Arg(8192);
BENCHMARK(BM_RowNormsParallel)->Arg(1024)->Arg(8192);
BENCHMARK(BM_ForwardSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardParallel)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardBackwardSerial)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ForwardBackwardParallel)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
