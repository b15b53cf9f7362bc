#include <cmath>
#include <numeric>

#include "doctest.h"
#include "dgmr/error.hpp"
#include "dgmr/nn.hpp"
#include "dgmr/parallel.hpp"
#include "fd_check.hpp"

using namespace dgmr;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.name = "tiny";
  cfg.embed_dim = 8;
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.mlp_hidden = 16;
  cfg.patch_size = 4;
  cfg.image_size = 8;
  return cfg;
}

}  // namespace

TEST_CASE("gelu values and derivative") {
  CHECK(ops::gelu(0.0) == 0.0);
  CHECK(ops::gelu(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-14));
  CHECK(ops::gelu(-1.0) == doctest::Approx(-0.15865525393145707).epsilon(1e-14));
  for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
    const double h = 1e-6;
    const double fd = (ops::gelu(x + h) - ops::gelu(x - h)) / (2 * h);
    CHECK(ops::gelu_derivative(x) == doctest::Approx(fd).epsilon(1e-8));
  }
}

TEST_CASE("layernorm normalizes each row") {
  const Matrix x = oracle::random_matrix(5, 7, 1, 3.0);
  const Vector gain(7, 1.0), bias(7, 0.0);
  const Matrix y = ops::layernorm(x, gain, bias);
  for (std::size_t i = 0; i < 5; ++i) {
    double mean = 0.0, var = 0.0;
    for (double v : y.row(i)) mean += v / 7;
    for (double v : y.row(i)) var += (v - mean) * (v - mean) / 7;
    CHECK(std::abs(mean) < 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("layernorm backward matches finite differences") {
  const Matrix x = oracle::random_matrix(3, 6, 2);
  const Matrix gm = oracle::random_matrix(2, 6, 3);
  const Vector gain(gm.row(0).begin(), gm.row(0).end()), bias(gm.row(1).begin(), gm.row(1).end());
  const Matrix weight = oracle::random_matrix(3, 6, 4);
  auto objective = [&](const Matrix& in, const Vector& g, const Vector& b) {
    const Matrix y = ops::layernorm(in, g, b);
    return dot(y.values(), weight.values());
  };
  ops::LayerNormCache cache;
  ops::layernorm(x, gain, bias, &cache);
  Vector dgain(6, 0.0), dbias(6, 0.0);
  const Matrix dx = ops::layernorm_backward(weight, gain, cache, dgain, dbias);
  const double h = 1e-6;
  Matrix probe = x;
  std::vector<double> fd(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    probe.values()[k] = x.values()[k] + h;
    const double up = objective(probe, gain, bias);
    probe.values()[k] = x.values()[k] - h;
    const double down = objective(probe, gain, bias);
    probe.values()[k] = x.values()[k];
    fd[k] = (up - down) / (2 * h);
  }
  CHECK(oracle::relative_error(dx.values(), fd) < 1e-7);
  Vector g = gain, fdg(6);
  for (std::size_t k = 0; k < 6; ++k) {
    g[k] = gain[k] + h;
    const double up = objective(x, g, bias);
    g[k] = gain[k] - h;
    const double down = objective(x, g, bias);
    g[k] = gain[k];
    fdg[k] = (up - down) / (2 * h);
  }
  CHECK(oracle::relative_error(dgain, fdg) < 1e-7);
  for (std::size_t k = 0; k < 6; ++k) {
    double s = 0.0;
    for (std::size_t i = 0; i < 3; ++i) s += weight(i, k);
    CHECK(dbias[k] == doctest::Approx(s).epsilon(1e-12));
  }
}

TEST_CASE("softmax rows and backward") {
  Matrix x = oracle::random_matrix(4, 5, 6, 4.0);
  x(0, 0) = 800.0;  // max subtraction keeps this finite
  const Matrix y = ops::softmax_rows(x);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (double v : y.row(i)) {
      CHECK(std::isfinite(v));
      s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-14));
  }
  const Matrix z = oracle::random_matrix(4, 5, 7);
  const Matrix dy = oracle::random_matrix(4, 5, 8);
  const Matrix dx = ops::softmax_rows_backward(ops::softmax_rows(z), dy);
  const double h = 1e-6;
  Matrix probe = z;
  std::vector<double> fd(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    probe.values()[k] = z.values()[k] + h;
    const double up = dot(ops::softmax_rows(probe).values(), dy.values());
    probe.values()[k] = z.values()[k] - h;
    const double down = dot(ops::softmax_rows(probe).values(), dy.values());
    probe.values()[k] = z.values()[k];
    fd[k] = (up - down) / (2 * h);
  }
  CHECK(oracle::relative_error(dx.values(), fd) < 1e-7);
}

TEST_CASE("patchify is row-major over the grid and channel-major within a patch") {
  const ModelConfig cfg = tiny_config();
  std::vector<double> image(3 * 8 * 8);
  std::iota(image.begin(), image.end(), 0.0);
  const Matrix p = ops::patchify(cfg, image);
  CHECK(p.rows() == 4);
  CHECK(p.cols() == 48);
  CHECK(p(0, 0) == 0.0);
  CHECK(p(0, 4) == 8.0);
  CHECK(p(1, 0) == 4.0);
  CHECK(p(1, 1) == 5.0);
  CHECK(p(1, 16) == 68.0);
  CHECK(p(2, 0) == 32.0);
  CHECK(p(3, 47) == 2 * 64 + 7 * 8 + 7);
}

TEST_CASE("forward shapes and determinism") {
  const Model model = init_model(preset("toy-small"), 3);
  const ImageBatch batch = oracle::random_images(model.config, 4, 10);
  const auto a = forward(model, batch);
  const auto b = forward(model, batch);
  REQUIRE(a.size() == 4);
  CHECK(a[0].cls.size() == 16);
  CHECK(a[0].patch.rows() == 16);
  CHECK(a[0].patch.cols() == 16);
  CHECK(a == b);
  CHECK(forward_sample(model, batch.image(2)) == a[2]);
  ImageBatch wrong = batch;
  wrong.height = 12;
  CHECK_THROWS_AS(forward(model, wrong), DimensionError);
}

TEST_CASE("zeroed patch embedding makes outputs input-independent") {
  Model model = init_model(preset("toy-small"), 4);
  for (double& w : model.patch_embed.values()) w = 0.0;
  const ImageBatch batch = oracle::random_images(model.config, 3, 11);
  const auto out = forward(model, batch);
  CHECK(out[0] == out[1]);
  CHECK(out[1] == out[2]);
}

TEST_CASE("attention probabilities sum to one") {
  const Model model = init_model(preset("toy-small"), 5);
  const ImageBatch batch = oracle::random_images(model.config, 1, 12);
  const auto maps = attention_maps(model, batch.image(0));
  REQUIRE(maps.size() == 4);
  for (const Matrix& m : maps) {
    CHECK(m.rows() == 17);
    for (std::size_t i = 0; i < m.rows(); ++i) {
      double s = 0.0;
      for (double v : m.row(i)) s += v;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-13));
    }
  }
}

TEST_CASE("parallel and serial paths are bit-identical") {
  const Model teacher = init_model(preset("toy-small"), 6);
  const Model student = init_model(preset("toy-small"), 7);
  const ImageBatch batch = oracle::random_images(teacher.config, 5, 13);
  const std::size_t saved = parallel::thread_count();
  parallel::set_thread_count(4);
  const auto t = forward(teacher, batch);
  CHECK(t == serial::forward(teacher, batch));
  const LossSpec spec;
  const GradResult par = forward_backward(student, batch, t, spec);
  const GradResult ser = serial::forward_backward(student, batch, t, spec);
  parallel::set_thread_count(saved);
  CHECK(par.loss.total == ser.loss.total);
  CHECK(par.grads == ser.grads);
}

TEST_CASE("identical outputs give zero loss and zero gradients") {
  const Model model = init_model(preset("toy-small"), 8);
  const ImageBatch batch = oracle::random_images(model.config, 2, 14);
  const auto t = forward(model, batch);
  const GradResult r = forward_backward(model, batch, t, LossSpec{});
  CHECK(r.loss.total == 0.0);
  for (const auto& v : tensors(r.grads))
    for (double g : v.data) CHECK(g == 0.0);
}

TEST_CASE("full-model gradients match finite differences") {
  const ModelConfig cfg = tiny_config();
  for (std::uint64_t seed : {1u, 2u}) {
    const Model teacher = init_model(cfg, 100 + seed);
    const Model student = init_model(cfg, 200 + seed);
    const ImageBatch batch = oracle::random_images(cfg, 2, 300 + seed);
    const auto t = forward(teacher, batch);
    for (const char* terms : {"cls", "patch", "cls,patch"}) {
      for (const auto& e : oracle::finite_difference_check(student, batch, t, LossSpec::parse(terms))) {
        INFO(terms << " " << e.name);
        CHECK(e.relative < 1e-4);
      }
    }
  }
}

TEST_CASE("cross-entropy gradients match finite differences") {
  const ModelConfig cfg = tiny_config();
  const Model teacher = init_model(cfg, 11);
  const Model student = init_model(cfg, 12);
  const ImageBatch batch = oracle::random_images(cfg, 3, 13);
  const Matrix head = oracle::random_matrix(4, cfg.embed_dim, 14);
  const std::vector<int> labels{0, 3, 1};
  LossSpec spec = LossSpec::parse("cls,patch,xent", 0.5);
  spec.label_head = &head;
  for (const auto& e : oracle::finite_difference_check(student, batch, forward(teacher, batch), spec, labels)) {
    INFO(e.name);
    CHECK(e.relative < 1e-4);
  }
}

TEST_CASE("freeze mask zeroes exactly the frozen groups") {
  const Model teacher = init_model(preset("toy-small"), 15);
  const Model student = init_model(preset("toy-small"), 16);
  const ImageBatch batch = oracle::random_images(teacher.config, 2, 17);
  const auto t = forward(teacher, batch);
  const FreezeMask freeze = FreezeMask::parse("attention,norm");
  const GradResult r = forward_backward(student, batch, t, LossSpec{}, {}, freeze);
  for (const auto& v : tensors(r.grads)) {
    double norm = 0.0;
    for (double g : v.data) norm += g * g;
    INFO(v.name);
    if (v.group == TensorGroup::attention || v.group == TensorGroup::norm) CHECK(norm == 0.0);
    else CHECK(norm > 0.0);
  }
  CHECK(FreezeMask::parse("").frozen(TensorGroup::mlp) == false);
  CHECK_THROWS_AS(FreezeMask::parse("heads"), ValidationError);
}
