#pragma once

// Central finite differences over every parameter of a model, compared
// tensor by tensor with the analytic gradient.

#include <string>
#include <vector>

#include "dgmr/loss.hpp"
#include "dgmr/nn.hpp"
#include "oracles.hpp"

namespace oracle {

struct TensorGradError {
  std::string name;
  double relative = 0.0;
};

inline double loss_value(const dgmr::Model& m, const dgmr::ImageBatch& images,
                         const std::vector<dgmr::TokenOutput>& teacher, const dgmr::LossSpec& spec,
                         std::span<const int> labels) {
  const auto out = dgmr::serial::forward(m, images);
  return dgmr::distill_loss(teacher, out, spec, labels).total;
}

inline std::vector<TensorGradError> finite_difference_check(const dgmr::Model& model,
                                                            const dgmr::ImageBatch& images,
                                                            const std::vector<dgmr::TokenOutput>& teacher,
                                                            const dgmr::LossSpec& spec,
                                                            std::span<const int> labels = {},
                                                            double h = 1e-5) {
  const dgmr::GradResult analytic = dgmr::forward_backward(model, images, teacher, spec, labels);
  const auto grad_views = dgmr::tensors(analytic.grads);
  dgmr::Model probe = model;
  auto views = dgmr::tensors(probe);
  std::vector<TensorGradError> out;
  for (std::size_t t = 0; t < views.size(); ++t) {
    std::vector<double> numeric(views[t].data.size());
    for (std::size_t k = 0; k < numeric.size(); ++k) {
      const double saved = views[t].data[k];
      views[t].data[k] = saved + h;
      const double up = loss_value(probe, images, teacher, spec, labels);
      views[t].data[k] = saved - h;
      const double down = loss_value(probe, images, teacher, spec, labels);
      views[t].data[k] = saved;
      numeric[k] = (up - down) / (2.0 * h);
    }
    out.push_back({views[t].name, relative_error(grad_views[t].data, numeric)});
  }
  return out;
}

inline dgmr::ImageBatch random_images(const dgmr::ModelConfig& cfg, std::size_t count, std::uint64_t seed) {
  dgmr::ImageBatch batch;
  batch.count = count;
  batch.channels = cfg.channels;
  batch.height = batch.width = cfg.image_size;
  batch.pixels.resize(count * batch.image_size());
  dgmr::Rng rng(seed);
  for (double& p : batch.pixels) p = rng.uniform();
  return batch;
}

}  // namespace oracle
