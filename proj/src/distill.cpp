#include "dgmr/distill.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <ostream>

#include "dgmr/error.hpp"
#include "dgmr/random.hpp"

namespace dgmr {
namespace {

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

}  // namespace

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
  Dataset out;
  out.images = images.subset(indices);
  out.label_head = label_head;
  out.num_classes = num_classes;
  if (labeled())
    for (std::size_t i : indices) out.labels.push_back(labels[i]);
  return out;
}

Dataset gen_synthetic_dataset(const ModelConfig& config, std::size_t n, std::uint64_t seed,
                              const Model* labeler, std::size_t num_classes) {
  config.validate();
  if (n == 0) throw ValidationError("gen_synthetic_dataset: n must be >= 1");
  Dataset data;
  data.images.count = n;
  data.images.channels = config.channels;
  data.images.height = config.image_size;
  data.images.width = config.image_size;
  data.images.pixels.resize(n * data.images.image_size());
  Rng rng(Rng::mix(seed, 0));
  for (double& px : data.images.pixels) px = static_cast<double>(static_cast<float>(rng.uniform()));

  if (labeler != nullptr && num_classes > 0) {
    if (labeler->config.image_size != config.image_size || labeler->config.channels != config.channels) {
      throw ConfigError("gen_synthetic_dataset: labeler image shape differs from dataset config");
    }
    const std::size_t c = labeler->config.embed_dim;
    data.num_classes = num_classes;
    data.label_head = Matrix(num_classes, c);
    Rng head_rng(Rng::mix(seed, 1));
    for (double& w : data.label_head.values()) w = head_rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(c)));
    const auto outputs = forward(*labeler, data.images);
    data.labels.resize(n);
    for (std::size_t s = 0; s < n; ++s) {
      std::size_t best = 0;
      double best_logit = -INFINITY;
      for (std::size_t k = 0; k < num_classes; ++k) {
        const double logit = dot(data.label_head.row(k), outputs[s].cls);
        if (logit > best_logit) {
          best_logit = logit;
          best = k;
        }
      }
      data.labels[s] = static_cast<int>(best);
    }
  }
  return data;
}

double lr_at(const Schedule& s, std::size_t step) {
  const double peak = s.peak_lr();
  if (step > s.total_steps) {
    throw BoundsError("lr_at: step " + std::to_string(step) + " beyond total " + std::to_string(s.total_steps));
  }
  if (step < s.warmup_steps) {
    return peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  }
  if (s.total_steps <= s.warmup_steps) return peak;
  if (step == s.total_steps) return s.min_lr;
  const double progress = static_cast<double>(step - s.warmup_steps) /
                          static_cast<double>(s.total_steps - s.warmup_steps);
  return s.min_lr + (peak - s.min_lr) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

void adamw_update(std::span<double> w, std::span<const double> g, std::span<double> m,
                  std::span<double> v, std::size_t t, double lr, const AdamWConfig& cfg) {
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
    throw DimensionError("adamw_update: tensor length mismatch");
  }
  if (t == 0) throw ValidationError("adamw_update: step counter is 1-based");
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < w.size(); ++k) {
    m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
    v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
    const double m_hat = m[k] / c1;
    const double v_hat = v[k] / c2;
    w[k] -= lr * cfg.weight_decay * w[k];
    w[k] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

TrainState make_train_state(const Model& student, const Schedule& schedule,
                            const AdamWConfig& optimizer) {
  TrainState st;
  st.first_moment = zeros_like(student);
  st.second_moment = zeros_like(student);
  st.schedule = schedule;
  st.optimizer = optimizer;
  return st;
}

void adamw_step(TrainState& state, Model& weights, const Model& grads, const FreezeMask& freeze) {
  auto w = tensors(weights);
  const auto g = tensors(grads);
  auto m = tensors(state.first_moment);
  auto v = tensors(state.second_moment);
  if (w.size() != g.size() || w.size() != m.size()) {
    throw DimensionError("adamw_step: gradient/moment layout does not match weights");
  }
  ++state.step;
  const double lr = lr_at(state.schedule, state.step);
  for (std::size_t t = 0; t < w.size(); ++t) {
    if (freeze.frozen(w[t].group)) continue;
    if (w[t].shape != g[t].shape || w[t].shape != m[t].shape) {
      throw DimensionError("adamw_step: shape mismatch for " + w[t].name);
    }
    adamw_update(w[t].data, g[t].data, m[t].data, v[t].data, state.step, lr, state.optimizer);
  }
}

void check_distill_compatible(const ModelConfig& t, const ModelConfig& s) {
  if (t.embed_dim != s.embed_dim || t.depth != s.depth || t.heads != s.heads ||
      t.patch_size != s.patch_size || t.image_size != s.image_size || t.channels != s.channels) {
    throw ConfigError("teacher '" + t.name + "' and student '" + s.name +
                      "' differ beyond the MLP hidden width");
  }
}

DistillResult run_distillation(const Model& teacher, Model student, const Dataset& data,
                               const DistillConfig& config, std::size_t epochs) {
  teacher.validate();
  student.validate();
  check_distill_compatible(teacher.config, student.config);
  if (data.size() == 0) throw ValidationError("run_distillation: empty dataset");
  if (config.batch_size == 0) throw ValidationError("run_distillation: batch size must be >= 1");

  LossSpec loss = config.loss;
  if (loss.xent) {
    if (!data.labeled()) throw ValidationError("run_distillation: xent term needs a labeled dataset");
    loss.label_head = &data.label_head;
  }
  loss.validate();

  const std::size_t n = data.size();
  const std::size_t batch = std::min(config.batch_size, n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t total = config.max_steps ? *config.max_steps : epochs * per_epoch;
  if (total == 0) throw ValidationError("run_distillation: zero training steps");

  Schedule schedule;
  schedule.base_lr = config.base_lr;
  schedule.min_lr = config.min_lr;
  schedule.batch_size = batch;
  schedule.total_steps = total;
  schedule.warmup_steps = static_cast<std::size_t>(std::floor(config.warmup_fraction * static_cast<double>(total)));
  TrainState state = make_train_state(student, schedule, config.optimizer);

  // the teacher is frozen, so its targets are computed once
  const std::vector<TokenOutput> targets = forward(teacher, data.images);

  Rng rng(Rng::mix(config.seed, 2));
  std::vector<std::size_t> order;
  std::size_t cursor = per_epoch;  // forces a shuffle on the first step

  DistillResult result;
  result.curve.reserve(total);
  for (std::size_t step = 1; step <= total; ++step) {
    if (cursor == per_epoch) {
      order = shuffled(n, rng);
      cursor = 0;
    }
    const std::size_t begin = cursor * batch;
    const std::size_t end = std::min(begin + batch, n);
    ++cursor;
    const std::span<const std::size_t> idx(order.data() + begin, end - begin);

    const ImageBatch images = data.images.subset(idx);
    std::vector<TokenOutput> teacher_out;
    std::vector<int> labels;
    teacher_out.reserve(idx.size());
    for (std::size_t i : idx) {
      teacher_out.push_back(targets[i]);
      if (data.labeled()) labels.push_back(data.labels[i]);
    }

    GradResult gr = forward_backward(student, images, teacher_out, loss, labels, config.freeze);
    adamw_step(state, student, gr.grads, config.freeze);
    result.curve.push_back({step, lr_at(schedule, step), gr.loss});
  }
  result.student = std::move(student);
  return result;
}

void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& curve, bool with_xent) {
  os << "step,lr,loss,loss_cls,loss_patch";
  if (with_xent) os << ",loss_xent";
  os << '\n';
  const auto old_precision = os.precision();
  os << std::setprecision(17);
  for (const auto& r : curve) {
    os << r.step << ',' << r.lr << ',' << r.loss.total << ',' << r.loss.cls << ',' << r.loss.patch;
    if (with_xent) os << ',' << r.loss.xent;
    os << '\n';
  }
  os.precision(old_precision);
}

std::vector<Matrix> taylor_hidden_grads(const Model& model, const Dataset& data,
                                        std::size_t batches, std::size_t batch_size) {
  if (!data.labeled()) {
    throw ValidationError("taylor calibration needs a labeled dataset (labels + label head)");
  }
  if (batches == 0 || batch_size == 0) throw ValidationError("taylor calibration: empty budget");
  LossSpec spec;
  spec.cls = false;
  spec.patch = false;
  spec.xent = true;
  spec.lambda_xent = 1.0;
  spec.label_head = &data.label_head;

  std::vector<Matrix> acc;
  for (const auto& b : model.blocks) acc.emplace_back(b.mlp.w_hidden.rows(), b.mlp.w_hidden.cols());

  const std::size_t n = data.size();
  for (std::size_t b = 0; b < batches; ++b) {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < batch_size; ++k) idx.push_back((b * batch_size + k) % n);
    const ImageBatch images = data.images.subset(idx);
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(data.labels[i]);
    // dummy teacher targets: only the xent term is active
    const std::vector<TokenOutput> dummy = forward(model, images);
    const GradResult gr = forward_backward(model, images, dummy, spec, labels);
    for (std::size_t blk = 0; blk < acc.size(); ++blk) {
      auto dst = acc[blk].values();
      const auto src = gr.grads.blocks[blk].mlp.w_hidden.values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
  return acc;
}

}  // namespace dgmr
