#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "dgmr/loss.hpp"
#include "dgmr/model.hpp"
#include "dgmr/nn.hpp"

namespace dgmr {

/// Images plus optional labels and the fixed linear head that produced them.
struct Dataset {
  ImageBatch images;
  std::vector<int> labels;  // empty when unlabeled
  Matrix label_head;        // num_classes x C, empty when unlabeled
  std::size_t num_classes = 0;

  std::size_t size() const { return images.count; }
  bool labeled() const { return !labels.empty(); }
  Dataset subset(std::span<const std::size_t> indices) const;
  bool operator==(const Dataset&) const = default;
};

/// Seeded uniform-noise images in [0, 1] (values are exact floats, so f32
/// storage is lossless). With a labeler, labels are the argmax of a random
/// linear head applied to the labeler's class-token output.
Dataset gen_synthetic_dataset(const ModelConfig& config, std::size_t n, std::uint64_t seed,
                              const Model* labeler = nullptr, std::size_t num_classes = 10);

/// Linear warmup to the peak, then cosine decay to min_lr.
struct Schedule {
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  std::size_t batch_size = 256;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;

  /// base_lr * batch_size / 256.
  double peak_lr() const { return base_lr * static_cast<double>(batch_size) / 256.0; }
};

double lr_at(const Schedule& schedule, std::size_t step);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.0;
  double eps = 1e-8;
};

/// One decoupled-weight-decay Adam update on a flat tensor. `t` is the
/// 1-based step used for bias correction.
void adamw_update(std::span<double> weights, std::span<const double> grads,
                  std::span<double> first_moment, std::span<double> second_moment, std::size_t t,
                  double lr, const AdamWConfig& config);

struct TrainState {
  std::size_t step = 0;
  Model first_moment;
  Model second_moment;
  Schedule schedule;
  AdamWConfig optimizer;
};

TrainState make_train_state(const Model& student, const Schedule& schedule,
                            const AdamWConfig& optimizer = {});

/// Advances state.step and applies one AdamW update at lr_at(step).
/// Frozen groups are left untouched.
void adamw_step(TrainState& state, Model& weights, const Model& grads, const FreezeMask& freeze = {});

struct DistillConfig {
  LossSpec loss;  // label_head is taken from the dataset when xent is on
  FreezeMask freeze;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  double base_lr = 1e-4;
  double min_lr = 1e-6;
  double warmup_fraction = 0.1;
  AdamWConfig optimizer;
  /// Fixed step budget; overrides epochs when set.
  std::optional<std::size_t> max_steps;
};

struct LossRecord {
  std::size_t step = 0;
  double lr = 0.0;
  LossParts loss;
};

struct DistillResult {
  Model student;
  std::vector<LossRecord> curve;
};

/// Throws ConfigError unless the two configs agree on everything but the
/// MLP hidden width.
void check_distill_compatible(const ModelConfig& teacher, const ModelConfig& student);

/// Trains `student` to match the frozen `teacher` on `data`.
DistillResult run_distillation(const Model& teacher, Model student, const Dataset& data,
                               const DistillConfig& config, std::size_t epochs);

/// CSV with header step,lr,loss,loss_cls,loss_patch[,loss_xent].
void write_loss_csv(std::ostream& os, const std::vector<LossRecord>& curve, bool with_xent);

/// Per-block gradient of the label cross-entropy w.r.t. w_hidden, summed over
/// `batches` calibration batches; input to the Taylor pruning criterion.
std::vector<Matrix> taylor_hidden_grads(const Model& model, const Dataset& data,
                                        std::size_t batches, std::size_t batch_size);

}  // namespace dgmr
