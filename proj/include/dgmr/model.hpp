#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dgmr/linalg.hpp"

namespace dgmr {

/// Architecture hyperparameters of a plain ViT-style encoder.
struct ModelConfig {
  std::string name;
  std::size_t embed_dim = 0;   // C
  std::size_t depth = 0;
  std::size_t heads = 0;
  std::size_t mlp_hidden = 0;  // M
  std::size_t patch_size = 0;
  std::size_t image_size = 0;
  std::size_t channels = 3;

  std::size_t grid() const { return patch_size == 0 ? 0 : image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  /// Patch tokens plus the class token.
  std::size_t seq_len() const { return num_patches() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  double mlp_ratio() const { return static_cast<double>(mlp_hidden) / static_cast<double>(embed_dim); }

  /// Throws ConfigError on inconsistent dimensions.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

struct MlpWeights {
  Matrix w_hidden;  // M x N
  Vector b_hidden;  // M
  Matrix w_output;  // N x M
  Vector b_output;  // N

  std::size_t hidden() const { return w_hidden.rows(); }
  std::size_t dim() const { return w_hidden.cols(); }
  void validate() const;
  bool operator==(const MlpWeights&) const = default;
};

struct AttentionWeights {
  Matrix w_qkv;  // 3C x C
  Vector b_qkv;
  Matrix w_proj;  // C x C
  Vector b_proj;
  std::size_t heads = 1;
  bool operator==(const AttentionWeights&) const = default;
};

/// Pre-norm transformer block: x + Attn(LN1(x)), then x + MLP(LN2(x)).
struct BlockWeights {
  Vector ln1_gain, ln1_bias;
  AttentionWeights attn;
  Vector ln2_gain, ln2_bias;
  MlpWeights mlp;
  bool operator==(const BlockWeights&) const = default;
};

struct Model {
  ModelConfig config;
  Matrix patch_embed;  // C x patch_dim
  Vector patch_embed_bias;
  Vector cls_token;
  Matrix pos_embed;  // seq_len x C
  std::vector<BlockWeights> blocks;
  Vector final_ln_gain, final_ln_bias;

  /// Checks every tensor against the config. Throws ConfigError.
  void validate() const;
  bool operator==(const Model&) const = default;
};

/// Tensor groups that training can freeze independently.
enum class TensorGroup { embedding, norm, attention, mlp };

const char* to_string(TensorGroup g);

template <typename T>
struct BasicTensorView {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<T> data;
  TensorGroup group;
};
using TensorView = BasicTensorView<double>;
using ConstTensorView = BasicTensorView<const double>;

/// Every trainable tensor of the model in a fixed canonical order.
std::vector<TensorView> tensors(Model& model);
std::vector<ConstTensorView> tensors(const Model& model);

/// A model of the same shape with every entry zero (gradient / moment buffers).
Model zeros_like(const Model& model);

/// Allocates a zero-filled model for `config` (every block uses config.mlp_hidden).
Model allocate_model(const ModelConfig& config);

/// Seeded Gaussian init: std 0.02 for cls/pos embeddings and linear biases,
/// 1/sqrt(fan_in) for linear weights, layernorm gain 1 and bias 0.
Model init_model(const ModelConfig& config, std::uint64_t seed);

/// Exact parameter count. `mlp_ratio_override` prices a hypothetical
/// hidden width round(r * C).
std::uint64_t param_count(const ModelConfig& config, std::optional<double> mlp_ratio_override = {});
/// Counts the tensors actually held by the model.
std::uint64_t param_count(const Model& model);

/// Forward-pass FLOPs at the config's sequence length, counting one
/// multiply-accumulate as 2 FLOPs.
std::uint64_t flops_estimate(const ModelConfig& config, std::optional<double> mlp_ratio_override = {});

/// Hidden width implied by an expansion ratio r, i.e. round(r * C).
std::size_t hidden_for_ratio(const ModelConfig& config, double ratio);

/// Published or toy architecture by name. Throws ConfigError listing valid
/// names for an unknown one.
ModelConfig preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace dgmr
