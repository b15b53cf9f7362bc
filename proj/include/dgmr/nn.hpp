#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dgmr/linalg.hpp"
#include "dgmr/loss.hpp"
#include "dgmr/model.hpp"

namespace dgmr {

/// Batch of channel-major images (count x channels x height x width),
/// pixel values in [0, 1].
struct ImageBatch {
  std::size_t count = 0;
  std::size_t channels = 3;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  std::size_t image_size() const { return channels * height * width; }
  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * image_size(), image_size()};
  }
  ImageBatch subset(std::span<const std::size_t> indices) const;
  bool operator==(const ImageBatch&) const = default;
};

/// Tensor groups excluded from gradient updates.
struct FreezeMask {
  bool embedding = false;
  bool norm = false;
  bool attention = false;
  bool mlp = false;

  bool frozen(TensorGroup g) const;
  /// Comma list of group names ("attention,norm"); empty string freezes nothing.
  static FreezeMask parse(const std::string& groups);
};

/// Elementwise / rowwise primitives with their backward rules.
namespace ops {

/// Exact-erf GELU.
double gelu(double x);
double gelu_derivative(double x);

inline constexpr double kLayerNormEps = 1e-6;

struct LayerNormCache {
  Matrix normalized;  // (x - mean) * inv_std, before the affine
  Vector inv_std;
};

/// Normalizes each row over the channel dimension, then applies gain/bias.
Matrix layernorm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                 LayerNormCache* cache = nullptr);
/// Returns dx and accumulates into dgain / dbias.
Matrix layernorm_backward(const Matrix& dy, std::span<const double> gain,
                          const LayerNormCache& cache, std::span<double> dgain,
                          std::span<double> dbias);

/// Rowwise softmax with max subtraction.
Matrix softmax_rows(const Matrix& x);
/// Given y = softmax_rows(x) and dy, returns dx.
Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy);

/// Splits an image into flattened patches (num_patches x channels*patch^2),
/// patches in row-major grid order, each flattened channel-major.
Matrix patchify(const ModelConfig& config, std::span<const double> image);

}  // namespace ops

/// Forward pass of one image.
TokenOutput forward_sample(const Model& model, std::span<const double> image);

/// Forward pass over a batch; samples run in parallel, results are
/// bit-identical to serial::forward.
std::vector<TokenOutput> forward(const Model& model, const ImageBatch& images);

/// Attention probabilities of every head in every block for one image
/// (depth*heads matrices, each seq_len x seq_len).
std::vector<Matrix> attention_maps(const Model& model, std::span<const double> image);

struct GradResult {
  LossParts loss;
  Model grads;  // same shape as the student
};

/// Loss against `teacher` outputs and exact gradients for every tensor.
/// Frozen groups get zero gradients. Per-sample gradients are reduced in
/// sample order, so the result does not depend on the thread count.
GradResult forward_backward(const Model& model, const ImageBatch& images,
                            std::span<const TokenOutput> teacher, const LossSpec& loss,
                            std::span<const int> labels = {}, const FreezeMask& freeze = {});

namespace serial {

std::vector<TokenOutput> forward(const Model& model, const ImageBatch& images);
GradResult forward_backward(const Model& model, const ImageBatch& images,
                            std::span<const TokenOutput> teacher, const LossSpec& loss,
                            std::span<const int> labels = {}, const FreezeMask& freeze = {});

}  // namespace serial

}  // namespace dgmr
