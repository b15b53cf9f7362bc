#include "dgmr/nn.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <numbers>
#include <sstream>

#include "dgmr/error.hpp"

namespace dgmr {
namespace {

// y = x * w^T + b
Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y(x.rows(), w.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* xi = x.row(i).data();
    double* yi = y.row(i).data();
    for (std::size_t o = 0; o < w.rows(); ++o) {
      const double* wo = w.row(o).data();
      double s = b[o];
      for (std::size_t k = 0; k < x.cols(); ++k) s += xi[k] * wo[k];
      yi[o] = s;
    }
  }
  return y;
}

// Accumulates dw += dy^T x, db += colsum(dy); returns dx = dy w when wanted.
Matrix linear_backward(const Matrix& x, const Matrix& w, const Matrix& dy, Matrix& dw, Vector& db,
                       bool want_dx = true) {
  const std::size_t n = x.rows();
  const std::size_t in = x.cols();
  const std::size_t out = w.rows();
  for (std::size_t o = 0; o < out; ++o) {
    double* dwo = dw.row(o).data();
    double bsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double g = dy(i, o);
      bsum += g;
      const double* xi = x.row(i).data();
      for (std::size_t k = 0; k < in; ++k) dwo[k] += g * xi[k];
    }
    db[o] += bsum;
  }
  Matrix dx;
  if (!want_dx) return dx;
  dx = Matrix(n, in);
  for (std::size_t i = 0; i < n; ++i) {
    double* dxi = dx.row(i).data();
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dy(i, o);
      const double* wo = w.row(o).data();
      for (std::size_t k = 0; k < in; ++k) dxi[k] += g * wo[k];
    }
  }
  return dx;
}

void add_inplace(Matrix& a, const Matrix& b) {
  auto av = a.values();
  const auto bv = b.values();
  for (std::size_t k = 0; k < av.size(); ++k) av[k] += bv[k];
}

struct AttentionTape {
  std::vector<Matrix> probs;  // per head, L x L
};

// Multi-head scaled dot-product attention on a fused qkv (L x 3C).
Matrix attention_core(const Matrix& qkv, std::size_t heads, AttentionTape* tape) {
  const std::size_t l = qkv.rows();
  const std::size_t c = qkv.cols() / 3;
  const std::size_t d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix out(l, c);
  if (tape != nullptr) tape->probs.assign(heads, Matrix());
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * d;
    const std::size_t ko = c + h * d;
    const std::size_t vo = 2 * c + h * d;
    Matrix scores(l, l);
    for (std::size_t i = 0; i < l; ++i) {
      const double* qi = qkv.row(i).data() + qo;
      for (std::size_t j = 0; j < l; ++j) {
        const double* kj = qkv.row(j).data() + ko;
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += qi[t] * kj[t];
        scores(i, j) = s * scale;
      }
    }
    Matrix p = ops::softmax_rows(scores);
    for (std::size_t i = 0; i < l; ++i) {
      double* oi = out.row(i).data() + qo;
      for (std::size_t j = 0; j < l; ++j) {
        const double pij = p(i, j);
        const double* vj = qkv.row(j).data() + vo;
        for (std::size_t t = 0; t < d; ++t) oi[t] += pij * vj[t];
      }
    }
    if (tape != nullptr) tape->probs[h] = std::move(p);
  }
  return out;
}

Matrix attention_core_backward(const Matrix& qkv, std::size_t heads, const AttentionTape& tape,
                               const Matrix& d_out) {
  const std::size_t l = qkv.rows();
  const std::size_t c = qkv.cols() / 3;
  const std::size_t d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Matrix d_qkv(l, 3 * c);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t qo = h * d;
    const std::size_t ko = c + h * d;
    const std::size_t vo = 2 * c + h * d;
    const Matrix& p = tape.probs[h];
    Matrix dp(l, l);
    for (std::size_t i = 0; i < l; ++i) {
      const double* doi = d_out.row(i).data() + qo;
      for (std::size_t j = 0; j < l; ++j) {
        const double* vj = qkv.row(j).data() + vo;
        double s = 0.0;
        for (std::size_t t = 0; t < d; ++t) s += doi[t] * vj[t];
        dp(i, j) = s;
        // dv_j += p_ij * dout_i
        double* dvj = d_qkv.row(j).data() + vo;
        const double pij = p(i, j);
        for (std::size_t t = 0; t < d; ++t) dvj[t] += pij * doi[t];
      }
    }
    const Matrix ds = ops::softmax_rows_backward(p, dp);
    for (std::size_t i = 0; i < l; ++i) {
      const double* qi = qkv.row(i).data() + qo;
      double* dqi = d_qkv.row(i).data() + qo;
      for (std::size_t j = 0; j < l; ++j) {
        const double g = ds(i, j) * scale;
        const double* kj = qkv.row(j).data() + ko;
        double* dkj = d_qkv.row(j).data() + ko;
        for (std::size_t t = 0; t < d; ++t) {
          dqi[t] += g * kj[t];
          dkj[t] += g * qi[t];
        }
      }
    }
  }
  return d_qkv;
}

struct BlockTape {
  Matrix x_in;
  ops::LayerNormCache ln1;
  Matrix h1;
  Matrix qkv;
  AttentionTape attn;
  Matrix attn_out;
  ops::LayerNormCache ln2;
  Matrix h2;
  Matrix pre_act;
  Matrix act;
};

struct Tape {
  Matrix patches;
  std::vector<BlockTape> blocks;
  ops::LayerNormCache ln_final;
};

void check_image(const Model& model, std::span<const double> image) {
  const auto& cfg = model.config;
  const std::size_t expected = cfg.channels * cfg.image_size * cfg.image_size;
  if (image.size() != expected) {
    throw DimensionError("forward: image has " + std::to_string(image.size()) + " values, model '" +
                         cfg.name + "' expects " + std::to_string(cfg.channels) + "x" +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
}

void check_batch(const Model& model, const ImageBatch& images) {
  const auto& cfg = model.config;
  if (images.channels != cfg.channels || images.height != cfg.image_size ||
      images.width != cfg.image_size || images.pixels.size() != images.count * images.image_size()) {
    std::ostringstream os;
    os << "forward: batch of " << images.channels << "x" << images.height << "x" << images.width
       << " images does not match model '" << cfg.name << "' (" << cfg.channels << "x"
       << cfg.image_size << "x" << cfg.image_size << ")";
    throw DimensionError(os.str());
  }
}

// Returns final-layernorm output (seq_len x C).
Matrix run_forward(const Model& model, std::span<const double> image, Tape* tape,
                   std::vector<Matrix>* maps = nullptr) {
  check_image(model, image);
  const auto& cfg = model.config;
  Matrix patches = ops::patchify(cfg, image);
  const Matrix embedded = linear(patches, model.patch_embed, model.patch_embed_bias);

  const std::size_t l = cfg.seq_len();
  const std::size_t c = cfg.embed_dim;
  Matrix x(l, c);
  for (std::size_t k = 0; k < c; ++k) x(0, k) = model.cls_token[k] + model.pos_embed(0, k);
  for (std::size_t t = 1; t < l; ++t)
    for (std::size_t k = 0; k < c; ++k) x(t, k) = embedded(t - 1, k) + model.pos_embed(t, k);

  if (tape != nullptr) {
    tape->patches = std::move(patches);
    tape->blocks.resize(model.blocks.size());
  }
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const BlockWeights& blk = model.blocks[b];
    BlockTape local;
    BlockTape& bt = tape != nullptr ? tape->blocks[b] : local;
    const bool keep = tape != nullptr;

    if (keep) bt.x_in = x;
    Matrix h1 = ops::layernorm(x, blk.ln1_gain, blk.ln1_bias, keep ? &bt.ln1 : nullptr);
    Matrix qkv = linear(h1, blk.attn.w_qkv, blk.attn.b_qkv);
    AttentionTape at;
    Matrix attn_out = attention_core(qkv, blk.attn.heads, (keep || maps) ? &at : nullptr);
    if (maps != nullptr)
      for (auto& p : at.probs) maps->push_back(p);
    add_inplace(x, linear(attn_out, blk.attn.w_proj, blk.attn.b_proj));

    Matrix h2 = ops::layernorm(x, blk.ln2_gain, blk.ln2_bias, keep ? &bt.ln2 : nullptr);
    Matrix pre = linear(h2, blk.mlp.w_hidden, blk.mlp.b_hidden);
    Matrix act(pre.rows(), pre.cols());
    {
      const auto pv = pre.values();
      auto av = act.values();
      for (std::size_t k = 0; k < pv.size(); ++k) av[k] = ops::gelu(pv[k]);
    }
    add_inplace(x, linear(act, blk.mlp.w_output, blk.mlp.b_output));

    if (keep) {
      bt.h1 = std::move(h1);
      bt.qkv = std::move(qkv);
      bt.attn = std::move(at);
      bt.attn_out = std::move(attn_out);
      bt.h2 = std::move(h2);
      bt.pre_act = std::move(pre);
      bt.act = std::move(act);
    }
  }
  return ops::layernorm(x, model.final_ln_gain, model.final_ln_bias,
                        tape != nullptr ? &tape->ln_final : nullptr);
}

TokenOutput split_tokens(const Matrix& y) {
  TokenOutput out;
  out.cls.assign(y.row(0).begin(), y.row(0).end());
  out.patch = Matrix(y.rows() - 1, y.cols());
  std::copy(y.values().begin() + static_cast<std::ptrdiff_t>(y.cols()), y.values().end(),
            out.patch.values().begin());
  return out;
}

// Accumulates parameter gradients for one sample into `g`.
void run_backward(const Model& model, const Tape& tape, const TokenOutput& d_out, Model& g) {
  const std::size_t c = model.config.embed_dim;
  const std::size_t l = model.config.seq_len();
  Matrix dy(l, c);
  std::copy(d_out.cls.begin(), d_out.cls.end(), dy.row(0).begin());
  std::copy(d_out.patch.values().begin(), d_out.patch.values().end(),
            dy.values().begin() + static_cast<std::ptrdiff_t>(c));

  Matrix dx = ops::layernorm_backward(dy, model.final_ln_gain, tape.ln_final, g.final_ln_gain,
                                      g.final_ln_bias);

  for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
    const BlockWeights& blk = model.blocks[bi];
    const BlockTape& bt = tape.blocks[bi];
    BlockWeights& gb = g.blocks[bi];

    // MLP branch
    Matrix d_act = linear_backward(bt.act, blk.mlp.w_output, dx, gb.mlp.w_output, gb.mlp.b_output);
    {
      const auto pv = bt.pre_act.values();
      auto dv = d_act.values();
      for (std::size_t k = 0; k < dv.size(); ++k) dv[k] *= ops::gelu_derivative(pv[k]);
    }
    const Matrix d_h2 = linear_backward(bt.h2, blk.mlp.w_hidden, d_act, gb.mlp.w_hidden, gb.mlp.b_hidden);
    add_inplace(dx, ops::layernorm_backward(d_h2, blk.ln2_gain, bt.ln2, gb.ln2_gain, gb.ln2_bias));

    // attention branch
    const Matrix d_attn_out =
        linear_backward(bt.attn_out, blk.attn.w_proj, dx, gb.attn.w_proj, gb.attn.b_proj);
    const Matrix d_qkv = attention_core_backward(bt.qkv, blk.attn.heads, bt.attn, d_attn_out);
    const Matrix d_h1 = linear_backward(bt.h1, blk.attn.w_qkv, d_qkv, gb.attn.w_qkv, gb.attn.b_qkv);
    add_inplace(dx, ops::layernorm_backward(d_h1, blk.ln1_gain, bt.ln1, gb.ln1_gain, gb.ln1_bias));
  }

  for (std::size_t k = 0; k < c; ++k) {
    g.cls_token[k] += dx(0, k);
  }
  add_inplace(g.pos_embed, dx);
  Matrix d_embedded(l - 1, c);
  std::copy(dx.values().begin() + static_cast<std::ptrdiff_t>(c), dx.values().end(),
            d_embedded.values().begin());
  linear_backward(tape.patches, model.patch_embed, d_embedded, g.patch_embed, g.patch_embed_bias,
                  false);
}

void apply_freeze(Model& grads, const FreezeMask& freeze) {
  for (auto& t : tensors(grads))
    if (freeze.frozen(t.group)) std::fill(t.data.begin(), t.data.end(), 0.0);
}

void accumulate(Model& into, const Model& from) {
  auto dst = tensors(into);
  const auto src = tensors(from);
  for (std::size_t t = 0; t < dst.size(); ++t)
    for (std::size_t k = 0; k < dst[t].data.size(); ++k) dst[t].data[k] += src[t].data[k];
}

template <bool Parallel>
std::vector<TokenOutput> forward_impl(const Model& model, const ImageBatch& images) {
  check_batch(model, images);
  std::vector<TokenOutput> out(images.count);
  std::vector<std::exception_ptr> errors(images.count);
  const auto n = static_cast<std::ptrdiff_t>(images.count);
#pragma omp parallel for schedule(dynamic) if (Parallel)
  for (std::ptrdiff_t i = 0; i < n; ++i) {
    const auto s = static_cast<std::size_t>(i);
    try {
      out[s] = split_tokens(run_forward(model, images.image(s), nullptr));
    } catch (...) {
      errors[s] = std::current_exception();
    }
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

template <bool Parallel>
GradResult forward_backward_impl(const Model& model, const ImageBatch& images,
                                 std::span<const TokenOutput> teacher, const LossSpec& loss,
                                 std::span<const int> labels, const FreezeMask& freeze) {
  check_batch(model, images);
  if (teacher.size() != images.count) {
    throw DimensionError("forward_backward: " + std::to_string(teacher.size()) +
                         " teacher outputs for " + std::to_string(images.count) + " images");
  }
  const std::size_t n = images.count;
  const auto nn = static_cast<std::ptrdiff_t>(n);
  std::vector<Tape> tapes(n);
  std::vector<TokenOutput> student(n);
#pragma omp parallel for schedule(dynamic) if (Parallel)
  for (std::ptrdiff_t i = 0; i < nn; ++i) {
    const auto s = static_cast<std::size_t>(i);
    student[s] = split_tokens(run_forward(model, images.image(s), &tapes[s]));
  }

  std::vector<TokenOutput> d_out;
  GradResult result;
  result.loss = distill_loss(teacher, student, loss, labels, &d_out);

  const Model zero = zeros_like(model);
  std::vector<Model> per_sample(n);
#pragma omp parallel for schedule(dynamic) if (Parallel)
  for (std::ptrdiff_t i = 0; i < nn; ++i) {
    const auto s = static_cast<std::size_t>(i);
    per_sample[s] = zero;
    run_backward(model, tapes[s], d_out[s], per_sample[s]);
  }
  result.grads = zero;
  for (const Model& g : per_sample) accumulate(result.grads, g);
  apply_freeze(result.grads, freeze);
  return result;
}

}  // namespace

ImageBatch ImageBatch::subset(std::span<const std::size_t> indices) const {
  ImageBatch out;
  out.count = indices.size();
  out.channels = channels;
  out.height = height;
  out.width = width;
  out.pixels.reserve(indices.size() * image_size());
  for (std::size_t i : indices) {
    if (i >= count) throw BoundsError("ImageBatch::subset: index " + std::to_string(i) + " >= " + std::to_string(count));
    const auto img = image(i);
    out.pixels.insert(out.pixels.end(), img.begin(), img.end());
  }
  return out;
}

bool FreezeMask::frozen(TensorGroup g) const {
  switch (g) {
    case TensorGroup::embedding: return embedding;
    case TensorGroup::norm: return norm;
    case TensorGroup::attention: return attention;
    case TensorGroup::mlp: return mlp;
  }
  return false;
}

FreezeMask FreezeMask::parse(const std::string& groups) {
  FreezeMask mask;
  std::stringstream ss(groups);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "embedding") mask.embedding = true;
    else if (item == "norm") mask.norm = true;
    else if (item == "attention" || item == "attn") mask.attention = true;
    else if (item == "mlp") mask.mlp = true;
    else throw ValidationError("unknown tensor group '" + item + "'; expected embedding|norm|attention|mlp");
  }
  return mask;
}

namespace ops {

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
  return cdf + x * pdf;
}

Matrix layernorm(const Matrix& x, std::span<const double> gain, std::span<const double> bias,
                 LayerNormCache* cache) {
  const std::size_t c = x.cols();
  if (gain.size() != c || bias.size() != c) {
    throw DimensionError("layernorm: gain/bias length does not match " + x.shape_string());
  }
  Matrix y(x.rows(), c);
  if (cache != nullptr) {
    cache->normalized = Matrix(x.rows(), c);
    cache->inv_std.assign(x.rows(), 0.0);
  }
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    double mean = 0.0;
    for (double v : r) mean += v;
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (double v : r) var += (v - mean) * (v - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t k = 0; k < c; ++k) {
      const double xh = (r[k] - mean) * inv;
      if (cache != nullptr) cache->normalized(i, k) = xh;
      y(i, k) = xh * gain[k] + bias[k];
    }
    if (cache != nullptr) cache->inv_std[i] = inv;
  }
  return y;
}

Matrix layernorm_backward(const Matrix& dy, std::span<const double> gain,
                          const LayerNormCache& cache, std::span<double> dgain,
                          std::span<double> dbias) {
  const std::size_t c = dy.cols();
  const double inv_c = 1.0 / static_cast<double>(c);
  Matrix dx(dy.rows(), c);
  Vector dxh(c);
  for (std::size_t i = 0; i < dy.rows(); ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double xh = cache.normalized(i, k);
      dgain[k] += dy(i, k) * xh;
      dbias[k] += dy(i, k);
      dxh[k] = dy(i, k) * gain[k];
      mean_d += dxh[k];
      mean_dx += dxh[k] * xh;
    }
    mean_d *= inv_c;
    mean_dx *= inv_c;
    const double inv = cache.inv_std[i];
    for (std::size_t k = 0; k < c; ++k)
      dx(i, k) = inv * (dxh[k] - mean_d - cache.normalized(i, k) * mean_dx);
  }
  return dx;
}

Matrix softmax_rows(const Matrix& x) {
  Matrix y(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto r = x.row(i);
    if (r.empty()) continue;
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    auto out = y.row(i);
    for (std::size_t k = 0; k < r.size(); ++k) {
      out[k] = std::exp(r[k] - mx);
      z += out[k];
    }
    for (double& v : out) v /= z;
  }
  return y;
}

Matrix softmax_rows_backward(const Matrix& y, const Matrix& dy) {
  Matrix dx(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const double inner = dot(y.row(i), dy.row(i));
    for (std::size_t k = 0; k < y.cols(); ++k) dx(i, k) = y(i, k) * (dy(i, k) - inner);
  }
  return dx;
}

Matrix patchify(const ModelConfig& config, std::span<const double> image) {
  const std::size_t p = config.patch_size;
  const std::size_t g = config.grid();
  const std::size_t side = config.image_size;
  const std::size_t ch = config.channels;
  if (image.size() != ch * side * side) {
    throw DimensionError("patchify: image has " + std::to_string(image.size()) + " values, expected " +
                         std::to_string(ch * side * side));
  }
  Matrix out(g * g, config.patch_dim());
  for (std::size_t gy = 0; gy < g; ++gy) {
    for (std::size_t gx = 0; gx < g; ++gx) {
      auto row = out.row(gy * g + gx);
      std::size_t k = 0;
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t dy = 0; dy < p; ++dy)
          for (std::size_t dx = 0; dx < p; ++dx)
            row[k++] = image[(c * side + gy * p + dy) * side + gx * p + dx];
    }
  }
  return out;
}

}  // namespace ops

TokenOutput forward_sample(const Model& model, std::span<const double> image) {
  return split_tokens(run_forward(model, image, nullptr));
}

std::vector<Matrix> attention_maps(const Model& model, std::span<const double> image) {
  std::vector<Matrix> maps;
  run_forward(model, image, nullptr, &maps);
  return maps;
}

std::vector<TokenOutput> forward(const Model& model, const ImageBatch& images) {
  return forward_impl<true>(model, images);
}

GradResult forward_backward(const Model& model, const ImageBatch& images,
                            std::span<const TokenOutput> teacher, const LossSpec& loss,
                            std::span<const int> labels, const FreezeMask& freeze) {
  return forward_backward_impl<true>(model, images, teacher, loss, labels, freeze);
}

namespace serial {

std::vector<TokenOutput> forward(const Model& model, const ImageBatch& images) {
  return forward_impl<false>(model, images);
}

GradResult forward_backward(const Model& model, const ImageBatch& images,
                            std::span<const TokenOutput> teacher, const LossSpec& loss,
                            std::span<const int> labels, const FreezeMask& freeze) {
  return forward_backward_impl<false>(model, images, teacher, loss, labels, freeze);
}

}  // namespace serial
}  // namespace dgmr
