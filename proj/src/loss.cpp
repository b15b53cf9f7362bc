#include "dgmr/loss.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dgmr/error.hpp"

namespace dgmr {

void LossSpec::validate() const {
  if (!cls && !patch && !xent) throw ValidationError("loss spec: no loss term enabled");
  if (lambda_xent < 0.0) throw ValidationError("loss spec: lambda must be >= 0");
  if (xent && label_head == nullptr) {
    throw ValidationError("loss spec: xent term needs a label head (labeled dataset)");
  }
}

LossSpec LossSpec::parse(const std::string& terms, double lambda_xent) {
  LossSpec spec;
  spec.cls = spec.patch = spec.xent = false;
  spec.lambda_xent = lambda_xent;
  std::stringstream ss(terms);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item == "cls") spec.cls = true;
    else if (item == "patch") spec.patch = true;
    else if (item == "xent") spec.xent = true;
    else if (!item.empty()) throw ValidationError("unknown loss term '" + item + "'; expected cls|patch|xent");
  }
  if (!spec.cls && !spec.patch && !spec.xent) throw ValidationError("loss: no terms given");
  if (lambda_xent < 0.0) throw ValidationError("loss: lambda must be >= 0");
  return spec;
}

std::string LossSpec::terms_string() const {
  std::string s;
  auto add = [&](const char* t) {
    if (!s.empty()) s += ',';
    s += t;
  };
  if (cls) add("cls");
  if (patch) add("patch");
  if (xent) add("xent");
  return s;
}

LossParts distill_loss(std::span<const TokenOutput> teacher, std::span<const TokenOutput> student,
                       const LossSpec& spec, std::span<const int> labels,
                       std::vector<TokenOutput>* grad) {
  spec.validate();
  if (teacher.size() != student.size() || student.empty()) {
    throw DimensionError("distill_loss: batch sizes differ (" + std::to_string(teacher.size()) +
                         " teacher vs " + std::to_string(student.size()) + " student)");
  }
  if (spec.xent && labels.size() != student.size()) {
    throw ValidationError("distill_loss: xent term needs one label per sample");
  }
  const double batch = static_cast<double>(student.size());

  LossParts parts;
  if (grad != nullptr) grad->assign(student.size(), {});
  for (std::size_t s = 0; s < student.size(); ++s) {
    const TokenOutput& t = teacher[s];
    const TokenOutput& o = student[s];
    if (t.cls.size() != o.cls.size() || t.patch.rows() != o.patch.rows() ||
        t.patch.cols() != o.patch.cols() || o.patch.cols() != o.cls.size()) {
      throw DimensionError("distill_loss: sample " + std::to_string(s) + " shape mismatch, teacher " +
                           t.patch.shape_string() + " vs student " + o.patch.shape_string());
    }
    const double c = static_cast<double>(o.cls.size());
    const double lc = static_cast<double>(o.patch.size());

    double cls_sq = 0.0;
    for (std::size_t k = 0; k < o.cls.size(); ++k) {
      const double d = o.cls[k] - t.cls[k];
      cls_sq += d * d;
    }
    double patch_sq = 0.0;
    const auto tp = t.patch.values();
    const auto op = o.patch.values();
    for (std::size_t k = 0; k < op.size(); ++k) {
      const double d = op[k] - tp[k];
      patch_sq += d * d;
    }
    parts.cls += cls_sq / c / batch;
    parts.patch += patch_sq / lc / batch;

    TokenOutput* g = grad != nullptr ? &(*grad)[s] : nullptr;
    if (g != nullptr) {
      g->cls.assign(o.cls.size(), 0.0);
      g->patch = Matrix(o.patch.rows(), o.patch.cols());
      if (spec.cls) {
        for (std::size_t k = 0; k < o.cls.size(); ++k) g->cls[k] = 2.0 * (o.cls[k] - t.cls[k]) / (c * batch);
      }
      if (spec.patch) {
        auto gp = g->patch.values();
        for (std::size_t k = 0; k < op.size(); ++k) gp[k] = 2.0 * (op[k] - tp[k]) / (lc * batch);
      }
    }

    if (spec.xent) {
      const Matrix& head = *spec.label_head;
      if (head.cols() != o.cls.size()) {
        throw DimensionError("distill_loss: label head " + head.shape_string() +
                             " does not match embedding size " + std::to_string(o.cls.size()));
      }
      const int label = labels[s];
      if (label < 0 || static_cast<std::size_t>(label) >= head.rows()) {
        throw BoundsError("distill_loss: label " + std::to_string(label) + " outside [0, " +
                          std::to_string(head.rows()) + ")");
      }
      Vector logits(head.rows());
      for (std::size_t r = 0; r < head.rows(); ++r) logits[r] = dot(head.row(r), o.cls);
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (double& v : logits) {
        v = std::exp(v - mx);
        z += v;
      }
      for (double& v : logits) v /= z;
      const auto y = static_cast<std::size_t>(label);
      parts.xent += -std::log(std::max(logits[y], 1e-300)) / batch;
      if (g != nullptr) {
        for (std::size_t r = 0; r < head.rows(); ++r) {
          const double coef = spec.lambda_xent * (logits[r] - (r == y ? 1.0 : 0.0)) / batch;
          const auto hr = head.row(r);
          for (std::size_t k = 0; k < hr.size(); ++k) g->cls[k] += coef * hr[k];
        }
      }
    }
  }
  if (spec.cls) parts.total += parts.cls;
  if (spec.patch) parts.total += parts.patch;
  if (spec.xent) parts.total += spec.lambda_xent * parts.xent;
  return parts;
}

}  // namespace dgmr
