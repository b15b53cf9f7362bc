#include "dgmr/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "dgmr/error.hpp"

namespace dgmr {
namespace {

void require_product_shapes(const Matrix& a, std::size_t b_rows, const Matrix& b, const char* op) {
  if (a.cols() != b_rows) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " x " +
                         b.shape_string());
  }
}

// c_row = a_row * b, accumulating over k in ascending order.
inline void product_row(const Matrix& a, const Matrix& b, std::size_t i, double* c_row) {
  const std::size_t n = b.cols();
  const double* a_row = a.row(i).data();
  std::fill(c_row, c_row + n, 0.0);
  for (std::size_t k = 0; k < a.cols(); ++k) {
    const double aik = a_row[k];
    const double* b_row = b.row(k).data();
    for (std::size_t j = 0; j < n; ++j) c_row[j] += aik * b_row[j];
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("from_rows: ragged initializer");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

std::string Matrix::shape_string() const {
  std::ostringstream os;
  os << '[' << rows_ << 'x' << cols_ << ']';
  return os.str();
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length mismatch " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double frobenius_norm(const Matrix& m) {
  double s = 0.0;
  for (double x : m.values()) s += x * x;
  return std::sqrt(s);
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) t(j, i) = m(i, j);
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_product_shapes(a, b.rows(), b, "matmul");
  Matrix c(a.rows(), b.cols());
  const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    product_row(a, b, static_cast<std::size_t>(i), c.row(static_cast<std::size_t>(i)).data());
  }
  return c;
}

Matrix matmul_transposed(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_transposed: shape mismatch " + a.shape_string() + " x " +
                         b.shape_string() + "^T");
  }
  Matrix c(a.rows(), b.rows());
  const auto rows = static_cast<std::ptrdiff_t>(a.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto a_row = a.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < b.rows(); ++j) c(static_cast<std::size_t>(i), j) = dot(a_row, b.row(j));
  }
  return c;
}

Vector row_l2_norms(const Matrix& m) {
  Vector out(m.rows());
  const auto rows = static_cast<std::ptrdiff_t>(m.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < rows; ++i) {
    const auto r = m.row(static_cast<std::size_t>(i));
    out[static_cast<std::size_t>(i)] = std::sqrt(dot(r, r));
  }
  return out;
}

void eliminate_component_inplace(Matrix& v_set, std::size_t j, double eps) {
  if (j >= v_set.rows()) {
    throw BoundsError("eliminate_component: pivot " + std::to_string(j) + " out of range for " +
                      v_set.shape_string());
  }
  const Vector pivot(v_set.row(j).begin(), v_set.row(j).end());
  const double pivot_sq = dot(pivot, pivot);
  if (!(pivot_sq > eps)) {
    throw DegeneratePivotError("eliminate_component: pivot row " + std::to_string(j) +
                               " has squared norm " + std::to_string(pivot_sq) +
                               " <= eps " + std::to_string(eps));
  }
  const auto rows = static_cast<std::ptrdiff_t>(v_set.rows());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < rows; ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    auto r = v_set.row(i);
    if (i == j) {
      std::fill(r.begin(), r.end(), 0.0);
      continue;
    }
    const double coef = dot(r, pivot) / pivot_sq;
    for (std::size_t k = 0; k < r.size(); ++k) r[k] -= coef * pivot[k];
  }
}

Matrix eliminate_component(const Matrix& v_set, std::size_t j, double eps) {
  Matrix out = v_set;
  eliminate_component_inplace(out, j, eps);
  return out;
}

Vector sym_eig_descending(const Matrix& s) {
  if (s.rows() != s.cols()) {
    throw DimensionError("sym_eig_descending: matrix not square " + s.shape_string());
  }
  const std::size_t n = s.rows();
  const double scale = frobenius_norm(s);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      if (std::abs(s(i, j) - s(j, i)) > 1e-9 * scale) {
        throw DimensionError("sym_eig_descending: matrix not symmetric at (" + std::to_string(i) +
                             "," + std::to_string(j) + ")");
      }
    }
  }

  Matrix a = s;
  // symmetrize exactly so rotations act on one consistent triangle
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (s(i, j) + s(j, i));

  auto off_norm = [&] {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) acc += a(i, j) * a(i, j);
    return std::sqrt(acc);
  };

  const double tol = 1e-10 * scale;
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps && off_norm() >= tol && scale > 0.0; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        // Rutishauser's stable rotation angle
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - sn * akq;
          a(k, q) = sn * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - sn * aqk;
          a(q, k) = sn * apk + c * aqk;
        }
      }
    }
  }

  Vector eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

namespace serial {

Matrix matmul(const Matrix& a, const Matrix& b) {
  require_product_shapes(a, b.rows(), b, "matmul");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) product_row(a, b, i, c.row(i).data());
  return c;
}

Vector row_l2_norms(const Matrix& m) {
  Vector out(m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    double s = 0.0;
    for (double x : m.row(i)) s += x * x;
    out[i] = std::sqrt(s);
  }
  return out;
}

}  // namespace serial
}  // namespace dgmr
