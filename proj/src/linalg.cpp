#include "lorattr/linalg.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "lorattr/errors.hpp"
#include "lorattr/rng.hpp"

namespace lorattr {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries)
    : rows_(rows), cols_(cols), data_(std::move(entries)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix: " + std::to_string(rows) + "x" + std::to_string(cols) +
                         " needs " + std::to_string(rows * cols) + " entries, got " +
                         std::to_string(data_.size()));
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::transpose() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) throw DimensionError("matrix add: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  if (rows_ != other.rows_ || cols_ != other.cols_) throw DimensionError("matrix sub: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(double s, Matrix a) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto out_row = out.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto b_row = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) out_row[j] += aik * b_row[j];
    }
  }
  return out;
}

Vector matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: vector length differs from cols");
  Vector out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), x);
  return out;
}

Vector matvec_transposed(const Matrix& a, std::span<const double> x) {
  if (a.rows() != x.size()) throw DimensionError("matvec_transposed: vector length differs from rows");
  Vector out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double xi = x[i];
    if (xi == 0.0) continue;
    auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += xi * r[j];
  }
  return out;
}

Matrix gram_of_columns(const Matrix& a) {
  Matrix g(a.cols(), a.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto r = a.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ri = r[i];
      if (ri == 0.0) continue;
      auto g_row = g.row(i);
      for (std::size_t j = i; j < a.cols(); ++j) g_row[j] += ri * r[j];
    }
  }
  for (std::size_t i = 0; i < a.cols(); ++i)
    for (std::size_t j = 0; j < i; ++j) g(i, j) = g(j, i);
  return g;
}

Matrix gram_of_rows(const Matrix& a) {
  Matrix g(a.rows(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = i; j < a.rows(); ++j) {
      const double v = dot(a.row(i), a.row(j));
      g(i, j) = v;
      g(j, i) = v;
    }
  return g;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double frobenius_norm(const Matrix& m) { return norm2(m.entries()); }

double max_abs(const Matrix& m) {
  double best = 0.0;
  for (double v : m.entries()) best = std::max(best, std::abs(v));
  return best;
}

bool all_finite(const Matrix& m) {
  return std::all_of(m.entries().begin(), m.entries().end(), [](double v) { return std::isfinite(v); });
}

bool is_symmetric(const Matrix& m, double tol_rel) {
  if (!m.square()) return false;
  const double tol = tol_rel * frobenius_norm(m);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = i + 1; j < m.cols(); ++j)
      if (std::abs(m(i, j) - m(j, i)) > tol) return false;
  return true;
}

namespace {

Matrix checked_symmetric_copy(const Matrix& m) {
  if (!m.square()) throw DimensionError("eigensolver: matrix is not square");
  if (!is_symmetric(m)) throw SymmetryError("eigensolver: matrix is not symmetric");
  Matrix s = m;
  for (std::size_t i = 0; i < s.rows(); ++i)
    for (std::size_t j = i + 1; j < s.cols(); ++j) {
      const double avg = 0.5 * (s(i, j) + s(j, i));
      s(i, j) = avg;
      s(j, i) = avg;
    }
  return s;
}

EigenDecomposition sorted(Vector values, const Matrix& vectors) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  EigenDecomposition out{Vector(n), Matrix(n, n)};
  for (std::size_t c = 0; c < n; ++c) {
    out.values[c] = values[order[c]];
    for (std::size_t r = 0; r < n; ++r) out.vectors(r, c) = vectors(r, order[c]);
  }
  return out;
}

using RowMajorMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace

EigenDecomposition sym_eig_jacobi(const Matrix& m) {
  Matrix a = checked_symmetric_copy(m);
  const std::size_t n = a.rows();
  Matrix v = Matrix::identity(n);
  const double scale = frobenius_norm(a);

  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off == 0.0 || std::sqrt(off) <= 1e-15 * scale) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p);
          const double akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k);
          const double aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  Vector values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
  return sorted(std::move(values), v);
}

EigenDecomposition sym_eig(const Matrix& m) {
  if (m.rows() <= kJacobiMaxDim) return sym_eig_jacobi(m);
  const Matrix s = checked_symmetric_copy(m);
  const std::size_t n = s.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(RowMajorMap(s.entries().data(), n, n));
  if (solver.info() != Eigen::Success) throw NumericalError("eigensolver did not converge");
  EigenDecomposition out{Vector(n), Matrix(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    out.values[i] = solver.eigenvalues()(static_cast<Eigen::Index>(i));
    for (std::size_t r = 0; r < n; ++r)
      out.vectors(r, i) = solver.eigenvectors()(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i));
  }
  return out;
}

Vector sym_eigvals(const Matrix& m) {
  if (m.rows() <= kJacobiMaxDim) return sym_eig_jacobi(m).values;
  const Matrix s = checked_symmetric_copy(m);
  const std::size_t n = s.rows();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(RowMajorMap(s.entries().data(), n, n),
                                                        Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw NumericalError("eigensolver did not converge");
  Vector values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = solver.eigenvalues()(static_cast<Eigen::Index>(i));
  return values;
}

bool is_nsd(const Matrix& m, double tol) {
  const Vector values = sym_eigvals(m);
  return values.empty() || values.back() <= tol;
}

std::string_view to_string(InitDistribution d) {
  switch (d) {
    case InitDistribution::kaiming_uniform: return "kaiming-uniform";
    case InitDistribution::gaussian: return "gaussian";
    case InitDistribution::xavier_normal: return "xavier-normal";
    case InitDistribution::zero: return "zero";
    case InitDistribution::identity: return "identity";
  }
  return "unknown";
}

InitDistribution parse_init_distribution(std::string_view name) {
  if (name == "kaiming-uniform") return InitDistribution::kaiming_uniform;
  if (name == "gaussian") return InitDistribution::gaussian;
  if (name == "xavier-normal") return InitDistribution::xavier_normal;
  if (name == "zero") return InitDistribution::zero;
  if (name == "identity") return InitDistribution::identity;
  throw ConfigError("unknown init distribution '" + std::string(name) + "'");
}

double target_variance(const InitSpec& init, std::size_t fan_in, std::size_t fan_out) {
  switch (init.distribution) {
    case InitDistribution::kaiming_uniform:
    case InitDistribution::gaussian:
      return init.scale / static_cast<double>(fan_in);
    case InitDistribution::xavier_normal:
      return init.scale * 2.0 / static_cast<double>(fan_in + fan_out);
    case InitDistribution::zero:
    case InitDistribution::identity:
      return 0.0;
  }
  return 0.0;
}

Matrix sample_matrix_with_variance(std::size_t rows, std::size_t cols, InitDistribution dist,
                                   double variance, std::uint64_t seed) {
  if (rows == 0 || cols == 0) throw DimensionError("sample_matrix: rows and cols must be >= 1");
  if (dist == InitDistribution::zero) return Matrix(rows, cols);
  if (dist == InitDistribution::identity) {
    if (rows != cols) throw DimensionError("sample_matrix: identity requires rows == cols");
    return Matrix::identity(rows);
  }
  if (!(variance > 0.0) || !std::isfinite(variance))
    throw ConfigError("sample_matrix: variance scale must be positive");

  Matrix m(rows, cols);
  Rng rng(seed);
  if (dist == InitDistribution::kaiming_uniform) {
    const double bound = std::sqrt(3.0 * variance);
    for (double& v : m.entries()) v = rng.uniform(-bound, bound);
  } else {
    const double sd = std::sqrt(variance);
    for (double& v : m.entries()) v = sd * rng.normal();
  }
  return m;
}

Matrix sample_matrix(std::size_t rows, std::size_t cols, const InitSpec& init) {
  if (init.distribution == InitDistribution::identity) {
    Matrix m = sample_matrix_with_variance(rows, cols, init.distribution, 0.0, init.seed);
    m *= init.scale;
    return m;
  }
  return sample_matrix_with_variance(rows, cols, init.distribution, target_variance(init, cols, rows),
                                     init.seed);
}

}  // namespace lorattr
