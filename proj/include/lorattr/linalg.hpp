#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace lorattr {

using Vector = std::vector<double>;

/// Dense real matrix, row-major.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> entries);

  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool square() const noexcept { return rows_ == cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> entries() noexcept { return data_; }
  std::span<const double> entries() const noexcept { return data_; }

  Matrix transpose() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool operator==(const Matrix& other) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(double s, Matrix a);

Matrix matmul(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
/// aᵀ·x without forming the transpose.
Vector matvec_transposed(const Matrix& a, std::span<const double> x);
/// aᵀa (cols × cols).
Matrix gram_of_columns(const Matrix& a);
/// a·aᵀ (rows × rows).
Matrix gram_of_rows(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
double frobenius_norm(const Matrix& m);
double max_abs(const Matrix& m);
bool all_finite(const Matrix& m);

/// Max |m(i,j) - m(j,i)| <= tol_rel * ||m||_F (absolute floor for the zero matrix).
bool is_symmetric(const Matrix& m, double tol_rel = 1e-9);

struct EigenDecomposition {
  Vector values;   // ascending
  Matrix vectors;  // orthonormal columns, column i pairs with values[i]
};

/// Symmetric eigendecomposition. Cyclic Jacobi up to kJacobiMaxDim, Householder
/// tridiagonalisation + implicit QR (Eigen) above that.
EigenDecomposition sym_eig(const Matrix& m);
Vector sym_eigvals(const Matrix& m);

/// Cyclic Jacobi with a fixed (p, q) sweep order; usable at any size but O(n^3) per sweep.
EigenDecomposition sym_eig_jacobi(const Matrix& m);

inline constexpr std::size_t kJacobiMaxDim = 128;

/// True iff the largest eigenvalue of the symmetric matrix is <= tol.
bool is_nsd(const Matrix& m, double tol);

enum class InitDistribution { kaiming_uniform, gaussian, xavier_normal, zero, identity };

std::string_view to_string(InitDistribution d);
InitDistribution parse_init_distribution(std::string_view name);

struct InitSpec {
  InitDistribution distribution = InitDistribution::kaiming_uniform;
  double scale = 1.0;  // k
  std::uint64_t seed = 0;
};

/// Per-entry variance for the given fan-in/fan-out:
/// k/fan_in (kaiming-uniform, gaussian), 2k/(fan_in+fan_out) (xavier-normal), 0 otherwise.
double target_variance(const InitSpec& init, std::size_t fan_in, std::size_t fan_out);

/// rows × cols with fan_in = cols, fan_out = rows.
Matrix sample_matrix(std::size_t rows, std::size_t cols, const InitSpec& init);

/// Same distributions, explicit per-entry variance (used for NTK-parameterised weights).
Matrix sample_matrix_with_variance(std::size_t rows, std::size_t cols, InitDistribution dist,
                                   double variance, std::uint64_t seed);

}  // namespace lorattr
