#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lorattr/attacks.hpp"
#include "lorattr/linalg.hpp"
#include "lorattr/network.hpp"

namespace lorattr {

/// Mean squared norm of the parameter-space loss gradient, accumulated from
/// materialised per-parameter gradients.
double fisher_scalar(const Network& net, const LabeledDataset& data, Loss loss);

/// Same quantity through the output-space kernel: mean of g^T K(x, x) g with
/// g = dL/d(output).
double fisher_scalar_via_kernel(const Network& net, const LabeledDataset& data, Loss loss);

/// Symmetric PSD square root through the eigendecomposition. Eigenvalues below
/// -tol * max|lambda| raise NumericalError; the rest are clamped at 0.
Matrix psd_sqrt(const Matrix& m, double tol = 1e-10);

/// Phi = mean_x h h^T, h = K(x,x)^{1/2} g(x). trace(Phi) equals fisher_scalar.
Matrix output_fisher_matrix(const Network& net, const LabeledDataset& data, Loss loss);

/// Spectrum preparation: eigenvalues >= -1e-10 clamped to 0, anything lower rejected.
Vector clamp_spectrum(std::span<const double> eigenvalues);

struct InformationBits {
  double paper = 0.0;   // 1/2 sum of positive eigenvalues
  double logdet = 0.0;  // 1/2 sum of log positive eigenvalues
};

InformationBits information_bits(std::span<const double> spectrum);

/// Renyi entropy. normalized: applied to P = lambda / sum(lambda). alpha == 1 dispatches
/// to Shannon, alpha == +inf gives -log max P. Zero eigenvalues never enter a sum.
double renyi_entropy(std::span<const double> spectrum, double alpha, bool normalized);
double shannon_entropy(std::span<const double> spectrum, bool normalized);

struct SpectrumReport {
  Vector eigenvalues;
  InformationBits ib;
  std::map<double, double> renyi;  // alpha -> normalized H_alpha
  double shannon_normalized = 0.0;
  double shannon_unnormalized = 0.0;
};

SpectrumReport spectrum_report(std::span<const double> eigenvalues, std::span<const double> alphas);
std::string to_json(const SpectrumReport& report);

/// Nonzero eigenvalues of A^T A, read from the r × r Gram A A^T (the remaining n - r are 0).
Vector nonzero_gram_spectrum(const Matrix& a);

struct ManifoldCell {
  std::size_t rank = 0;
  double scale = 0.0;
  std::size_t trials = 0;
  double h1_norm_mean = 0.0;
  double h1_norm_std = 0.0;
  double h1_unnorm_mean = 0.0;
  double h1_unnorm_std = 0.0;
  double mean_nonzero_eig = 0.0;
  // per-trial values, kept for per-seed checks
  Vector h1_norm_trials;
  Vector h1_unnorm_trials;
};

/// For each (rank, scale) cell: A (r × n) drawn with variance scale/n, Shannon entropy
/// of the spectrum of A^T A over `trials` draws. Cells are ordered rank-major.
/// Each cell gets an independent seed derived from (seed, cell index).
std::vector<ManifoldCell> entropy_manifold(std::size_t n, std::span<const std::size_t> ranks,
                                           std::span<const double> scales, std::size_t trials,
                                           std::uint64_t seed,
                                           InitDistribution dist = InitDistribution::kaiming_uniform,
                                           std::size_t workers = 1);

inline constexpr const char* kManifoldCsvHeader =
    "rank,scale,trials,h1_norm_mean,h1_norm_std,h1_unnorm_mean,h1_unnorm_std,mean_nonzero_eig";

std::string manifold_csv(std::span<const ManifoldCell> cells);

}  // namespace lorattr
