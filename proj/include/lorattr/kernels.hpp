#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "lorattr/linalg.hpp"
#include "lorattr/network.hpp"

namespace lorattr {

/// Per-output backprop sensitivities for one input, reusable across kernel pairs.
struct TangentFeatures {
  ActivationTrace trace;
  std::vector<Backprop> per_output;  // one reverse pass per output coordinate
};

TangentFeatures tangent_features(const Network& net, std::span<const double> x);

/// <grad_theta f_k(x), grad_theta f_k'(x')> over trainable groups, from factored
/// backprop terms (never materialises per-parameter gradients).
double empirical_ntk(const Network& net, const TangentFeatures& fx, const TangentFeatures& fxp,
                     std::size_t k, std::size_t k_prime);
double empirical_ntk(const Network& net, std::span<const double> x, std::span<const double> x_prime,
                     std::size_t k);

/// Output-space kernel block K(x, x') (n_L × n_L).
Matrix empirical_ntk_matrix(const Network& net, const TangentFeatures& fx, const TangentFeatures& fxp);
Matrix empirical_ntk_matrix(const Network& net, std::span<const double> x, std::span<const double> x_prime);

/// Layer-wise analytic recursion evaluated on finite-width traces. Index i is the
/// kernel of pre-activation y^(i): kernel[0] = <x, x'>, then
/// kernel[i] = kernel[i-1] * sigma_dot[i] + sigma[i].
/// Under NTK parameterisation each inner product is divided by that layer's fan-in.
struct AnalyticKernel {
  Vector sigma;
  Vector sigma_dot;  // sigma_dot[0] unused (0)
  Vector kernel;

  double top() const { return kernel.back(); }
};

AnalyticKernel analytic_ntk_ff(const ActivationTrace& tx, const ActivationTrace& txp, bool use_bias = false);

struct AdapterFactor {
  std::size_t layer = 0;
  Matrix a;
  double scaling = 1.0;  // multiplies B A in the forward pass; enters the kernel squared
};

std::vector<AdapterFactor> adapter_factors(const Network& net);

AnalyticKernel analytic_ntk_lora(const ActivationTrace& tx, const ActivationTrace& txp,
                                 std::span<const AdapterFactor> adapters, bool use_bias = false);

/// sigma(y^(l-1)(x))^T (A^T A - I) sigma(y^(l-1)(x')), i.e. evaluated on the input of `layer`.
double delta_r(const ActivationTrace& tx, const ActivationTrace& txp, const Matrix& a, std::size_t layer);

/// A^T A - I.
Matrix m_delta(const Matrix& a);

/// Gram matrices of each layer's input over a batch: [0] = X^T X', [l] = post-activations of l-1.
std::vector<Matrix> gp_cov(std::span<const ActivationTrace> traces);

enum class KernelMode { ff, lora };

struct KernelReport {
  KernelMode mode = KernelMode::ff;
  std::size_t layer = 0;  // top layer index the analytic recursion ends at
  Vector empirical;       // per output k, diagonal K_kk(x, x')
  AnalyticKernel analytic;
  double delta = 0.0;     // delta_r on the first adapted layer (0 in ff mode)
};

KernelReport kernel_report(const Network& net, std::span<const double> x, std::span<const double> x_prime);
std::string to_json(const KernelReport& report);

}  // namespace lorattr
