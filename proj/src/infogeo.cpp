#include "lorattr/infogeo.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <sstream>
#include <thread>

#include "lorattr/errors.hpp"
#include "lorattr/kernels.hpp"
#include "lorattr/rng.hpp"

namespace lorattr {

namespace {

void require_data(const LabeledDataset& data) {
  if (data.empty()) throw DataError("fisher: empty dataset");
}

}  // namespace

double fisher_scalar(const Network& net, const LabeledDataset& data, Loss loss) {
  require_data(data);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const ForwardResult fr = net.forward(data.inputs[i]);
    const Vector g = loss_grad_output(fr.output, data.labels[i], loss);
    total += net.gradient(fr.trace, g).squared_norm();
  }
  return total / static_cast<double>(data.size());
}

double fisher_scalar_via_kernel(const Network& net, const LabeledDataset& data, Loss loss) {
  require_data(data);
  double total = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TangentFeatures f = tangent_features(net, data.inputs[i]);
    const Vector out = f.trace.layers.back().post;
    const Vector g = loss_grad_output(out, data.labels[i], loss);
    const Matrix k = empirical_ntk_matrix(net, f, f);
    total += dot(g, matvec(k, g));
  }
  return total / static_cast<double>(data.size());
}

Matrix psd_sqrt(const Matrix& m, double tol) {
  const EigenDecomposition eig = sym_eig(m);
  double scale = 0.0;
  for (double v : eig.values) scale = std::max(scale, std::abs(v));
  const std::size_t n = m.rows();
  Vector root(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (eig.values[i] < -tol * std::max(scale, 1.0))
      throw NumericalError("psd_sqrt: matrix has eigenvalue " + std::to_string(eig.values[i]));
    root[i] = std::sqrt(std::max(eig.values[i], 0.0));
  }
  Matrix out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < n; ++c) s += eig.vectors(i, c) * root[c] * eig.vectors(j, c);
      out(i, j) = s;
      out(j, i) = s;
    }
  return out;
}

Matrix output_fisher_matrix(const Network& net, const LabeledDataset& data, Loss loss) {
  require_data(data);
  const std::size_t n = net.output_dim();
  Matrix phi(n, n);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const TangentFeatures f = tangent_features(net, data.inputs[i]);
    const Vector g = loss_grad_output(f.trace.layers.back().post, data.labels[i], loss);
    const Vector h = matvec(psd_sqrt(empirical_ntk_matrix(net, f, f)), g);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) phi(r, c) += h[r] * h[c];
  }
  phi *= 1.0 / static_cast<double>(data.size());
  return phi;
}

Vector clamp_spectrum(std::span<const double> eigenvalues) {
  double scale = 1.0;
  for (double v : eigenvalues) scale = std::max(scale, std::abs(v));
  Vector out(eigenvalues.begin(), eigenvalues.end());
  for (double& v : out) {
    if (!std::isfinite(v)) throw NumericalError("spectrum: non-finite eigenvalue");
    if (v < -1e-10 * scale) throw NumericalError("spectrum: negative eigenvalue " + std::to_string(v));
    if (v < 0.0) v = 0.0;
  }
  return out;
}

InformationBits information_bits(std::span<const double> spectrum) {
  InformationBits ib;
  for (double v : spectrum) {
    if (v <= 0.0) continue;
    ib.paper += 0.5 * v;
    ib.logdet += 0.5 * std::log(v);
  }
  return ib;
}

namespace {

Vector positive_part(std::span<const double> spectrum, bool normalized) {
  Vector p;
  double sum = 0.0;
  for (double v : spectrum)
    if (v > 0.0) {
      p.push_back(v);
      sum += v;
    }
  if (p.empty()) throw NumericalError("entropy undefined for an all-zero spectrum");
  if (normalized)
    for (double& v : p) v /= sum;
  return p;
}

}  // namespace

double shannon_entropy(std::span<const double> spectrum, bool normalized) {
  const Vector p = positive_part(spectrum, normalized);
  double h = 0.0;
  for (double v : p) h -= v * std::log(v);
  return h;
}

double renyi_entropy(std::span<const double> spectrum, double alpha, bool normalized) {
  if (!(alpha >= 0.0)) throw ConfigError("renyi: alpha must be nonnegative");
  if (alpha == 1.0) return shannon_entropy(spectrum, normalized);
  const Vector p = positive_part(spectrum, normalized);
  if (std::isinf(alpha)) return -std::log(*std::max_element(p.begin(), p.end()));
  if (alpha == 0.0) return std::log(static_cast<double>(p.size()));
  // log sum p^alpha, shifted by the largest exponent to avoid under/overflow
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : p) peak = std::max(peak, alpha * std::log(v));
  double acc = 0.0;
  for (double v : p) acc += std::exp(alpha * std::log(v) - peak);
  return (peak + std::log(acc)) / (1.0 - alpha);
}

SpectrumReport spectrum_report(std::span<const double> eigenvalues, std::span<const double> alphas) {
  SpectrumReport r;
  r.eigenvalues = clamp_spectrum(eigenvalues);
  r.ib = information_bits(r.eigenvalues);
  for (double a : alphas) r.renyi[a] = renyi_entropy(r.eigenvalues, a, true);
  r.shannon_normalized = shannon_entropy(r.eigenvalues, true);
  r.shannon_unnormalized = shannon_entropy(r.eigenvalues, false);
  return r;
}

std::string to_json(const SpectrumReport& report) {
  nlohmann::ordered_json j;
  j["eigenvalues"] = report.eigenvalues;
  j["ib_paper"] = report.ib.paper;
  j["ib_logdet"] = report.ib.logdet;
  nlohmann::ordered_json renyi = nlohmann::ordered_json::array();
  for (const auto& [alpha, h] : report.renyi) renyi.push_back({{"alpha", alpha}, {"h", h}});
  j["renyi"] = renyi;
  j["shannon_normalized"] = report.shannon_normalized;
  j["shannon_unnormalized"] = report.shannon_unnormalized;
  return j.dump(2);
}

Vector nonzero_gram_spectrum(const Matrix& a) { return clamp_spectrum(sym_eigvals(gram_of_rows(a))); }

namespace {

void mean_std(const Vector& v, double& mean, double& sd) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
}

ManifoldCell compute_cell(std::size_t n, std::size_t rank, double scale, std::size_t trials,
                          std::uint64_t cell_seed, InitDistribution dist) {
  ManifoldCell cell;
  cell.rank = rank;
  cell.scale = scale;
  cell.trials = trials;
  double eig_total = 0.0;
  std::size_t eig_count = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const Matrix a = sample_matrix(rank, n, InitSpec{dist, scale, Rng::derive(cell_seed, t)});
    const Vector spectrum = nonzero_gram_spectrum(a);
    for (double v : spectrum)
      if (v > 0.0) {
        eig_total += v;
        ++eig_count;
      }
    cell.h1_norm_trials.push_back(shannon_entropy(spectrum, true));
    cell.h1_unnorm_trials.push_back(shannon_entropy(spectrum, false));
  }
  mean_std(cell.h1_norm_trials, cell.h1_norm_mean, cell.h1_norm_std);
  mean_std(cell.h1_unnorm_trials, cell.h1_unnorm_mean, cell.h1_unnorm_std);
  cell.mean_nonzero_eig = eig_count ? eig_total / static_cast<double>(eig_count) : 0.0;
  return cell;
}

}  // namespace

std::vector<ManifoldCell> entropy_manifold(std::size_t n, std::span<const std::size_t> ranks,
                                           std::span<const double> scales, std::size_t trials,
                                           std::uint64_t seed, InitDistribution dist, std::size_t workers) {
  if (trials == 0) throw ConfigError("manifold: trials must be >= 1");
  for (std::size_t r : ranks)
    if (r == 0 || r > n) throw ConfigError("manifold: ranks must lie in [1, n]");
  for (double s : scales)
    if (!(s > 0.0)) throw ConfigError("manifold: scales must be positive");

  const std::size_t cells = ranks.size() * scales.size();
  std::vector<ManifoldCell> out(cells);
  auto run = [&](std::size_t ci) {
    const std::size_t ri = ci / scales.size();
    const std::size_t si = ci % scales.size();
    out[ci] = compute_cell(n, ranks[ri], scales[si], trials, Rng::derive(seed, ci), dist);
  };
  workers = std::max<std::size_t>(1, std::min(workers, cells));
  if (workers == 1) {
    for (std::size_t ci = 0; ci < cells; ++ci) run(ci);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t ci = w; ci < cells; ci += workers) run(ci);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

std::string manifold_csv(std::span<const ManifoldCell> cells) {
  std::ostringstream out;
  out << kManifoldCsvHeader << '\n';
  char buf[512];
  for (const auto& c : cells) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", c.rank, c.scale, c.trials,
                  c.h1_norm_mean, c.h1_norm_std, c.h1_unnorm_mean, c.h1_unnorm_std, c.mean_nonzero_eig);
    out << buf;
  }
  return out.str();
}

}  // namespace lorattr
