#include "lorattr/kernels.hpp"

#include <nlohmann/json.hpp>

#include "lorattr/errors.hpp"

namespace lorattr {

TangentFeatures tangent_features(const Network& net, std::span<const double> x) {
  TangentFeatures f;
  f.trace = net.forward(x).trace;
  f.per_output.reserve(net.output_dim());
  Vector e(net.output_dim(), 0.0);
  for (std::size_t k = 0; k < net.output_dim(); ++k) {
    e.assign(net.output_dim(), 0.0);
    e[k] = 1.0;
    f.per_output.push_back(net.backward(f.trace, e));
  }
  return f;
}

double empirical_ntk(const Network& net, const TangentFeatures& fx, const TangentFeatures& fxp,
                     std::size_t k, std::size_t k_prime) {
  if (k >= net.output_dim() || k_prime >= net.output_dim())
    throw DimensionError("empirical_ntk: output index out of range");
  const Backprop& bx = fx.per_output[k];
  const Backprop& bxp = fxp.per_output[k_prime];
  double total = 0.0;
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const Layer& layer = net.layer(l);
    const LayerTrace& tx = fx.trace.layers[l];
    const LayerTrace& txp = fxp.trace.layers[l];
    const LayerSensitivity& sx = bx.layers[l];
    const LayerSensitivity& sxp = bxp.layers[l];
    const double s2 = layer.forward_scale * layer.forward_scale;
    const double dd = dot(sx.delta, sxp.delta);
    if (layer.weight_trainable) total += s2 * dd * dot(tx.input, txp.input);
    if (layer.bias_trainable && !layer.bias.empty()) total += dd;
    if (layer.adapter) {
      const double c2 = s2 * layer.adapter->scaling * layer.adapter->scaling;
      if (layer.adapter->b_trainable) total += c2 * dd * dot(tx.lora_mid, txp.lora_mid);
      if (layer.adapter->a_trainable)
        total += c2 * dot(sx.adapter_delta, sxp.adapter_delta) * dot(tx.input, txp.input);
    }
  }
  return total;
}

double empirical_ntk(const Network& net, std::span<const double> x, std::span<const double> x_prime,
                     std::size_t k) {
  if (k >= net.output_dim()) throw DimensionError("empirical_ntk: output index out of range");
  const TangentFeatures fx = tangent_features(net, x);
  const TangentFeatures fxp = tangent_features(net, x_prime);
  return empirical_ntk(net, fx, fxp, k, k);
}

Matrix empirical_ntk_matrix(const Network& net, const TangentFeatures& fx, const TangentFeatures& fxp) {
  const std::size_t n = net.output_dim();
  Matrix k(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) k(i, j) = empirical_ntk(net, fx, fxp, i, j);
  return k;
}

Matrix empirical_ntk_matrix(const Network& net, std::span<const double> x, std::span<const double> x_prime) {
  return empirical_ntk_matrix(net, tangent_features(net, x), tangent_features(net, x_prime));
}

namespace {

void check_traces(const ActivationTrace& tx, const ActivationTrace& txp) {
  if (tx.layers.empty() || tx.layers.size() != txp.layers.size())
    throw DimensionError("analytic kernel: traces have different depth");
  if (tx.activation != txp.activation || tx.parameterization != txp.parameterization)
    throw DimensionError("analytic kernel: traces come from different network specs");
  for (std::size_t l = 0; l < tx.layers.size(); ++l)
    if (tx.layers[l].input.size() != txp.layers[l].input.size() ||
        tx.layers[l].pre.size() != txp.layers[l].pre.size())
      throw DimensionError("analytic kernel: trace layer shapes differ");
}

double fan_in_norm(const ActivationTrace& t, std::size_t l) {
  return t.parameterization == Parameterization::ntk ? 1.0 / static_cast<double>(t.layers[l].input.size()) : 1.0;
}

// sigma_dot(y^(l-1)(x))^T sigma_dot(y^(l-1)(x')) on the pre-activations feeding layer l.
double derivative_overlap(const ActivationTrace& tx, const ActivationTrace& txp, std::size_t l) {
  const Vector& y = tx.layers[l - 1].pre;
  const Vector& yp = txp.layers[l - 1].pre;
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i)
    s += activate_derivative(tx.activation, y[i]) * activate_derivative(tx.activation, yp[i]);
  return s;
}

AnalyticKernel run_recursion(const ActivationTrace& tx, const ActivationTrace& txp,
                             std::span<const AdapterFactor> adapters, bool use_bias) {
  check_traces(tx, txp);
  const std::size_t depth = tx.layers.size();
  AnalyticKernel out{Vector(depth, 0.0), Vector(depth, 0.0), Vector(depth, 0.0)};
  for (std::size_t l = 0; l < depth; ++l) {
    const double norm = fan_in_norm(tx, l);
    const Vector& in = tx.layers[l].input;
    const Vector& inp = txp.layers[l].input;
    const AdapterFactor* adapter = nullptr;
    for (const auto& a : adapters)
      if (a.layer == l) adapter = &a;

    double sigma = 0.0;
    if (adapter) {
      if (adapter->a.cols() != in.size()) throw DimensionError("analytic kernel: adapter width mismatch");
      sigma = adapter->scaling * adapter->scaling * dot(matvec(adapter->a, in), matvec(adapter->a, inp));
    } else {
      sigma = dot(in, inp);
    }
    out.sigma[l] = norm * sigma + (use_bias ? 1.0 : 0.0);
    if (l == 0) {
      out.kernel[0] = out.sigma[0];
      continue;
    }
    out.sigma_dot[l] = norm * derivative_overlap(tx, txp, l);
    out.kernel[l] = out.kernel[l - 1] * out.sigma_dot[l] + out.sigma[l];
  }
  return out;
}

}  // namespace

AnalyticKernel analytic_ntk_ff(const ActivationTrace& tx, const ActivationTrace& txp, bool use_bias) {
  return run_recursion(tx, txp, {}, use_bias);
}

std::vector<AdapterFactor> adapter_factors(const Network& net) {
  std::vector<AdapterFactor> out;
  for (std::size_t l = 0; l < net.num_layers(); ++l)
    if (const auto& ad = net.layer(l).adapter) out.push_back({l, ad->a, ad->scaling});
  return out;
}

AnalyticKernel analytic_ntk_lora(const ActivationTrace& tx, const ActivationTrace& txp,
                                 std::span<const AdapterFactor> adapters, bool use_bias) {
  if (adapters.empty()) throw ConfigError("analytic_ntk_lora: no adapters supplied");
  for (const auto& a : adapters)
    if (a.layer >= tx.layers.size()) throw ConfigError("analytic_ntk_lora: adapter for a missing layer");
  return run_recursion(tx, txp, adapters, use_bias);
}

double delta_r(const ActivationTrace& tx, const ActivationTrace& txp, const Matrix& a, std::size_t layer) {
  check_traces(tx, txp);
  if (layer >= tx.layers.size()) throw DimensionError("delta_r: layer out of range");
  const Vector& in = tx.layers[layer].input;
  const Vector& inp = txp.layers[layer].input;
  if (a.cols() != in.size()) throw DimensionError("delta_r: A has " + std::to_string(a.cols()) +
                                                  " columns, layer input has " + std::to_string(in.size()));
  return dot(matvec(a, in), matvec(a, inp)) - dot(in, inp);
}

Matrix m_delta(const Matrix& a) {
  Matrix m = gram_of_columns(a);
  for (std::size_t i = 0; i < m.rows(); ++i) m(i, i) -= 1.0;
  return m;
}

std::vector<Matrix> gp_cov(std::span<const ActivationTrace> traces) {
  if (traces.empty()) throw DataError("gp_cov: empty batch");
  const std::size_t depth = traces.front().layers.size();
  for (const auto& t : traces)
    if (t.layers.size() != depth) throw DimensionError("gp_cov: traces from different networks");
  const std::size_t n = traces.size();
  std::vector<Matrix> out;
  for (std::size_t l = 0; l < depth; ++l) {
    Matrix g(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i; j < n; ++j) {
        const double v = dot(traces[i].layers[l].input, traces[j].layers[l].input);
        g(i, j) = v;
        g(j, i) = v;
      }
    out.push_back(std::move(g));
  }
  return out;
}

KernelReport kernel_report(const Network& net, std::span<const double> x, std::span<const double> x_prime) {
  const TangentFeatures fx = tangent_features(net, x);
  const TangentFeatures fxp = tangent_features(net, x_prime);
  KernelReport r;
  r.layer = net.num_layers() - 1;
  for (std::size_t k = 0; k < net.output_dim(); ++k) r.empirical.push_back(empirical_ntk(net, fx, fxp, k, k));
  const bool bias = net.spec().use_bias;
  if (net.has_adapters()) {
    r.mode = KernelMode::lora;
    const auto adapters = adapter_factors(net);
    r.analytic = analytic_ntk_lora(fx.trace, fxp.trace, adapters, bias);
    r.delta = delta_r(fx.trace, fxp.trace, adapters.front().a, adapters.front().layer);
  } else {
    r.analytic = analytic_ntk_ff(fx.trace, fxp.trace, bias);
  }
  return r;
}

std::string to_json(const KernelReport& report) {
  nlohmann::ordered_json j;
  j["mode"] = report.mode == KernelMode::lora ? "lora" : "ff";
  j["layer"] = report.layer;
  std::vector<std::size_t> ks(report.empirical.size());
  for (std::size_t k = 0; k < ks.size(); ++k) ks[k] = k;
  j["k"] = ks;
  j["empirical"] = report.empirical;
  j["analytic"] = report.analytic.kernel;
  j["sigma"] = report.analytic.sigma;
  j["sigma_dot"] = report.analytic.sigma_dot;
  j["delta"] = report.delta;
  return j.dump(2);
}

}  // namespace lorattr
