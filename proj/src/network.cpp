#include "lorattr/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "lorattr/errors.hpp"
#include "lorattr/rng.hpp"

namespace lorattr {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::identity: return "identity";
  }
  return "unknown";
}

std::string_view to_string(Parameterization p) {
  return p == Parameterization::ntk ? "ntk" : "standard";
}

std::string_view to_string(Loss l) { return l == Loss::mse ? "mse" : "cross-entropy"; }

Activation parse_activation(std::string_view name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  if (name == "identity") return Activation::identity;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

Parameterization parse_parameterization(std::string_view name) {
  if (name == "standard") return Parameterization::standard;
  if (name == "ntk") return Parameterization::ntk;
  throw ConfigError("unknown parameterization '" + std::string(name) + "'");
}

Loss parse_loss(std::string_view name) {
  if (name == "cross-entropy") return Loss::cross_entropy;
  if (name == "mse") return Loss::mse;
  throw ConfigError("unknown loss '" + std::string(name) + "'");
}

double activate(Activation a, double y) {
  switch (a) {
    case Activation::relu: return y > 0.0 ? y : 0.0;
    case Activation::tanh: return std::tanh(y);
    case Activation::identity: return y;
  }
  return y;
}

double activate_derivative(Activation a, double y) {
  switch (a) {
    case Activation::relu: return y > 0.0 ? 1.0 : 0.0;
    case Activation::tanh: {
      const double t = std::tanh(y);
      return 1.0 - t * t;
    }
    case Activation::identity: return 1.0;
  }
  return 1.0;
}

// ---------------------------------------------------------------------------
// GradientRecord

GradientRecord& GradientRecord::operator+=(const GradientRecord& other) {
  if (layers.size() != other.layers.size()) throw DimensionError("gradient add: layer count mismatch");
  for (std::size_t l = 0; l < layers.size(); ++l) {
    auto& dst = layers[l];
    const auto& src = other.layers[l];
    dst.weight += src.weight;
    if (dst.bias.size() != src.bias.size()) throw DimensionError("gradient add: bias mismatch");
    for (std::size_t i = 0; i < dst.bias.size(); ++i) dst.bias[i] += src.bias[i];
    if (dst.a.size() != 0 || src.a.size() != 0) {
      dst.a += src.a;
      dst.b += src.b;
    }
  }
  return *this;
}

GradientRecord& GradientRecord::operator*=(double s) {
  for (auto& g : layers) {
    g.weight *= s;
    for (double& v : g.bias) v *= s;
    g.a *= s;
    g.b *= s;
  }
  return *this;
}

double GradientRecord::squared_norm() const { return inner_product(*this, *this); }

std::size_t GradientRecord::parameter_count() const {
  std::size_t n = 0;
  for (const auto& g : layers) n += g.weight.size() + g.bias.size() + g.a.size() + g.b.size();
  return n;
}

double inner_product(const GradientRecord& a, const GradientRecord& b) {
  if (a.layers.size() != b.layers.size()) throw DimensionError("gradient inner product: layer count mismatch");
  double s = 0.0;
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    const auto& ga = a.layers[l];
    const auto& gb = b.layers[l];
    s += dot(ga.weight.entries(), gb.weight.entries());
    s += dot(ga.bias, gb.bias);
    s += dot(ga.a.entries(), gb.a.entries());
    s += dot(ga.b.entries(), gb.b.entries());
  }
  return s;
}

// ---------------------------------------------------------------------------
// Construction

namespace {

void validate_spec(const NetworkSpec& spec) {
  if (spec.dims.size() < 2) throw ConfigError("network needs at least two layer dimensions");
  for (std::size_t d : spec.dims)
    if (d == 0) throw ConfigError("network layer dimensions must be >= 1");
}

void attach_adapters(std::vector<Layer>& layers, const LoraConfig& lora) {
  if (lora.rank == 0) throw ConfigError("LoRA rank must be >= 1");
  if (!(lora.alpha > 0.0)) throw ConfigError("LoRA alpha must be positive");
  const std::set<std::size_t> adapted(lora.adapted_layers.begin(), lora.adapted_layers.end());
  if (adapted.empty()) throw ConfigError("LoRA config adapts no layers");
  for (std::size_t l : adapted) {
    if (l >= layers.size()) throw ConfigError("LoRA adapted layer index out of range");
    const std::size_t n_in = layers[l].fan_in();
    const std::size_t n_out = layers[l].fan_out();
    const bool fits = lora.rank <= std::min(n_in, n_out);
    const bool full_rank_ok = lora.allow_full_rank && lora.rank == n_in;
    if (!fits && !full_rank_ok)
      throw ConfigError("LoRA rank " + std::to_string(lora.rank) + " exceeds layer " + std::to_string(l) +
                        " dims " + std::to_string(n_out) + "x" + std::to_string(n_in));
  }

  for (std::size_t l = 0; l < layers.size(); ++l) {
    Layer& layer = layers[l];
    const bool is_adapted = adapted.contains(l);
    if (lora.freeze_base || is_adapted) {
      layer.weight_trainable = false;
      layer.bias_trainable = false;
    }
    if (!is_adapted) continue;
    InitSpec a_init = lora.a_init;
    a_init.seed = Rng::derive(lora.a_init.seed, l);
    InitSpec b_init = lora.b_init;
    b_init.seed = Rng::derive(lora.b_init.seed, l + 1000);
    Adapter adapter;
    adapter.a = sample_matrix(lora.rank, layer.fan_in(), a_init);
    adapter.b = sample_matrix(layer.fan_out(), lora.rank, b_init);
    adapter.scaling = lora.scale_by_rank ? lora.alpha / static_cast<double>(lora.rank) : lora.alpha;
    adapter.a_trainable = !lora.freeze_a;
    adapter.b_trainable = true;
    layer.adapter = std::move(adapter);
  }
}

}  // namespace

Network Network::build(const NetworkSpec& spec, const std::optional<LoraConfig>& lora) {
  validate_spec(spec);
  Network net;
  net.spec_ = spec;
  for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
    const std::size_t n_in = spec.dims[l];
    const std::size_t n_out = spec.dims[l + 1];
    Layer layer;
    const bool ntk = spec.parameterization == Parameterization::ntk;
    double variance = target_variance(spec.weight_init, n_in, n_out);
    if (ntk) variance *= static_cast<double>(n_in);
    layer.weight = sample_matrix_with_variance(n_out, n_in, spec.weight_init.distribution, variance,
                                               Rng::derive(spec.weight_init.seed, l));
    if (spec.use_bias) layer.bias.assign(n_out, 0.0);
    layer.forward_scale = ntk ? 1.0 / std::sqrt(static_cast<double>(n_in)) : 1.0;
    net.layers_.push_back(std::move(layer));
  }
  if (lora) attach_adapters(net.layers_, *lora);
  return net;
}

Network Network::with_lora(const Network& base, const LoraConfig& lora) {
  Network net = base;
  for (auto& layer : net.layers_) {
    layer.adapter.reset();
    layer.weight_trainable = true;
    layer.bias_trainable = true;
  }
  attach_adapters(net.layers_, lora);
  return net;
}

bool Network::has_adapters() const {
  return std::any_of(layers_.begin(), layers_.end(), [](const Layer& l) { return l.adapter.has_value(); });
}

// ---------------------------------------------------------------------------
// Forward / backward

ForwardResult Network::forward(std::span<const double> x) const {
  if (x.size() != input_dim())
    throw DimensionError("forward: input has length " + std::to_string(x.size()) + ", expected " +
                         std::to_string(input_dim()));
  ForwardResult result;
  result.trace.activation = spec_.activation;
  result.trace.parameterization = spec_.parameterization;
  result.trace.layers.resize(layers_.size());
  Vector current(x.begin(), x.end());
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    LayerTrace& t = result.trace.layers[l];
    Vector pre = matvec(layer.weight, current);
    if (layer.adapter) {
      t.lora_mid = matvec(layer.adapter->a, current);
      const Vector delta = matvec(layer.adapter->b, t.lora_mid);
      for (std::size_t i = 0; i < pre.size(); ++i) pre[i] += layer.adapter->scaling * delta[i];
    }
    for (double& v : pre) v *= layer.forward_scale;
    for (std::size_t i = 0; i < layer.bias.size(); ++i) pre[i] += layer.bias[i];

    const bool last = l + 1 == layers_.size();
    Vector post = pre;
    if (!last)
      for (double& v : post) v = activate(spec_.activation, v);
    t.input = std::move(current);
    t.pre = std::move(pre);
    t.post = post;
    current = std::move(post);
  }
  result.output = std::move(current);
  return result;
}

Vector Network::output(std::span<const double> x) const { return forward(x).output; }

Backprop Network::backward(const ActivationTrace& trace, std::span<const double> upstream) const {
  if (trace.layers.size() != layers_.size()) throw DimensionError("backward: trace does not match network");
  if (upstream.size() != output_dim()) throw DimensionError("backward: upstream gradient has wrong length");
  Backprop bp;
  bp.layers.resize(layers_.size());
  Vector grad_post(upstream.begin(), upstream.end());
  for (std::size_t li = layers_.size(); li-- > 0;) {
    const Layer& layer = layers_[li];
    const LayerTrace& t = trace.layers[li];
    LayerSensitivity& s = bp.layers[li];
    const bool last = li + 1 == layers_.size();
    s.delta = grad_post;
    if (!last)
      for (std::size_t i = 0; i < s.delta.size(); ++i) s.delta[i] *= activate_derivative(spec_.activation, t.pre[i]);
    if (li == 0 && !layer.adapter) break;

    Vector grad_in = matvec_transposed(layer.weight, s.delta);
    if (layer.adapter) {
      s.adapter_delta = matvec_transposed(layer.adapter->b, s.delta);
      const Vector through_a = matvec_transposed(layer.adapter->a, s.adapter_delta);
      for (std::size_t i = 0; i < grad_in.size(); ++i) grad_in[i] += layer.adapter->scaling * through_a[i];
    }
    for (double& v : grad_in) v *= layer.forward_scale;
    grad_post = std::move(grad_in);
  }
  return bp;
}

GradientRecord Network::gradient(const ActivationTrace& trace, const Backprop& bp) const {
  GradientRecord g = zero_gradient();
  accumulate_gradient(trace, bp, g);
  return g;
}

void Network::accumulate_gradient(const ActivationTrace& trace, const Backprop& bp, GradientRecord& acc,
                                  double weight) const {
  if (acc.layers.size() != layers_.size() || bp.layers.size() != layers_.size())
    throw DimensionError("accumulate_gradient: record does not match network");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    const LayerTrace& t = trace.layers[l];
    const LayerSensitivity& s = bp.layers[l];
    LayerGradient& out = acc.layers[l];
    if (layer.weight_trainable) {
      for (std::size_t i = 0; i < layer.fan_out(); ++i) {
        const double di = weight * layer.forward_scale * s.delta[i];
        if (di == 0.0) continue;
        auto row = out.weight.row(i);
        for (std::size_t j = 0; j < layer.fan_in(); ++j) row[j] += di * t.input[j];
      }
    }
    if (layer.bias_trainable)
      for (std::size_t i = 0; i < layer.bias.size(); ++i) out.bias[i] += weight * s.delta[i];
    if (!layer.adapter) continue;
    const Adapter& ad = *layer.adapter;
    const double c = weight * layer.forward_scale * ad.scaling;
    if (ad.b_trainable) {
      for (std::size_t i = 0; i < ad.b.rows(); ++i) {
        const double di = c * s.delta[i];
        if (di == 0.0) continue;
        auto row = out.b.row(i);
        for (std::size_t j = 0; j < ad.b.cols(); ++j) row[j] += di * t.lora_mid[j];
      }
    }
    if (ad.a_trainable) {
      for (std::size_t i = 0; i < ad.a.rows(); ++i) {
        const double di = c * s.adapter_delta[i];
        if (di == 0.0) continue;
        auto row = out.a.row(i);
        for (std::size_t j = 0; j < ad.a.cols(); ++j) row[j] += di * t.input[j];
      }
    }
  }
}

GradientRecord Network::gradient(const ActivationTrace& trace, std::span<const double> upstream) const {
  return gradient(trace, backward(trace, upstream));
}

GradientRecord Network::grad_output_k(std::span<const double> x, std::size_t k) const {
  if (k >= output_dim()) throw DimensionError("grad_output_k: output index out of range");
  const ForwardResult fr = forward(x);
  Vector e(output_dim(), 0.0);
  e[k] = 1.0;
  return gradient(fr.trace, e);
}

void Network::apply_update(const GradientRecord& g, double lr) {
  if (g.layers.size() != layers_.size()) throw DimensionError("apply_update: gradient does not match network");
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Layer& layer = layers_[l];
    const LayerGradient& lg = g.layers[l];
    if (layer.weight_trainable) {
      auto w = layer.weight.entries();
      auto d = lg.weight.entries();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * d[i];
    }
    if (layer.bias_trainable)
      for (std::size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= lr * lg.bias[i];
    if (!layer.adapter) continue;
    if (layer.adapter->a_trainable) {
      auto w = layer.adapter->a.entries();
      auto d = lg.a.entries();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * d[i];
    }
    if (layer.adapter->b_trainable) {
      auto w = layer.adapter->b.entries();
      auto d = lg.b.entries();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] -= lr * d[i];
    }
  }
}

std::size_t Network::trainable_parameter_count() const {
  std::size_t n = 0;
  for (const Layer& layer : layers_) {
    if (layer.weight_trainable) n += layer.weight.size();
    if (layer.bias_trainable) n += layer.bias.size();
    if (layer.adapter) {
      if (layer.adapter->a_trainable) n += layer.adapter->a.size();
      if (layer.adapter->b_trainable) n += layer.adapter->b.size();
    }
  }
  return n;
}

Vector Network::trainable_parameters() const {
  Vector theta;
  theta.reserve(trainable_parameter_count());
  auto append = [&](std::span<const double> v) { theta.insert(theta.end(), v.begin(), v.end()); };
  for (const Layer& layer : layers_) {
    if (layer.weight_trainable) append(layer.weight.entries());
    if (layer.bias_trainable) append(layer.bias);
    if (layer.adapter) {
      if (layer.adapter->a_trainable) append(layer.adapter->a.entries());
      if (layer.adapter->b_trainable) append(layer.adapter->b.entries());
    }
  }
  return theta;
}

GradientRecord Network::zero_gradient() const {
  GradientRecord g;
  for (const Layer& layer : layers_) {
    LayerGradient lg;
    lg.weight = Matrix(layer.fan_out(), layer.fan_in());
    lg.bias.assign(layer.bias.size(), 0.0);
    if (layer.adapter) {
      lg.a = Matrix(layer.adapter->a.rows(), layer.adapter->a.cols());
      lg.b = Matrix(layer.adapter->b.rows(), layer.adapter->b.cols());
    }
    g.layers.push_back(std::move(lg));
  }
  return g;
}

bool Network::operator==(const Network& other) const {
  if (spec_.dims != other.spec_.dims || spec_.activation != other.spec_.activation ||
      spec_.use_bias != other.spec_.use_bias || spec_.parameterization != other.spec_.parameterization ||
      layers_.size() != other.layers_.size())
    return false;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& a = layers_[l];
    const Layer& b = other.layers_[l];
    if (!(a.weight == b.weight) || a.bias != b.bias || a.weight_trainable != b.weight_trainable ||
        a.bias_trainable != b.bias_trainable || a.forward_scale != b.forward_scale ||
        a.adapter.has_value() != b.adapter.has_value())
      return false;
    if (a.adapter) {
      const Adapter& x = *a.adapter;
      const Adapter& y = *b.adapter;
      if (!(x.a == y.a) || !(x.b == y.b) || x.scaling != y.scaling || x.a_trainable != y.a_trainable ||
          x.b_trainable != y.b_trainable)
        return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Persistence: line-oriented text, every real written as a C99 hex float so that
// load(save(net)) reproduces each bit.

namespace {

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hex(const std::string& token) {
  char* end = nullptr;
  const double v = std::strtod(token.c_str(), &end);
  if (end == token.c_str() || *end != '\0') throw DataError("network blob: bad number '" + token + "'");
  return v;
}

void write_matrix(std::ostream& out, std::string_view tag, const Matrix& m) {
  out << tag << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? " " : "") << hex(m(r, c));
    out << '\n';
  }
}

void expect(std::istream& in, std::string_view word) {
  std::string token;
  if (!(in >> token) || token != word)
    throw DataError("network blob: expected '" + std::string(word) + "', got '" + token + "'");
}

Matrix read_matrix(std::istream& in, std::string_view tag) {
  expect(in, tag);
  std::size_t rows = 0, cols = 0;
  if (!(in >> rows >> cols)) throw DataError("network blob: bad matrix header");
  std::vector<double> entries(rows * cols);
  std::string token;
  for (double& v : entries) {
    if (!(in >> token)) throw DataError("network blob: truncated matrix");
    v = parse_hex(token);
  }
  return Matrix(rows, cols, std::move(entries));
}

}  // namespace

void Network::save(std::ostream& out) const {
  out << "lorattr-network 1\n";
  out << "dims " << spec_.dims.size();
  for (std::size_t d : spec_.dims) out << ' ' << d;
  out << '\n';
  out << "activation " << to_string(spec_.activation) << '\n';
  out << "bias " << (spec_.use_bias ? 1 : 0) << '\n';
  out << "parameterization " << to_string(spec_.parameterization) << '\n';
  out << "init " << to_string(spec_.weight_init.distribution) << ' ' << hex(spec_.weight_init.scale) << ' '
      << spec_.weight_init.seed << '\n';
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    const Layer& layer = layers_[l];
    out << "layer " << l << " trainable " << layer.weight_trainable << ' ' << layer.bias_trainable << " scale "
        << hex(layer.forward_scale) << " adapter " << layer.adapter.has_value() << '\n';
    write_matrix(out, "weight", layer.weight);
    out << "biasvec " << layer.bias.size();
    for (double v : layer.bias) out << ' ' << hex(v);
    out << '\n';
    if (layer.adapter) {
      out << "lora " << hex(layer.adapter->scaling) << ' ' << layer.adapter->a_trainable << ' '
          << layer.adapter->b_trainable << '\n';
      write_matrix(out, "A", layer.adapter->a);
      write_matrix(out, "B", layer.adapter->b);
    }
  }
  out << "end\n";
}

Network Network::load(std::istream& in) {
  expect(in, "lorattr-network");
  int version = 0;
  if (!(in >> version) || version != 1) throw DataError("network blob: unsupported version");
  Network net;
  std::string token;
  expect(in, "dims");
  std::size_t count = 0;
  in >> count;
  net.spec_.dims.resize(count);
  for (auto& d : net.spec_.dims) in >> d;
  expect(in, "activation");
  in >> token;
  net.spec_.activation = parse_activation(token);
  expect(in, "bias");
  int bias = 0;
  in >> bias;
  net.spec_.use_bias = bias != 0;
  expect(in, "parameterization");
  in >> token;
  net.spec_.parameterization = parse_parameterization(token);
  expect(in, "init");
  in >> token;
  net.spec_.weight_init.distribution = parse_init_distribution(token);
  in >> token;
  net.spec_.weight_init.scale = parse_hex(token);
  in >> net.spec_.weight_init.seed;
  if (!in) throw DataError("network blob: bad header");
  validate_spec(net.spec_);

  for (std::size_t l = 0; l + 1 < net.spec_.dims.size(); ++l) {
    Layer layer;
    std::size_t index = 0;
    int wt = 0, bt = 0, has_adapter = 0;
    expect(in, "layer");
    in >> index;
    expect(in, "trainable");
    in >> wt >> bt;
    expect(in, "scale");
    in >> token;
    layer.forward_scale = parse_hex(token);
    expect(in, "adapter");
    in >> has_adapter;
    if (!in || index != l) throw DataError("network blob: bad layer header");
    layer.weight_trainable = wt != 0;
    layer.bias_trainable = bt != 0;
    layer.weight = read_matrix(in, "weight");
    if (layer.weight.rows() != net.spec_.dims[l + 1] || layer.weight.cols() != net.spec_.dims[l])
      throw DataError("network blob: weight shape does not match dims");
    expect(in, "biasvec");
    std::size_t nb = 0;
    in >> nb;
    layer.bias.resize(nb);
    for (double& v : layer.bias) {
      in >> token;
      v = parse_hex(token);
    }
    if (has_adapter) {
      Adapter ad;
      int at = 0, btr = 0;
      expect(in, "lora");
      in >> token >> at >> btr;
      ad.scaling = parse_hex(token);
      ad.a_trainable = at != 0;
      ad.b_trainable = btr != 0;
      ad.a = read_matrix(in, "A");
      ad.b = read_matrix(in, "B");
      if (ad.a.cols() != layer.fan_in() || ad.b.rows() != layer.fan_out() || ad.b.cols() != ad.a.rows())
        throw DataError("network blob: adapter shape does not match layer");
      layer.adapter = std::move(ad);
    }
    net.layers_.push_back(std::move(layer));
  }
  expect(in, "end");
  return net;
}

void Network::save_file(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  save(out);
}

Network Network::load_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "'");
  return load(in);
}

// ---------------------------------------------------------------------------
// Losses

Vector softmax(std::span<const double> logits) {
  Vector p(logits.begin(), logits.end());
  if (p.empty()) return p;
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

Vector loss_grad_output(std::span<const double> output, std::size_t label, Loss loss) {
  if (label >= output.size()) throw DataError("loss: label out of range");
  if (loss == Loss::cross_entropy) {
    Vector g = softmax(output);
    g[label] -= 1.0;
    return g;
  }
  Vector g(output.begin(), output.end());
  g[label] -= 1.0;
  return g;
}

Vector loss_grad_output(std::span<const double> output, std::span<const double> target) {
  if (output.size() != target.size()) throw DimensionError("mse: target length differs from output");
  Vector g(output.size());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = output[i] - target[i];
  return g;
}

double loss_value(std::span<const double> output, std::size_t label, Loss loss) {
  if (label >= output.size()) throw DataError("loss: label out of range");
  if (loss == Loss::cross_entropy) {
    const double mx = *std::max_element(output.begin(), output.end());
    double sum = 0.0;
    for (double v : output) sum += std::exp(v - mx);
    return -(output[label] - mx - std::log(sum));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < output.size(); ++i) {
    const double d = output[i] - (i == label ? 1.0 : 0.0);
    s += 0.5 * d * d;
  }
  return s;
}

}  // namespace lorattr
