#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lorattr/linalg.hpp"

namespace lorattr {

enum class Activation { relu, tanh, identity };
enum class Parameterization { standard, ntk };
enum class Loss { cross_entropy, mse };

std::string_view to_string(Activation a);
std::string_view to_string(Parameterization p);
std::string_view to_string(Loss l);
Activation parse_activation(std::string_view name);
Parameterization parse_parameterization(std::string_view name);
Loss parse_loss(std::string_view name);

double activate(Activation a, double y);
/// d sigma / dy; ReLU'(0) is taken as 0.
double activate_derivative(Activation a, double y);

struct NetworkSpec {
  std::vector<std::size_t> dims;  // n_0 .. n_L
  Activation activation = Activation::relu;
  bool use_bias = false;
  InitSpec weight_init{};
  Parameterization parameterization = Parameterization::standard;

  std::size_t num_layers() const { return dims.empty() ? 0 : dims.size() - 1; }
};

struct LoraConfig {
  std::vector<std::size_t> adapted_layers;
  std::size_t rank = 8;
  InitSpec a_init{InitDistribution::kaiming_uniform, 1.0 / 3.0, 0};
  InitSpec b_init{InitDistribution::zero, 1.0, 0};
  double alpha = 16.0;
  bool scale_by_rank = true;  // effective update (alpha / r) * B A; alpha * B A when false
  bool freeze_a = false;
  // true: every base weight is frozen. false: only adapted layers' base weights are
  // frozen, the rest stay trainable (the single-adapted-layer kernel comparison).
  bool freeze_base = true;
  // permits r == fan-in even when it exceeds fan-out
  bool allow_full_rank = false;
};

struct Adapter {
  Matrix a;  // r × n_in
  Matrix b;  // n_out × r
  double scaling = 1.0;
  bool a_trainable = true;
  bool b_trainable = true;

  std::size_t rank() const { return a.rows(); }
};

struct Layer {
  Matrix weight;  // n_out × n_in
  Vector bias;    // empty when biases are off
  std::optional<Adapter> adapter;
  bool weight_trainable = true;
  bool bias_trainable = true;
  double forward_scale = 1.0;  // 1/sqrt(n_in) under NTK parameterisation

  std::size_t fan_in() const { return weight.cols(); }
  std::size_t fan_out() const { return weight.rows(); }
};

struct LayerTrace {
  Vector input;     // x^(l)
  Vector pre;       // y^(l)
  Vector post;      // sigma(y^(l)); equals pre on the output layer
  Vector lora_mid;  // A^(l) x^(l) where adapted, empty otherwise
};

struct ActivationTrace {
  std::vector<LayerTrace> layers;
  Activation activation = Activation::relu;
  Parameterization parameterization = Parameterization::standard;
};

struct ForwardResult {
  Vector output;
  ActivationTrace trace;
};

/// dL/dy^(l) for every layer, plus B^T dL/dy^(l) on adapted layers.
struct LayerSensitivity {
  Vector delta;
  Vector adapter_delta;
};

struct Backprop {
  std::vector<LayerSensitivity> layers;
};

/// Gradient with respect to each parameter group; frozen groups hold zeros.
struct LayerGradient {
  Matrix weight;
  Vector bias;
  Matrix a;
  Matrix b;
};

struct GradientRecord {
  std::vector<LayerGradient> layers;

  GradientRecord& operator+=(const GradientRecord& other);
  GradientRecord& operator*=(double s);
  double squared_norm() const;
  std::size_t parameter_count() const;
};

double inner_product(const GradientRecord& a, const GradientRecord& b);

class Network {
 public:
  static Network build(const NetworkSpec& spec, const std::optional<LoraConfig>& lora = std::nullopt);
  /// Adds adapters to an existing network; base weights are copied unchanged.
  static Network with_lora(const Network& base, const LoraConfig& lora);

  const NetworkSpec& spec() const { return spec_; }
  std::size_t num_layers() const { return layers_.size(); }
  std::size_t input_dim() const { return spec_.dims.front(); }
  std::size_t output_dim() const { return spec_.dims.back(); }
  bool has_adapters() const;

  const Layer& layer(std::size_t l) const { return layers_.at(l); }
  Layer& layer(std::size_t l) { return layers_.at(l); }
  std::span<const Layer> layers() const { return layers_; }

  ForwardResult forward(std::span<const double> x) const;
  Vector output(std::span<const double> x) const;

  /// Reverse pass of dL/d(output) = upstream through a recorded trace.
  Backprop backward(const ActivationTrace& trace, std::span<const double> upstream) const;
  GradientRecord gradient(const ActivationTrace& trace, const Backprop& bp) const;
  GradientRecord gradient(const ActivationTrace& trace, std::span<const double> upstream) const;
  /// acc += weight * gradient; acc must come from zero_gradient(). Frozen groups are skipped.
  void accumulate_gradient(const ActivationTrace& trace, const Backprop& bp, GradientRecord& acc,
                           double weight = 1.0) const;

  /// Exact gradient of output coordinate k with respect to every parameter group.
  GradientRecord grad_output_k(std::span<const double> x, std::size_t k) const;

  /// theta <- theta - lr * g on trainable groups only.
  void apply_update(const GradientRecord& g, double lr);

  std::size_t trainable_parameter_count() const;
  Vector trainable_parameters() const;
  GradientRecord zero_gradient() const;

  void save(std::ostream& out) const;
  static Network load(std::istream& in);
  void save_file(const std::string& path) const;
  static Network load_file(const std::string& path);

  bool operator==(const Network& other) const;

 private:
  NetworkSpec spec_;
  std::vector<Layer> layers_;
};

/// dL/d(output). Cross-entropy: softmax(output) - onehot(label). MSE with a class label
/// uses the one-hot target.
Vector loss_grad_output(std::span<const double> output, std::size_t label, Loss loss);
Vector loss_grad_output(std::span<const double> output, std::span<const double> target);
double loss_value(std::span<const double> output, std::size_t label, Loss loss);
Vector softmax(std::span<const double> logits);

}  // namespace lorattr
