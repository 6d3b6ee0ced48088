#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lorattr/linalg.hpp"
#include "lorattr/network.hpp"

namespace lorattr {

enum class SampleFlag { clean, flipped, triggered };

std::string_view to_string(SampleFlag f);
SampleFlag parse_sample_flag(std::string_view name);

struct LabeledDataset {
  std::vector<Vector> inputs;
  std::vector<std::size_t> labels;
  std::vector<SampleFlag> flags;
  std::uint64_t seed = 0;

  std::size_t size() const { return inputs.size(); }
  std::size_t dims() const { return inputs.empty() ? 0 : inputs.front().size(); }
  bool empty() const { return inputs.empty(); }
  std::size_t count(SampleFlag f) const;

  void save_csv(std::ostream& out) const;
  static LabeledDataset load_csv(std::istream& in);
  bool operator==(const LabeledDataset& other) const = default;
};

enum class AttackKind { upa, bpa };

std::string_view to_string(AttackKind k);
AttackKind parse_attack_kind(std::string_view name);

struct AttackSpec {
  AttackKind kind = AttackKind::upa;
  double rate = 0.0;  // rho
  std::size_t trigger_index = 0;
  double trigger_value = 3.0;  // tau
  std::size_t target_label = 1;
  std::uint64_t seed = 0;
};

/// floor(rho * n + 0.5).
std::size_t poison_count(std::size_t n, double rate);

/// `count` distinct indices of [0, n), chosen by partial Fisher-Yates.
std::vector<std::size_t> choose_without_replacement(std::size_t n, std::size_t count, std::uint64_t seed);

/// Unit vector over the first dims-1 coordinates (all equal); the last coordinate is 0.
Vector default_blob_direction(std::size_t dims);

/// Two isotropic Gaussian classes centred at -mu*u (label 0) and +mu*u (label 1).
/// Samples alternate 0, 1, 0, 1, ...
LabeledDataset gen_blobs(std::size_t n_per_class, std::size_t dims, double separation, double spread,
                         std::uint64_t seed);
LabeledDataset gen_blobs(std::size_t n_per_class, std::size_t dims, double separation, double spread,
                         std::uint64_t seed, std::span<const double> direction);

LabeledDataset upa_flip(const LabeledDataset& data, double rate, std::uint64_t seed);
LabeledDataset bpa_inject(const LabeledDataset& data, const AttackSpec& spec);
/// Every sample gets the trigger; labels keep their original values.
LabeledDataset trigger_testset(const LabeledDataset& test, const AttackSpec& spec);

struct Metrics {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

std::size_t predict(const Network& net, std::span<const double> x);
std::vector<std::size_t> predict_all(const Network& net, const LabeledDataset& data);

/// Positive class = 1. Precision/recall/F1 with an empty denominator are 0.
Metrics evaluate_predictions(std::span<const std::size_t> predictions, std::span<const std::size_t> labels);
Metrics evaluate(const Network& net, const LabeledDataset& test);

/// Fraction of samples with label != target that are predicted as target.
double asr_from_predictions(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                            std::size_t target_label);
double asr(const Network& net, const LabeledDataset& triggered_test, std::size_t target_label);

}  // namespace lorattr
