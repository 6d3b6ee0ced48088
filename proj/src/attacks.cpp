#include "lorattr/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "lorattr/errors.hpp"
#include "lorattr/rng.hpp"

namespace lorattr {

std::string_view to_string(SampleFlag f) {
  switch (f) {
    case SampleFlag::clean: return "clean";
    case SampleFlag::flipped: return "flipped";
    case SampleFlag::triggered: return "triggered";
  }
  return "unknown";
}

SampleFlag parse_sample_flag(std::string_view name) {
  if (name == "clean") return SampleFlag::clean;
  if (name == "flipped") return SampleFlag::flipped;
  if (name == "triggered") return SampleFlag::triggered;
  throw DataError("unknown sample flag '" + std::string(name) + "'");
}

std::string_view to_string(AttackKind k) { return k == AttackKind::bpa ? "bpa" : "upa"; }

AttackKind parse_attack_kind(std::string_view name) {
  if (name == "upa") return AttackKind::upa;
  if (name == "bpa") return AttackKind::bpa;
  throw ConfigError("unknown attack kind '" + std::string(name) + "'");
}

std::size_t LabeledDataset::count(SampleFlag f) const {
  return static_cast<std::size_t>(std::count(flags.begin(), flags.end(), f));
}

void LabeledDataset::save_csv(std::ostream& out) const {
  const std::size_t d = dims();
  for (std::size_t j = 0; j < d; ++j) out << "x_" << j << ',';
  out << "label,flag\n";
  char buf[40];
  for (std::size_t i = 0; i < size(); ++i) {
    for (double v : inputs[i]) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out << buf << ',';
    }
    out << labels[i] << ',' << to_string(flags[i]) << '\n';
  }
}

LabeledDataset LabeledDataset::load_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("dataset csv: missing header");
  const auto columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 3) throw DataError("dataset csv: header needs x columns, label and flag");
  const std::size_t d = columns - 2;
  LabeledDataset data;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    Vector x(d);
    for (std::size_t j = 0; j < d; ++j) {
      if (!std::getline(ss, cell, ',')) throw DataError("dataset csv: short row");
      char* end = nullptr;
      x[j] = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) throw DataError("dataset csv: bad number '" + cell + "'");
    }
    if (!std::getline(ss, cell, ',')) throw DataError("dataset csv: missing label");
    data.labels.push_back(static_cast<std::size_t>(std::stoul(cell)));
    if (!std::getline(ss, cell, ',')) throw DataError("dataset csv: missing flag");
    data.flags.push_back(parse_sample_flag(cell));
    data.inputs.push_back(std::move(x));
  }
  return data;
}

std::size_t poison_count(std::size_t n, double rate) {
  if (!(rate >= 0.0 && rate <= 1.0)) throw ConfigError("poisoning rate must lie in [0, 1]");
  return static_cast<std::size_t>(std::floor(rate * static_cast<double>(n) + 0.5));
}

std::vector<std::size_t> choose_without_replacement(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw ConfigError("cannot choose more samples than the dataset holds");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

Vector default_blob_direction(std::size_t dims) {
  if (dims < 2) throw ConfigError("blobs need at least 2 dimensions");
  Vector u(dims, 1.0 / std::sqrt(static_cast<double>(dims - 1)));
  u.back() = 0.0;
  return u;
}

LabeledDataset gen_blobs(std::size_t n_per_class, std::size_t dims, double separation, double spread,
                         std::uint64_t seed) {
  const Vector u = default_blob_direction(dims);
  return gen_blobs(n_per_class, dims, separation, spread, seed, u);
}

LabeledDataset gen_blobs(std::size_t n_per_class, std::size_t dims, double separation, double spread,
                         std::uint64_t seed, std::span<const double> direction) {
  if (dims < 2) throw ConfigError("blobs need at least 2 dimensions");
  if (direction.size() != dims) throw DimensionError("blob direction has the wrong length");
  if (direction.back() != 0.0) throw ConfigError("blob direction must not use the trigger coordinate");
  LabeledDataset data;
  data.seed = seed;
  Rng rng(seed);
  for (std::size_t i = 0; i < 2 * n_per_class; ++i) {
    const std::size_t label = i % 2;
    const double sign = label == 1 ? 1.0 : -1.0;
    Vector x(dims);
    for (std::size_t j = 0; j < dims; ++j) x[j] = sign * separation * direction[j] + spread * rng.normal();
    data.inputs.push_back(std::move(x));
    data.labels.push_back(label);
    data.flags.push_back(SampleFlag::clean);
  }
  return data;
}

LabeledDataset upa_flip(const LabeledDataset& data, double rate, std::uint64_t seed) {
  LabeledDataset out = data;
  for (std::size_t i : choose_without_replacement(data.size(), poison_count(data.size(), rate), seed)) {
    out.labels[i] = 1 - out.labels[i];
    out.flags[i] = SampleFlag::flipped;
  }
  return out;
}

LabeledDataset bpa_inject(const LabeledDataset& data, const AttackSpec& spec) {
  if (spec.kind != AttackKind::bpa) throw ConfigError("bpa_inject needs a bpa attack spec");
  if (!data.empty() && spec.trigger_index >= data.dims())
    throw ConfigError("trigger coordinate out of range");
  LabeledDataset out = data;
  for (std::size_t i : choose_without_replacement(data.size(), poison_count(data.size(), spec.rate), spec.seed)) {
    out.inputs[i][spec.trigger_index] = spec.trigger_value;
    out.labels[i] = spec.target_label;
    out.flags[i] = SampleFlag::triggered;
  }
  return out;
}

LabeledDataset trigger_testset(const LabeledDataset& test, const AttackSpec& spec) {
  if (spec.kind != AttackKind::bpa) throw ConfigError("trigger_testset needs a bpa attack spec");
  if (!test.empty() && spec.trigger_index >= test.dims()) throw ConfigError("trigger coordinate out of range");
  LabeledDataset out = test;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.inputs[i][spec.trigger_index] = spec.trigger_value;
    out.flags[i] = SampleFlag::triggered;
  }
  return out;
}

std::size_t predict(const Network& net, std::span<const double> x) {
  const Vector out = net.output(x);
  return static_cast<std::size_t>(std::max_element(out.begin(), out.end()) - out.begin());
}

std::vector<std::size_t> predict_all(const Network& net, const LabeledDataset& data) {
  std::vector<std::size_t> p;
  p.reserve(data.size());
  for (const auto& x : data.inputs) p.push_back(predict(net, x));
  return p;
}

Metrics evaluate_predictions(std::span<const std::size_t> predictions, std::span<const std::size_t> labels) {
  if (predictions.empty()) throw DataError("evaluate: empty test set");
  if (predictions.size() != labels.size()) throw DimensionError("evaluate: prediction/label count mismatch");
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1) throw DataError("evaluate: labels must be binary");
    const bool pred_pos = predictions[i] == 1;
    const bool is_pos = labels[i] == 1;
    if (predictions[i] == labels[i]) ++correct;
    if (pred_pos && is_pos) ++tp;
    if (pred_pos && !is_pos) ++fp;
    if (!pred_pos && is_pos) ++fn;
  }
  Metrics m;
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.precision = tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0.0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
  return m;
}

Metrics evaluate(const Network& net, const LabeledDataset& test) {
  if (test.empty()) throw DataError("evaluate: empty test set");
  return evaluate_predictions(predict_all(net, test), test.labels);
}

double asr_from_predictions(std::span<const std::size_t> predictions, std::span<const std::size_t> labels,
                            std::size_t target_label) {
  if (predictions.size() != labels.size()) throw DimensionError("asr: prediction/label count mismatch");
  std::size_t eligible = 0, hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == target_label) continue;
    ++eligible;
    if (predictions[i] == target_label) ++hits;
  }
  if (eligible == 0) throw DataError("asr: no samples with a non-target label");
  return static_cast<double>(hits) / static_cast<double>(eligible);
}

double asr(const Network& net, const LabeledDataset& triggered_test, std::size_t target_label) {
  return asr_from_predictions(predict_all(net, triggered_test), triggered_test.labels, target_label);
}

}  // namespace lorattr
