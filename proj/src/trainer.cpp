#include "lorattr/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "lorattr/errors.hpp"
#include "lorattr/kernels.hpp"
#include "lorattr/rng.hpp"

namespace lorattr {

namespace {

void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.below(i));
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace

Trajectory sgd_train(Network net, const LabeledDataset& data, const TrainConfig& cfg,
                     const SnapshotObserver& on_snapshot) {
  if (cfg.steps == 0) throw ConfigError("train: steps must be >= 1");
  if (cfg.batch_size == 0) throw ConfigError("train: batch size must be >= 1");
  if (cfg.batch_size > data.size()) throw ConfigError("train: batch size exceeds dataset size");
  if (!(cfg.learning_rate >= 0.0)) throw ConfigError("train: learning rate must be nonnegative");

  Trajectory traj;
  traj.snapshots.push_back({0, net.trainable_parameters()});
  if (on_snapshot) on_snapshot(0, net);
  traj.step_losses.reserve(cfg.steps);

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle(order, rng);
  std::size_t cursor = 0;

  GradientRecord grad = net.zero_gradient();
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    if (cursor + cfg.batch_size > order.size()) {
      shuffle(order, rng);
      cursor = 0;
    }
    grad *= 0.0;
    double loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const std::size_t i = order[cursor++];
      const ForwardResult fr = net.forward(data.inputs[i]);
      loss += loss_value(fr.output, data.labels[i], cfg.loss);
      const Vector g = loss_grad_output(fr.output, data.labels[i], cfg.loss);
      net.accumulate_gradient(fr.trace, net.backward(fr.trace, g), grad, inv_batch);
    }
    loss *= inv_batch;
    if (!std::isfinite(loss)) throw TrainingError("training diverged (non-finite loss)", step);
    traj.step_losses.push_back(loss);
    net.apply_update(grad, cfg.learning_rate);
    const bool snap = (cfg.snapshot_every > 0 && step % cfg.snapshot_every == 0) || step == cfg.steps;
    if (snap) {
      traj.snapshots.push_back({step, net.trainable_parameters()});
      if (on_snapshot) on_snapshot(step, net);
    }
  }
  traj.final_network = std::move(net);
  return traj;
}

void Trajectory::save(const std::string& directory) const {
  namespace fs = std::filesystem;
  fs::create_directories(directory);
  std::ofstream manifest(fs::path(directory) / "manifest.csv");
  if (!manifest) throw DataError("cannot write trajectory manifest in '" + directory + "'");
  manifest << "step,file\n";
  char buf[64];
  for (const auto& s : snapshots) {
    const std::string name = "snapshot_" + std::to_string(s.step) + ".txt";
    std::ofstream out(fs::path(directory) / name);
    out << "lorattr-snapshot 1\nstep " << s.step << "\nparameters " << s.parameters.size() << '\n';
    for (double v : s.parameters) {
      std::snprintf(buf, sizeof buf, "%a", v);
      out << buf << '\n';
    }
    manifest << s.step << ',' << name << '\n';
  }
  final_network.save_file((fs::path(directory) / "final_network.txt").string());
  manifest << "final," << "final_network.txt\n";
}

double ttr_m(const Trajectory& clean, const Trajectory& poisoned) {
  if (clean.snapshots.size() != poisoned.snapshots.size())
    throw ConfigError("ttr_m: snapshot schedules differ in length");
  if (clean.snapshots.empty()) throw ConfigError("ttr_m: empty trajectories");
  const Vector& c0 = clean.snapshots.front().parameters;
  const Vector& p0 = poisoned.snapshots.front().parameters;
  if (c0.size() != p0.size()) throw ConfigError("ttr_m: trajectories have different parameter counts");
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < clean.snapshots.size(); ++s) {
    const Snapshot& c = clean.snapshots[s];
    const Snapshot& p = poisoned.snapshots[s];
    if (c.step != p.step) throw ConfigError("ttr_m: snapshot steps are not aligned");
    if (c.step == 0) continue;
    double sq = 0.0;
    for (std::size_t i = 0; i < c0.size(); ++i) {
      const double d = (c.parameters[i] - c0[i]) - (p.parameters[i] - p0[i]);
      sq += d * d;
    }
    total += std::sqrt(sq);
    ++count;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

double ttr_m_prime(const Network& net, std::span<const std::pair<Vector, Vector>> pairs,
                   std::span<const std::size_t> outputs) {
  if (pairs.empty()) throw ConfigError("ttr_m_prime: no sample pairs");
  std::vector<std::size_t> ks(outputs.begin(), outputs.end());
  if (ks.empty()) {
    ks.resize(net.output_dim());
    std::iota(ks.begin(), ks.end(), 0);
  }
  Vector mean(ks.size(), 0.0);
  for (const auto& [clean, poisoned] : pairs) {
    const TangentFeatures fc = tangent_features(net, clean);
    const TangentFeatures fp = tangent_features(net, poisoned);
    for (std::size_t i = 0; i < ks.size(); ++i) mean[i] += empirical_ntk(net, fc, fp, ks[i], ks[i]);
  }
  for (double& v : mean) v /= static_cast<double>(pairs.size());
  return norm2(mean);
}

}  // namespace lorattr
