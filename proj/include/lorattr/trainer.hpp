#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lorattr/attacks.hpp"
#include "lorattr/network.hpp"

namespace lorattr {

struct TrainConfig {
  double learning_rate = 0.05;
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  Loss loss = Loss::cross_entropy;
  std::size_t snapshot_every = 0;  // 0: only the first and last step
  std::uint64_t seed = 0;
};

struct Snapshot {
  std::size_t step = 0;
  Vector parameters;  // trainable parameters only
};

struct Trajectory {
  std::vector<Snapshot> snapshots;
  Vector step_losses;  // mean minibatch loss per step
  Network final_network;

  /// Persists each snapshot's network-blob-compatible parameter dump plus a manifest
  /// (step,file) into `directory`.
  void save(const std::string& directory) const;
};

/// Called with the network as it stands at every snapshot, including step 0.
using SnapshotObserver = std::function<void(std::size_t step, const Network& net)>;

/// Plain minibatch SGD. Minibatches walk a seeded permutation of the data; a new
/// permutation is drawn whenever fewer than batch_size samples remain.
Trajectory sgd_train(Network net, const LabeledDataset& data, const TrainConfig& cfg,
                     const SnapshotObserver& on_snapshot = {});

/// Mean over shared snapshot steps t > 0 of || (theta(t) - theta(0)) - (theta~(t) - theta~(0)) ||_2.
double ttr_m(const Trajectory& clean, const Trajectory& poisoned);

/// || mean over pairs of (K_k(x, x~))_{k in outputs} ||_2, empirical kernel per output.
double ttr_m_prime(const Network& net, std::span<const std::pair<Vector, Vector>> pairs,
                   std::span<const std::size_t> outputs = {});

}  // namespace lorattr
