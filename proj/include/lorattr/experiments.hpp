#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorattr/attacks.hpp"
#include "lorattr/linalg.hpp"
#include "lorattr/network.hpp"
#include "lorattr/trainer.hpp"

namespace lorattr {

inline constexpr std::string_view kVersion = "0.1.0";

enum class Method { ff, lora };
std::string_view to_string(Method m);
Method parse_method(std::string_view name);

/// Typed view of a key = value configuration. Every key has a default; see
/// default_config_text() for the full schema.
struct ExperimentConfig {
  std::string experiment = "attack-sweep";  // verify | ntk | manifold | attack-sweep
  std::vector<Method> methods{Method::ff, Method::lora};
  std::vector<std::size_t> ranks{4};
  Vector var_scales{1.0 / 3.0};
  InitDistribution init = InitDistribution::kaiming_uniform;
  Vector rhos{0.0, 0.3};
  AttackKind attack = AttackKind::upa;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  // network
  std::vector<std::size_t> dims{32, 256, 256, 2};
  Activation activation = Activation::relu;
  Parameterization parameterization = Parameterization::standard;
  InitDistribution weight_init = InitDistribution::kaiming_uniform;
  double weight_scale = 2.0;
  bool bias = false;

  // data
  std::size_t n_train = 2000;
  std::size_t n_pretrain = 2000;
  std::size_t n_test = 2000;
  double separation = 3.0;
  double spread = 1.0;
  double trigger_value = 3.0;
  std::size_t target_label = 1;

  // adapters; alpha < 0 means alpha = rank
  std::vector<std::size_t> adapted_layers{1};
  double alpha = -1.0;
  bool freeze_a = true;
  bool freeze_base = true;
  bool scale_by_rank = true;

  // training
  double lr_ff = 0.05;
  double lr_lora = 0.5;
  std::size_t steps = 2000;
  std::size_t batch = 8;
  Loss loss = Loss::cross_entropy;
  std::size_t snapshot_every = 0;
  std::size_t pretrain_steps = 500;
  double pretrain_lr = 0.05;
  std::size_t prime_pairs = 64;

  // manifold / ntk / verify
  std::size_t manifold_n = 1024;
  std::size_t manifold_trials = 20;
  std::size_t ntk_pairs = 4;
  Vector verify_nsd_scales{0.05, 1.0 / 3.0, 0.9};
  double verify_control_scale = 1.5;

  std::string out = "results.csv";
  std::size_t workers = 1;
};

/// Ordered key -> raw value map. Parsing and overrides act on this; to_config()
/// validates and converts.
using ConfigMap = std::map<std::string, std::string>;

std::string default_config_text();
ConfigMap default_config_map();
/// Applies `key = value` lines ('#' starts a comment) on top of `base`.
/// Unknown keys and malformed lines raise ConfigError.
void apply_config_text(ConfigMap& base, std::string_view text);
/// "key=value".
void apply_override(ConfigMap& base, std::string_view assignment);
ExperimentConfig to_config(const ConfigMap& map);
/// Canonical "key=value\n" serialisation used for hashing.
std::string canonical_text(const ConfigMap& map);
/// FNV-1a 64 of canonical_text, as 16 hex digits.
std::string config_hash(const ConfigMap& map);
/// Lines starting with '#': version, config hash, seeds.
std::string provenance_header(const ConfigMap& map);

// ---------------------------------------------------------------- verify

struct CheckResult {
  std::string name;
  bool passed = false;
  bool expected_failure = false;  // designed counterexample: passes when the property breaks
  double measured = 0.0;
  double threshold = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_passed() const;
};

VerifyReport run_verify(const ExperimentConfig& cfg);
std::string to_json(const VerifyReport& report, const ConfigMap& map);

/// Output-space Fisher spectra (ascending) of a feed-forward net and its last-layer
/// adapter twin at initialisation, on random Gaussian inputs and labels. The adapter
/// uses alpha = rank and leaves the lower layers trainable.
struct FisherComparison {
  Vector ff;
  Vector lora;
};
FisherComparison fisher_comparison(std::size_t width, std::size_t rank, double scale, Loss loss, std::uint64_t seed);

// ------------------------------------------------------------ attack sweep

/// Columns: seed,method,rank,var_scale,init,attack,rho,step,accuracy,precision,recall,
/// f1,asr,ttr_m,ttr_m_prime,status. Unused fields are empty.
inline constexpr std::string_view kResultCsvHeader =
    "seed,method,rank,var_scale,init,attack,rho,step,accuracy,precision,recall,f1,asr,ttr_m,ttr_m_prime,status";

struct ResultRow {
  std::uint64_t seed = 0;
  Method method = Method::ff;
  std::size_t rank = 0;    // 0 for ff
  double var_scale = 0.0;  // unused for ff
  InitDistribution init = InitDistribution::kaiming_uniform;
  AttackKind attack = AttackKind::upa;
  double rho = 0.0;
  std::size_t step = 0;
  std::optional<double> accuracy, precision, recall, f1, asr, ttr_m, ttr_m_prime;
  std::string status = "ok";  // "diverged@<step>" when training blew up
};

struct SweepResult {
  std::vector<ResultRow> rows;
  std::vector<ResultRow> triggered_rows;  // bpa only: metrics on the triggered test set, original labels
  bool any_diverged() const;
};

SweepResult run_attack_sweep(const ExperimentConfig& cfg);
std::string result_csv(const std::vector<ResultRow>& rows);
/// mean,std over seeds for each (method,rank,var_scale,init,attack,rho,step), 4 significant digits.
std::string summary_csv(const std::vector<ResultRow>& rows);

/// Everything a sweep cell needs for one seed: the pretrained base net, the clean
/// train and test splits, and the attack spec.
struct AttackTask {
  Network base;
  LabeledDataset train;
  LabeledDataset test;
  AttackSpec spec;
};
AttackTask make_attack_task(const ExperimentConfig& cfg, std::uint64_t seed);
/// FF returns `base`; LoRA wraps it with the configured adapters.
Network make_method_net(const ExperimentConfig& cfg, const Network& base, Method method, std::size_t rank,
                        double scale, std::uint64_t seed);

// ---------------------------------------------------------------- manifold / ntk

std::string run_manifold(const ExperimentConfig& cfg);
/// JSON array of kernel reports over cfg.ntk_pairs random input pairs (first seed);
/// LoRA when methods lists lora only.
std::string run_ntk(const ExperimentConfig& cfg);

/// Runs fn(i) for i in [0, count) on up to `workers` threads, rethrowing the first
/// failure in index order.
void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace lorattr
