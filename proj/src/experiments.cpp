#include "lorattr/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "lorattr/errors.hpp"
#include "lorattr/infogeo.hpp"
#include "lorattr/kernels.hpp"
#include "lorattr/rng.hpp"

namespace lorattr {

std::string_view to_string(Method m) { return m == Method::lora ? "lora" : "ff"; }

Method parse_method(std::string_view name) {
  if (name == "ff") return Method::ff;
  if (name == "lora") return Method::lora;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

void parallel_for(std::size_t count, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, count));
  std::vector<std::exception_ptr> errors(count);
  auto run = [&](std::size_t w) {
    for (std::size_t i = w; i < count; i += workers) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (workers == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run, w);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ------------------------------------------------------------------ config

std::string default_config_text() {
  return R"(# experiment: verify | ntk | manifold | attack-sweep
experiment = attack-sweep
# ff, lora (comma list)
methods = ff,lora
ranks = 4
# k in Var(A) = k / fan_in; fractions like 1/3 are accepted
var_scales = 1/3
# adapter A distribution: kaiming-uniform | gaussian | xavier-normal
init = kaiming-uniform
rhos = 0,0.3
# upa | bpa
attack = upa
seeds = 0,1,2

# network: n_0 .. n_L
dims = 32,256,256,2
# relu | tanh | identity
activation = relu
# standard | ntk
parameterization = standard
weight_init = kaiming-uniform
weight_scale = 2
bias = false

# data: two Gaussian blobs at +-separation along a fixed direction; the last
# coordinate carries no signal and hosts the backdoor trigger
n_train = 2000
n_pretrain = 2000
n_test = 2000
separation = 3
spread = 1
trigger_value = 3
target_label = 1

# adapters; alpha = rank or a number
adapted_layers = 1
alpha = rank
freeze_a = true
freeze_base = true
scale_by_rank = true

# training (plain minibatch SGD)
lr_ff = 0.05
lr_lora = 0.5
steps = 2000
batch = 8
# cross-entropy | mse
loss = cross-entropy
# 0: evaluate at the first and last step only
snapshot_every = 0
pretrain_steps = 500
pretrain_lr = 0.05
# poisoned pairs used for the kernel-side robustness metric
prime_pairs = 64

manifold_n = 1024
manifold_trials = 20
ntk_pairs = 4
verify_nsd_scales = 0.05,1/3,0.9
verify_control_scale = 1.5

out = results.csv
workers = 1
)";
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  const auto slash = v.find('/');
  if (slash != std::string::npos)
    return parse_real(key, trim(v.substr(0, slash))) / parse_real(key, trim(v.substr(slash + 1)));
  if (v == "inf") return std::numeric_limits<double>::infinity();
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(x))
    throw ConfigError("'" + key + "': expected a number, got '" + v + "'");
  return x;
}

std::uint64_t parse_count(const std::string& key, const std::string& v) {
  if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
    throw ConfigError("'" + key + "': expected a nonnegative integer, got '" + v + "'");
  return std::stoull(v);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("'" + key + "': expected true or false, got '" + v + "'");
}

template <typename T, typename F>
std::vector<T> parse_list(const std::string& key, const std::string& v, F&& item) {
  std::vector<T> out;
  for (const auto& s : split_list(v)) out.push_back(item(key, s));
  if (out.empty()) throw ConfigError("'" + key + "': empty list");
  return out;
}

template <typename F>
auto wrap(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const ConfigError& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

}  // namespace

ConfigMap default_config_map() {
  ConfigMap empty;
  std::istringstream in(default_config_text());
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    empty[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return empty;
}

void apply_override(ConfigMap& base, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("expected key = value, got '" + std::string(assignment) + "'");
  const std::string key = trim(assignment.substr(0, eq));
  if (!base.count(key)) throw ConfigError("unknown config key '" + key + "'");
  base[key] = trim(assignment.substr(eq + 1));
}

void apply_config_text(ConfigMap& base, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    try {
      apply_override(base, line);
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(number) + ": " + e.what());
    }
  }
}

ExperimentConfig to_config(const ConfigMap& map) {
  const ConfigMap defaults = default_config_map();
  for (const auto& [key, value] : map)
    if (!defaults.count(key)) throw ConfigError("unknown config key '" + key + "'");
  auto get = [&](const std::string& key) {
    const auto it = map.find(key);
    return it == map.end() ? defaults.at(key) : it->second;
  };
  auto real = [&](const char* k) { return parse_real(k, get(k)); };
  auto count = [&](const char* k) { return static_cast<std::size_t>(parse_count(k, get(k))); };
  auto flag = [&](const char* k) { return parse_bool(k, get(k)); };
  auto reals = [&](const char* k) { return parse_list<double>(k, get(k), parse_real); };
  auto counts = [&](const char* k) {
    return parse_list<std::size_t>(k, get(k), [](const std::string& kk, const std::string& v) {
      return static_cast<std::size_t>(parse_count(kk, v));
    });
  };

  ExperimentConfig c;
  c.experiment = get("experiment");
  if (c.experiment != "verify" && c.experiment != "ntk" && c.experiment != "manifold" &&
      c.experiment != "attack-sweep")
    throw ConfigError("'experiment': unknown experiment '" + c.experiment + "'");
  c.methods = parse_list<Method>("methods", get("methods"),
                                 [](const std::string& k, const std::string& v) { return wrap(k, [&] { return parse_method(v); }); });
  c.ranks = counts("ranks");
  c.var_scales = reals("var_scales");
  c.init = wrap("init", [&] { return parse_init_distribution(get("init")); });
  c.rhos = reals("rhos");
  c.attack = wrap("attack", [&] { return parse_attack_kind(get("attack")); });
  c.seeds = parse_list<std::uint64_t>("seeds", get("seeds"), parse_count);
  c.dims = counts("dims");
  c.activation = wrap("activation", [&] { return parse_activation(get("activation")); });
  c.parameterization = wrap("parameterization", [&] { return parse_parameterization(get("parameterization")); });
  c.weight_init = wrap("weight_init", [&] { return parse_init_distribution(get("weight_init")); });
  c.weight_scale = real("weight_scale");
  c.bias = flag("bias");
  c.n_train = count("n_train");
  c.n_pretrain = count("n_pretrain");
  c.n_test = count("n_test");
  c.separation = real("separation");
  c.spread = real("spread");
  c.trigger_value = real("trigger_value");
  c.target_label = count("target_label");
  c.adapted_layers = counts("adapted_layers");
  c.alpha = get("alpha") == "rank" ? -1.0 : real("alpha");
  c.freeze_a = flag("freeze_a");
  c.freeze_base = flag("freeze_base");
  c.scale_by_rank = flag("scale_by_rank");
  c.lr_ff = real("lr_ff");
  c.lr_lora = real("lr_lora");
  c.steps = count("steps");
  c.batch = count("batch");
  c.loss = wrap("loss", [&] { return parse_loss(get("loss")); });
  c.snapshot_every = count("snapshot_every");
  c.pretrain_steps = count("pretrain_steps");
  c.pretrain_lr = real("pretrain_lr");
  c.prime_pairs = count("prime_pairs");
  c.manifold_n = count("manifold_n");
  c.manifold_trials = count("manifold_trials");
  c.ntk_pairs = count("ntk_pairs");
  c.verify_nsd_scales = reals("verify_nsd_scales");
  c.verify_control_scale = real("verify_control_scale");
  c.out = get("out");
  c.workers = count("workers");

  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  require(c.dims.size() >= 2, "'dims': need at least input and output sizes");
  require(std::all_of(c.dims.begin(), c.dims.end(), [](std::size_t d) { return d > 0; }), "'dims': sizes must be >= 1");
  require(std::all_of(c.ranks.begin(), c.ranks.end(), [](std::size_t r) { return r > 0; }), "'ranks': ranks must be >= 1");
  require(std::all_of(c.var_scales.begin(), c.var_scales.end(), [](double k) { return k > 0.0; }),
          "'var_scales': scales must be > 0");
  require(std::all_of(c.rhos.begin(), c.rhos.end(), [](double r) { return r >= 0.0 && r <= 1.0; }),
          "'rhos': rates must lie in [0, 1]");
  for (std::size_t l : c.adapted_layers)
    require(l + 1 < c.dims.size(), "'adapted_layers': layer " + std::to_string(l) + " does not exist");
  require(c.weight_scale > 0.0, "'weight_scale' must be > 0");
  require(c.alpha == -1.0 || c.alpha > 0.0, "'alpha' must be 'rank' or > 0");
  require(c.lr_ff >= 0.0 && c.lr_lora >= 0.0 && c.pretrain_lr >= 0.0, "learning rates must be >= 0");
  require(c.steps >= 1, "'steps' must be >= 1");
  require(c.batch >= 1 && c.batch <= c.n_train, "'batch' must lie in [1, n_train]");
  require(c.workers >= 1, "'workers' must be >= 1");
  require(c.spread > 0.0, "'spread' must be > 0");
  require(!c.out.empty(), "'out' must name a file");
  if (c.experiment == "attack-sweep") {
    require(c.dims.back() == 2, "attack sweeps classify two blobs: the last entry of 'dims' must be 2");
    require(c.dims.front() >= 2, "attack sweeps need at least 2 input dimensions");
    require(c.target_label < 2, "'target_label' must be 0 or 1");
    require(c.n_train >= 2 && c.n_test >= 2 && c.n_pretrain >= 2, "data splits need at least 2 samples");
    require(c.pretrain_steps == 0 || c.batch <= c.n_pretrain, "'batch' exceeds n_pretrain");
  }
  return c;
}

std::string canonical_text(const ConfigMap& map) {
  ConfigMap full = default_config_map();
  for (const auto& [k, v] : map) full[k] = v;
  std::string out;
  for (const auto& [k, v] : full) out += k + "=" + v + "\n";
  return out;
}

std::string config_hash(const ConfigMap& map) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical_text(map)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string provenance_header(const ConfigMap& map) {
  const auto it = map.find("seeds");
  const std::string seeds = it == map.end() ? default_config_map().at("seeds") : it->second;
  std::string out = "# lorattr " + std::string(kVersion) + "\n";
  out += "# config_hash " + config_hash(map) + "\n";
  out += "# seeds " + seeds + "\n";
  return out;
}

// ------------------------------------------------------------------ verify

bool VerifyReport::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

namespace {

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", x);
  return buf;
}

Vector gaussian_vector(std::size_t n, Rng& rng) {
  Vector v(n);
  for (double& x : v) x = rng.normal();
  return v;
}

double median(Vector v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

Network verify_net(std::vector<std::size_t> dims, Parameterization p, std::uint64_t seed) {
  return Network::build({std::move(dims), Activation::relu, false, {InitDistribution::gaussian, 1.0, seed}, p});
}

Network last_layer_twin(const Network& base, std::size_t rank, double scale, InitDistribution dist,
                        std::uint64_t seed) {
  LoraConfig lc;
  lc.adapted_layers = {base.num_layers() - 1};
  lc.rank = rank;
  lc.alpha = static_cast<double>(rank);
  lc.a_init = {dist, scale, seed};
  lc.freeze_base = false;
  return Network::with_lora(base, lc);
}

// NSD iff the largest eigenvalue of A A^T is at most 1 (the other n - r eigenvalues of M are -1).
bool m_delta_nsd(std::size_t n, std::size_t r, double scale, InitDistribution dist, std::uint64_t seed) {
  const Matrix a = sample_matrix(r, n, {dist, scale, seed});
  return sym_eigvals(gram_of_rows(a)).back() - 1.0 <= 1e-10;
}

}  // namespace

FisherComparison fisher_comparison(std::size_t width, std::size_t rank, double scale, Loss loss, std::uint64_t seed) {
  constexpr std::size_t kInputs = 16, kOutputs = 8, kSamples = 16;
  const Network ff = Network::build({{kInputs, width, width, kOutputs}, Activation::relu, false,
                                     {InitDistribution::gaussian, 1.0, Rng::derive(seed, 0)},
                                     Parameterization::standard});
  const Network lora =
      last_layer_twin(ff, rank, scale, InitDistribution::kaiming_uniform, Rng::derive(seed, 1));
  Rng rng(Rng::derive(seed, 2));
  LabeledDataset data;
  for (std::size_t i = 0; i < kSamples; ++i) {
    data.inputs.push_back(gaussian_vector(kInputs, rng));
    data.labels.push_back(static_cast<std::size_t>(rng.below(kOutputs)));
    data.flags.push_back(SampleFlag::clean);
  }
  return {sym_eigvals(output_fisher_matrix(ff, data, loss)), sym_eigvals(output_fisher_matrix(lora, data, loss))};
}

VerifyReport run_verify(const ExperimentConfig& cfg) {
  VerifyReport report;
  auto add = [&](std::string name, bool passed, double measured, double threshold, std::string detail,
                 bool expected_failure = false) {
    report.checks.push_back({std::move(name), passed, expected_failure, measured, threshold, std::move(detail)});
  };
  const std::uint64_t root = cfg.seeds.front();

  {  // kernel symmetry, both modes
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 5; ++s) {
      const Network ff = verify_net({8, 32, 32, 4}, Parameterization::ntk, Rng::derive(root, s));
      const Network lora = last_layer_twin(ff, 4, 1.0 / 3.0, cfg.init, Rng::derive(root, 100 + s));
      Rng rng(Rng::derive(root, 200 + s));
      const Vector x = gaussian_vector(8, rng), xp = gaussian_vector(8, rng);
      for (const Network* net : {&ff, &lora}) {
        const Matrix a = empirical_ntk_matrix(*net, x, xp), b = empirical_ntk_matrix(*net, xp, x);
        for (std::size_t i = 0; i < 4; ++i)
          for (std::size_t j = 0; j < 4; ++j) worst = std::max(worst, std::abs(a(i, j) - b(j, i)));
      }
    }
    add("kernel_symmetry", worst == 0.0, worst, 0.0, "max |K(x,x') - K(x',x)^T| over 5 seeds, ff and lora");
  }

  {  // finite-width exactness of the adapter kernel gap
    double worst = 0.0;
    for (std::size_t width : {16u, 64u, 256u})
      for (std::uint64_t s = 0; s < 5; ++s) {
        const Network ff = verify_net({8, width, width, 4}, Parameterization::standard, Rng::derive(root, 300 + s));
        const Network lora = last_layer_twin(ff, 4, 1.0 / 3.0, cfg.init, Rng::derive(root, 400 + s));
        Rng rng(Rng::derive(root, 500 + s));
        const Vector x = gaussian_vector(8, rng), xp = gaussian_vector(8, rng);
        const double d = delta_r(ff.forward(x).trace, ff.forward(xp).trace, lora.layer(2).adapter->a, 2);
        for (std::size_t k = 0; k < 4; ++k)
          worst = std::max(worst, std::abs(empirical_ntk(lora, x, xp, k) - empirical_ntk(ff, x, xp, k) - d));
      }
    add("lora_kernel_gap_exact", worst <= 1e-10, worst, 1e-10, "max |K_lora - K_ff - delta_r|, widths 16/64/256");
  }

  for (std::size_t n : {256u, 1024u})
    for (double k : cfg.verify_nsd_scales)
      for (std::size_t r : {4u, 32u}) {
        std::size_t nsd = 0;
        for (std::uint64_t s = 0; s < 100; ++s) nsd += m_delta_nsd(n, r, k, cfg.init, Rng::derive(root, 1000 + s));
        add("m_delta_nsd n=" + std::to_string(n) + " k=" + fmt(k) + " r=" + std::to_string(r), nsd == 100,
            static_cast<double>(nsd), 100.0, "seeds (of 100) with max eig(A^T A - I) <= 0");
      }
  {
    std::size_t positive = 0;
    for (std::uint64_t s = 0; s < 100; ++s)
      positive += !m_delta_nsd(256, 4, cfg.verify_control_scale, cfg.init, Rng::derive(root, 1000 + s));
    add("m_delta_nsd_control k=" + fmt(cfg.verify_control_scale), positive >= 95, static_cast<double>(positive), 95.0,
        "seeds (of 100) with a positive eigenvalue; expected to break NSD", true);
  }

  {  // full-rank adapter: spectrum of A^T A against 1
    Vector medians;
    for (std::size_t n : {128u, 256u, 512u, 1024u}) {
      Vector dev;
      for (std::uint64_t s = 0; s < 20; ++s) {
        const Matrix a = sample_matrix(n, n, {cfg.init, 1.0, Rng::derive(root, 2000 + s)});
        const Vector ev = sym_eigvals(gram_of_rows(a));
        dev.push_back(std::max(std::abs(ev.front() - 1.0), std::abs(ev.back() - 1.0)));
      }
      medians.push_back(median(dev));
    }
    bool decreasing = true;
    std::string detail = "median max|eig(A^T A) - 1| for n = 128/256/512/1024:";
    for (std::size_t i = 0; i < medians.size(); ++i) {
      detail += " " + fmt(medians[i]);
      if (i > 0) decreasing = decreasing && medians[i] < medians[i - 1];
    }
    add("full_rank_spectrum_converges", decreasing, medians.back(), medians.front(), detail);
  }

  {  // entrywise W^T W -> I
    Vector medians;
    for (std::size_t n : {64u, 128u, 256u, 512u}) {
      Vector dev;
      for (std::uint64_t s = 0; s < 5; ++s)
        dev.push_back(max_abs(gram_of_columns(sample_matrix(n, n, {InitDistribution::gaussian, 1.0,
                                                                      Rng::derive(root, 3000 + s)})) -
                              Matrix::identity(n)));
      medians.push_back(median(dev));
    }
    bool decreasing = true;
    for (std::size_t i = 1; i < medians.size(); ++i) decreasing = decreasing && medians[i] < medians[i - 1];
    add("gram_entries_converge", decreasing, medians.back(), medians.front(),
        "median max|entry(W^T W - I)|, n = 64..512, last vs first");
  }

  {  // empirical kernel spread across init seeds shrinks with width
    Vector spreads;
    Rng rng(Rng::derive(root, 4000));
    const Vector x = gaussian_vector(8, rng), xp = gaussian_vector(8, rng);
    for (std::size_t width : {128u, 512u, 2048u}) {
      Vector values;
      for (std::uint64_t s = 0; s < 20; ++s)
        values.push_back(empirical_ntk(verify_net({8, width, width, 1}, Parameterization::ntk, Rng::derive(root, 4100 + s)),
                                       x, xp, 0));
      double mean = 0.0, var = 0.0;
      for (double v : values) mean += v / 20.0;
      for (double v : values) var += (v - mean) * (v - mean) / 19.0;
      spreads.push_back(std::sqrt(var) / std::abs(mean));
    }
    add("kernel_spread_shrinks_with_width", spreads[1] < spreads[0] && spreads[2] < spreads[1], spreads[2], spreads[0],
        "std/mean of K(x,x') over 20 seeds at widths 128/512/2048: " + fmt(spreads[0]) + " " + fmt(spreads[1]) + " " +
            fmt(spreads[2]));
  }

  {  // Fisher: parameter route vs kernel route, and the output-space trace
    double worst_route = 0.0, worst_trace = 0.0;
    for (std::uint64_t s = 0; s < 10; ++s) {
      const Network net = verify_net({6, 24, 24, 3}, Parameterization::ntk, Rng::derive(root, 5000 + s));
      Rng rng(Rng::derive(root, 5100 + s));
      LabeledDataset data;
      for (std::size_t i = 0; i < 12; ++i) {
        data.inputs.push_back(gaussian_vector(6, rng));
        data.labels.push_back(static_cast<std::size_t>(rng.below(3)));
        data.flags.push_back(SampleFlag::clean);
      }
      const double p = fisher_scalar(net, data, Loss::cross_entropy);
      worst_route = std::max(worst_route, std::abs(fisher_scalar_via_kernel(net, data, Loss::cross_entropy) - p) / p);
      const Matrix phi = output_fisher_matrix(net, data, Loss::cross_entropy);
      double trace = 0.0;
      for (std::size_t i = 0; i < phi.rows(); ++i) trace += phi(i, i);
      worst_trace = std::max(worst_trace, std::abs(trace - p) / p);
    }
    add("fisher_routes_agree", worst_route <= 1e-8, worst_route, 1e-8, "max rel. err over 10 nets");
    add("fisher_trace_identity", worst_trace <= 1e-8, worst_trace, 1e-8, "max rel. err of trace(Phi) over 10 nets");
  }

  {  // Fisher spectrum ordering, adapter vs full fine-tuning
    constexpr std::size_t kSeeds = 10;
    std::size_t eig_ok = 0, ibp_ok = 0, ibl_ok = 0, h05_ok = 0, h2_ok = 0, mono_ok = 0, lim_ok = 0;
    double worst_gap = -std::numeric_limits<double>::infinity(), worst_limit = 0.0, worst_bound = 0.0,
           worst_shannon = 0.0;
    const Vector alphas{0.5, 0.9, 1.0, 1.1, 2.0, std::numeric_limits<double>::infinity()};
    for (std::uint64_t s = 0; s < kSeeds; ++s) {
      const FisherComparison fc = fisher_comparison(512, 8, 1.0 / 3.0, Loss::mse, Rng::derive(root, 6000 + s));
      double gap = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < fc.ff.size(); ++i) gap = std::max(gap, fc.lora[i] - fc.ff[i]);
      worst_gap = std::max(worst_gap, gap);
      eig_ok += gap <= 1e-10;
      const Vector ff = clamp_spectrum(fc.ff), lo = clamp_spectrum(fc.lora);
      const auto ib_f = information_bits(ff), ib_l = information_bits(lo);
      ibp_ok += ib_l.paper <= ib_f.paper;
      ibl_ok += ib_l.logdet <= ib_f.logdet;
      h05_ok += renyi_entropy(lo, 0.5, true) <= renyi_entropy(ff, 0.5, true);
      h2_ok += renyi_entropy(lo, 2.0, true) <= renyi_entropy(ff, 2.0, true);
      for (const Vector* v : {&ff, &lo}) {
        double prev = std::numeric_limits<double>::infinity();
        bool mono = true;
        for (double a : alphas) {
          const double h = renyi_entropy(*v, a, true);
          mono = mono && h <= prev + 1e-12;
          prev = h;
        }
        mono_ok += mono;
        double sum = 0.0;
        for (double x : *v) sum += x;
        const double h_inf = -std::log(v->back() / sum);
        const double gap64 = renyi_entropy(*v, 64.0, true) - h_inf;
        worst_limit = std::max(worst_limit, std::abs(gap64));
        worst_bound = std::max(worst_bound, gap64 - h_inf / 63.0);
        lim_ok += gap64 >= -1e-12 && gap64 <= h_inf / 63.0 + 1e-12;
        worst_shannon = std::max(worst_shannon, std::abs(renyi_entropy(*v, 1.0001, true) - shannon_entropy(*v, true)));
      }
    }
    const std::string of = " (of " + std::to_string(kSeeds) + ", width 512, r = 8, k = 1/3, mse)";
    add("fisher_eigenvalues_ordered", eig_ok == kSeeds, static_cast<double>(eig_ok), kSeeds,
        "seeds with sorted eig(Phi_lora) <= eig(Phi_ff) + 1e-10" + of + "; worst gap " + fmt(worst_gap));
    add("ib_paper_ordered", ibp_ok == kSeeds, static_cast<double>(ibp_ok), kSeeds, "seeds with IB_lora <= IB_ff" + of);
    add("ib_logdet_ordered", ibl_ok == kSeeds, static_cast<double>(ibl_ok), kSeeds,
        "seeds with logdet IB_lora <= IB_ff" + of);
    add("renyi_0.5_ordered", h05_ok == kSeeds, static_cast<double>(h05_ok), kSeeds,
        "seeds with normalized H_0.5 lora <= ff" + of);
    add("renyi_2_ordered", h2_ok == kSeeds, static_cast<double>(h2_ok), kSeeds,
        "seeds with normalized H_2 lora <= ff" + of);
    add("renyi_nonincreasing_in_alpha", mono_ok == 2 * kSeeds, static_cast<double>(mono_ok), 2.0 * kSeeds,
        "Fisher spectra with H_alpha nonincreasing over 0.5, 0.9, 1, 1.1, 2, inf");
    add("renyi_alpha64_within_1e-3", worst_limit <= 1e-3, worst_limit, 1e-3,
        "max |H_64 - (-log max P)| on Fisher spectra");
    add("renyi_alpha64_bound", lim_ok == 2 * kSeeds, worst_bound, 0.0,
        "0 <= H_64 + log max P <= -log(max P) / 63 on every Fisher spectrum");
    add("renyi_shannon_limit", worst_shannon <= 1e-3, worst_shannon, 1e-3, "max |H_1.0001 - H_1| on Fisher spectra");
  }
  return report;
}

std::string to_json(const VerifyReport& report, const ConfigMap& map) {
  nlohmann::json j;
  j["version"] = kVersion;
  j["config_hash"] = config_hash(map);
  j["checks"] = nlohmann::json::array();
  std::size_t passed = 0;
  for (const auto& c : report.checks) {
    j["checks"].push_back({{"name", c.name},
                           {"passed", c.passed},
                           {"expected_failure", c.expected_failure},
                           {"measured", c.measured},
                           {"threshold", c.threshold},
                           {"detail", c.detail}});
    passed += c.passed;
  }
  j["passed"] = passed;
  j["failed"] = report.checks.size() - passed;
  return j.dump(2) + "\n";
}

// ------------------------------------------------------------- attack sweep

bool SweepResult::any_diverged() const {
  return std::any_of(rows.begin(), rows.end(), [](const ResultRow& r) { return r.status != "ok"; });
}

namespace {

enum SeedStream : std::uint64_t {
  kBaseInit = 1,
  kPretrainData,
  kPretrainShuffle,
  kTrainData,
  kTestData,
  kPoison,
  kAdapterInit,
  kTrainShuffle,
};

std::uint64_t stream(std::uint64_t seed, SeedStream s) { return Rng::derive(seed, s); }

// Train/test/pretrain splits differ only in their seeds, so they are disjoint draws of one task.
LabeledDataset blobs(const ExperimentConfig& cfg, std::size_t n, std::uint64_t seed) {
  return gen_blobs(n / 2, cfg.dims.front(), cfg.separation, cfg.spread, seed);
}

std::vector<std::pair<Vector, Vector>> poisoned_pairs(const LabeledDataset& clean, const LabeledDataset& poisoned,
                                                      std::size_t limit) {
  std::vector<std::pair<Vector, Vector>> pairs;
  for (std::size_t i = 0; i < poisoned.size() && pairs.size() < limit; ++i)
    if (poisoned.flags[i] != SampleFlag::clean) pairs.emplace_back(clean.inputs[i], poisoned.inputs[i]);
  return pairs;
}

struct CellOutput {
  std::vector<ResultRow> rows;
  std::vector<ResultRow> triggered;
};

}  // namespace

AttackTask make_attack_task(const ExperimentConfig& cfg, std::uint64_t seed) {
  AttackTask task;
  const NetworkSpec spec{cfg.dims, cfg.activation, cfg.bias, {cfg.weight_init, cfg.weight_scale, stream(seed, kBaseInit)},
                         cfg.parameterization};
  task.base = Network::build(spec);
  if (cfg.pretrain_steps > 0) {
    TrainConfig pre;
    pre.learning_rate = cfg.pretrain_lr;
    pre.steps = cfg.pretrain_steps;
    pre.batch_size = cfg.batch;
    pre.loss = cfg.loss;
    pre.seed = stream(seed, kPretrainShuffle);
    task.base = sgd_train(task.base, blobs(cfg, cfg.n_pretrain, stream(seed, kPretrainData)), pre).final_network;
  }
  task.train = blobs(cfg, cfg.n_train, stream(seed, kTrainData));
  task.test = blobs(cfg, cfg.n_test, stream(seed, kTestData));
  task.spec = {cfg.attack, 0.0, cfg.dims.front() - 1, cfg.trigger_value, cfg.target_label, stream(seed, kPoison)};
  return task;
}

Network make_method_net(const ExperimentConfig& cfg, const Network& base, Method method, std::size_t rank,
                        double scale, std::uint64_t seed) {
  if (method == Method::ff) return base;
  LoraConfig lc;
  lc.adapted_layers = cfg.adapted_layers;
  lc.rank = rank;
  lc.a_init = {cfg.init, scale, stream(seed, kAdapterInit)};
  lc.alpha = cfg.alpha < 0.0 ? static_cast<double>(rank) : cfg.alpha;
  lc.scale_by_rank = cfg.scale_by_rank;
  lc.freeze_a = cfg.freeze_a;
  lc.freeze_base = cfg.freeze_base;
  return Network::with_lora(base, lc);
}

SweepResult run_attack_sweep(const ExperimentConfig& cfg) {
  struct Cell {
    Method method;
    std::size_t rank;
    double scale;
  };
  std::vector<Cell> cells;
  for (Method m : cfg.methods) {
    if (m == Method::ff) {
      cells.push_back({m, 0, 0.0});
      continue;
    }
    for (std::size_t r : cfg.ranks)
      for (double k : cfg.var_scales) cells.push_back({m, r, k});
  }

  std::vector<AttackTask> tasks(cfg.seeds.size());
  parallel_for(tasks.size(), cfg.workers, [&](std::size_t i) { tasks[i] = make_attack_task(cfg, cfg.seeds[i]); });

  const std::size_t jobs = cfg.seeds.size() * cells.size();
  std::vector<CellOutput> outputs(jobs);
  parallel_for(jobs, cfg.workers, [&](std::size_t job) {
    const std::size_t si = job / cells.size();
    const Cell& cell = cells[job % cells.size()];
    const std::uint64_t seed = cfg.seeds[si];
    const AttackTask& task = tasks[si];
    const Network net = make_method_net(cfg, task.base, cell.method, cell.rank, cell.scale, seed);

    TrainConfig tc;
    tc.learning_rate = cell.method == Method::ff ? cfg.lr_ff : cfg.lr_lora;
    tc.steps = cfg.steps;
    tc.batch_size = cfg.batch;
    tc.loss = cfg.loss;
    tc.snapshot_every = cfg.snapshot_every;
    tc.seed = stream(seed, kTrainShuffle);

    ResultRow proto;
    proto.seed = seed;
    proto.method = cell.method;
    proto.rank = cell.rank;
    proto.var_scale = cell.scale;
    proto.init = cfg.init;
    proto.attack = cfg.attack;

    AttackSpec spec = task.spec;
    const LabeledDataset triggered_test =
        cfg.attack == AttackKind::bpa ? trigger_testset(task.test, spec) : LabeledDataset{};

    std::optional<Trajectory> clean;
    auto run = [&](double rho, bool record) {
      spec.rate = rho;
      const LabeledDataset data = rho == 0.0                      ? task.train
                                  : cfg.attack == AttackKind::upa ? upa_flip(task.train, rho, spec.seed)
                                                                  : bpa_inject(task.train, spec);
      const auto pairs = poisoned_pairs(task.train, data, cfg.prime_pairs);
      std::vector<ResultRow> rows, trig;
      auto observe = [&](std::size_t step, const Network& snap) {
        if (!record) return;
        ResultRow row = proto;
        row.rho = rho;
        row.step = step;
        const Metrics m = evaluate(snap, task.test);
        row.accuracy = m.accuracy;
        row.precision = m.precision;
        row.recall = m.recall;
        row.f1 = m.f1;
        if (!pairs.empty()) row.ttr_m_prime = ttr_m_prime(snap, pairs);
        if (cfg.attack == AttackKind::bpa) {
          const auto pred = predict_all(snap, triggered_test);
          row.asr = asr_from_predictions(pred, triggered_test.labels, cfg.target_label);
          ResultRow t = row;
          const Metrics tm = evaluate_predictions(pred, triggered_test.labels);
          t.accuracy = tm.accuracy;
          t.precision = tm.precision;
          t.recall = tm.recall;
          t.f1 = tm.f1;
          trig.push_back(t);
        }
        rows.push_back(row);
      };
      try {
        Trajectory traj = sgd_train(net, data, tc, observe);
        if (rho == 0.0) {
          for (auto& r : rows) r.ttr_m = 0.0;
          for (auto& r : trig) r.ttr_m = 0.0;
          clean = std::move(traj);
        } else if (clean) {
          Trajectory a, b;
          for (std::size_t j = 0; j < rows.size(); ++j) {
            a.snapshots.push_back(clean->snapshots[j]);
            b.snapshots.push_back(traj.snapshots[j]);
            rows[j].ttr_m = ttr_m(a, b);
            if (j < trig.size()) trig[j].ttr_m = rows[j].ttr_m;
          }
        }
      } catch (const TrainingError& e) {
        ResultRow row = proto;
        row.rho = rho;
        row.step = e.step();
        row.status = "diverged@" + std::to_string(e.step());
        rows = {row};
        if (cfg.attack == AttackKind::bpa) trig = {row};
      }
      CellOutput& out = outputs[job];
      out.rows.insert(out.rows.end(), rows.begin(), rows.end());
      out.triggered.insert(out.triggered.end(), trig.begin(), trig.end());
    };

    const bool clean_listed = std::find(cfg.rhos.begin(), cfg.rhos.end(), 0.0) != cfg.rhos.end();
    if (!clean_listed) run(0.0, false);
    for (double rho : cfg.rhos) {
      if (rho == 0.0 && clean) {  // listed twice: reuse the trained clean run's rows
        std::vector<ResultRow> again;
        for (const auto& r : outputs[job].rows)
          if (r.rho == 0.0) again.push_back(r);
        outputs[job].rows.insert(outputs[job].rows.end(), again.begin(), again.end());
        continue;
      }
      run(rho, true);
    }
  });

  SweepResult result;
  for (auto& o : outputs) {
    result.rows.insert(result.rows.end(), o.rows.begin(), o.rows.end());
    result.triggered_rows.insert(result.triggered_rows.end(), o.triggered.begin(), o.triggered.end());
  }
  return result;
}

namespace {

std::string num17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string num4(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

std::string opt17(const std::optional<double>& v) { return v ? num17(*v) : std::string(); }

std::string key_columns(const ResultRow& r) {
  std::string s = std::string(to_string(r.method)) + ",";
  if (r.method == Method::lora) s += std::to_string(r.rank) + "," + num17(r.var_scale) + "," + std::string(to_string(r.init));
  else s += ",,";
  s += "," + std::string(to_string(r.attack)) + "," + num17(r.rho) + "," + std::to_string(r.step);
  return s;
}

}  // namespace

std::string result_csv(const std::vector<ResultRow>& rows) {
  std::string out = std::string(kResultCsvHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.seed) + "," + key_columns(r) + "," + opt17(r.accuracy) + "," + opt17(r.precision) + "," +
           opt17(r.recall) + "," + opt17(r.f1) + "," + opt17(r.asr) + "," + opt17(r.ttr_m) + "," +
           opt17(r.ttr_m_prime) + "," + r.status + "\n";
  }
  return out;
}

std::string summary_csv(const std::vector<ResultRow>& rows) {
  static const char* kMetrics[] = {"accuracy", "precision", "recall", "f1", "asr", "ttr_m", "ttr_m_prime"};
  std::vector<std::string> order;
  std::map<std::string, std::vector<const ResultRow*>> groups;
  for (const auto& r : rows) {
    const std::string key = key_columns(r);
    if (!groups.count(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  std::string out = "method,rank,var_scale,init,attack,rho,step,n";
  for (const char* m : kMetrics) out += std::string(",") + m + "_mean," + m + "_std";
  out += "\n";
  for (const auto& key : order) {
    const auto& g = groups[key];
    out += key + "," + std::to_string(g.size());
    for (std::size_t mi = 0; mi < 7; ++mi) {
      Vector v;
      for (const ResultRow* r : g) {
        const std::optional<double>* fields[] = {&r->accuracy, &r->precision, &r->recall, &r->f1,
                                                 &r->asr,      &r->ttr_m,     &r->ttr_m_prime};
        if (*fields[mi]) v.push_back(**fields[mi]);
      }
      if (v.empty()) {
        out += ",,";
        continue;
      }
      double mean = 0.0, var = 0.0;
      for (double x : v) mean += x / static_cast<double>(v.size());
      for (double x : v) var += (x - mean) * (x - mean);
      const double sd = v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1)) : 0.0;
      out += "," + num4(mean) + "," + num4(sd);
    }
    out += "\n";
  }
  return out;
}

// ------------------------------------------------------------- manifold / ntk

std::string run_manifold(const ExperimentConfig& cfg) {
  for (std::size_t r : cfg.ranks)
    if (r > cfg.manifold_n) throw ConfigError("manifold rank " + std::to_string(r) + " exceeds manifold_n");
  const auto cells = entropy_manifold(cfg.manifold_n, cfg.ranks, cfg.var_scales, cfg.manifold_trials,
                                      cfg.seeds.front(), cfg.init, cfg.workers);
  return manifold_csv(cells);
}

std::string run_ntk(const ExperimentConfig& cfg) {
  const std::uint64_t seed = cfg.seeds.front();
  const NetworkSpec spec{cfg.dims, cfg.activation, cfg.bias, {cfg.weight_init, cfg.weight_scale, stream(seed, kBaseInit)},
                         cfg.parameterization};
  const Network base = Network::build(spec);
  const bool lora_only = std::all_of(cfg.methods.begin(), cfg.methods.end(), [](Method m) { return m == Method::lora; });
  const Network net =
      lora_only ? make_method_net(cfg, base, Method::lora, cfg.ranks.front(), cfg.var_scales.front(), seed) : base;
  Rng rng(stream(seed, kTestData));
  nlohmann::json out = nlohmann::json::array();
  for (std::size_t i = 0; i < cfg.ntk_pairs; ++i) {
    const Vector x = gaussian_vector(cfg.dims.front(), rng), xp = gaussian_vector(cfg.dims.front(), rng);
    out.push_back(nlohmann::json::parse(to_json(kernel_report(net, x, xp))));
  }
  return out.dump(2) + "\n";
}

}  // namespace lorattr
