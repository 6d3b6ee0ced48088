#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "lorattr/errors.hpp"
#include "lorattr/experiments.hpp"

namespace {

enum ExitCode { kOk = 0, kOther = 1, kConfig = 2, kVerifyFailed = 3, kDiverged = 4 };

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw lorattr::ConfigError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// results.csv -> results.<tag>.csv
std::string sibling(const std::string& path, const std::string& tag) {
  const auto slash = path.find_last_of('/');
  const auto dot = path.find_last_of('.');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash)) return path + "." + tag + ".csv";
  return path.substr(0, dot) + "." + tag + path.substr(dot);
}

std::ofstream open_output(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw lorattr::ConfigError("output path '" + path + "' is not writable");
  return out;
}

struct Options {
  std::string config;
  std::string out;
  std::string seeds;
  std::size_t workers = 0;
  std::vector<std::string> overrides;
};

int run(const std::string& experiment, const Options& opt) {
  using namespace lorattr;
  ConfigMap map = default_config_map();
  if (!opt.config.empty()) apply_config_text(map, read_file(opt.config));
  for (const auto& o : opt.overrides) apply_override(map, o);
  map["experiment"] = experiment;
  if (!opt.seeds.empty()) map["seeds"] = opt.seeds;
  if (opt.workers > 0) map["workers"] = std::to_string(opt.workers);
  if (!opt.out.empty()) map["out"] = opt.out;
  else if (map["out"] == default_config_map().at("out") && experiment != "attack-sweep")
    map["out"] = experiment == "manifold" ? "manifold.csv" : experiment + ".json";
  const ExperimentConfig cfg = to_config(map);
  std::ofstream out = open_output(cfg.out);

  if (experiment == "verify") {
    const VerifyReport report = run_verify(cfg);
    out << to_json(report, map);
    for (const auto& c : report.checks)
      std::printf("%s %s measured=%.6g threshold=%.6g%s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(), c.measured,
                  c.threshold, c.expected_failure ? " (expected failure)" : "");
    std::printf("%zu checks, report written to %s\n", report.checks.size(), cfg.out.c_str());
    return report.all_passed() ? kOk : kVerifyFailed;
  }
  if (experiment == "ntk") {
    nlohmann::json j;
    j["version"] = kVersion;
    j["config_hash"] = config_hash(map);
    j["seeds"] = map["seeds"];
    j["pairs"] = nlohmann::json::parse(run_ntk(cfg));
    out << j.dump(2) << "\n";
    return kOk;
  }
  if (experiment == "manifold") {
    out << provenance_header(map) << run_manifold(cfg);
    return kOk;
  }
  const SweepResult result = run_attack_sweep(cfg);
  out << provenance_header(map) << result_csv(result.rows);
  std::ofstream summary = open_output(sibling(cfg.out, "summary"));
  summary << provenance_header(map) << summary_csv(result.rows);
  if (cfg.attack == AttackKind::bpa) {
    std::ofstream trig = open_output(sibling(cfg.out, "triggered"));
    trig << provenance_header(map) << result_csv(result.triggered_rows);
  }
  std::printf("%zu rows written to %s\n", result.rows.size(), cfg.out.c_str());
  return result.any_diverged() ? kDiverged : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel, information-geometry and poisoning experiments for LoRA vs full fine-tuning"};
  app.require_subcommand(0, 1);
  Options opt;
  bool print_defaults = false;
  app.add_flag("--print-config", print_defaults, "Print the default configuration and exit");
  const char* names[] = {"verify", "ntk", "manifold", "attack-sweep"};
  const char* help[] = {"Run the kernel and Fisher property checks (JSON report)",
                        "Dump empirical and analytic kernels for random input pairs (JSON)",
                        "Entropy grid over adapter rank and init variance (CSV)",
                        "Train FF/LoRA cells under label flipping or backdoor poisoning (CSV)"};
  std::vector<CLI::App*> subs;
  for (int i = 0; i < 4; ++i) {
    CLI::App* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", opt.config, "key = value configuration file");
    sub->add_option("--out", opt.out, "Output path");
    sub->add_option("--seeds", opt.seeds, "Comma-separated seed list");
    sub->add_option("--workers", opt.workers, "Concurrent cells");
    sub->add_option("--override", opt.overrides, "KEY=VALUE, repeatable");
    subs.push_back(sub);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }
  if (print_defaults) {
    std::cout << lorattr::default_config_text();
    return kOk;
  }
  try {
    for (int i = 0; i < 4; ++i)
      if (subs[i]->parsed()) return run(names[i], opt);
  } catch (const lorattr::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const lorattr::TrainingError& e) {
    std::fprintf(stderr, "training diverged: %s\n", e.what());
    return kDiverged;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kOther;
  }
  std::fprintf(stderr, "%s", app.help().c_str());
  return kConfig;
}
