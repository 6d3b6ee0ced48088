#include <gtest/gtest.h>

#include <algorithm>
#include <nlohmann/json.hpp>

#include "lorattr/errors.hpp"
#include "lorattr/experiments.hpp"
#include "lorattr/infogeo.hpp"

using namespace lorattr;

namespace {

ConfigMap with(std::initializer_list<const char*> overrides) {
  ConfigMap m = default_config_map();
  for (const char* o : overrides) apply_override(m, o);
  return m;
}

ConfigMap small_sweep() {
  return with({"dims=8,32,32,2", "n_train=200", "n_pretrain=200", "n_test=200", "steps=60", "pretrain_steps=30",
               "separation=2", "ranks=2", "rhos=0,0.1,0.3", "seeds=0,1,2,3,4,5,6,7,8,9", "prime_pairs=8"});
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Config, DefaultsParse) {
  const ExperimentConfig c = to_config(default_config_map());
  EXPECT_EQ(c.experiment, "attack-sweep");
  EXPECT_EQ(c.methods.size(), 2u);
  EXPECT_DOUBLE_EQ(c.var_scales.front(), 1.0 / 3.0);
  EXPECT_EQ(c.alpha, -1.0);
  EXPECT_EQ(c.dims, (std::vector<std::size_t>{32, 256, 256, 2}));
  EXPECT_TRUE(c.freeze_a);
}

TEST(Config, TextAndOverrides) {
  ConfigMap m = default_config_map();
  apply_config_text(m, "# comment\nranks = 4, 16 ,64\nalpha = 8  # trailing\n\nattack=bpa\n");
  apply_override(m, "rhos = 0.05");
  const ExperimentConfig c = to_config(m);
  EXPECT_EQ(c.ranks, (std::vector<std::size_t>{4, 16, 64}));
  EXPECT_EQ(c.alpha, 8.0);
  EXPECT_EQ(c.attack, AttackKind::bpa);
  EXPECT_EQ(c.rhos, (Vector{0.05}));
}

TEST(Config, RejectsBadInput) {
  ConfigMap m = default_config_map();
  EXPECT_THROW(apply_override(m, "nosuchkey=1"), ConfigError);
  EXPECT_THROW(apply_override(m, "ranks"), ConfigError);
  EXPECT_THROW(apply_config_text(m, "ranks = 4\nbogus = 2\n"), ConfigError);
  for (const char* bad : {"ranks=0", "ranks=-1", "var_scales=0", "rhos=1.5", "dims=4", "dims=4,8,3",
                          "adapted_layers=3", "batch=0", "steps=0", "freeze_a=maybe", "loss=hinge",
                          "experiment=train", "methods=full", "alpha=-2", "workers=0", "seeds=", "init=laplace"})
    EXPECT_THROW(to_config(with({bad})), ConfigError) << bad;
}

TEST(Config, HashIsCanonical) {
  const ConfigMap a = default_config_map();
  ConfigMap b = a;
  b.erase("ranks");  // missing keys read as defaults
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_NE(config_hash(a), config_hash(with({"ranks=8"})));
  const std::string h = provenance_header(a);
  EXPECT_EQ(lines(h), 3u);
  EXPECT_NE(h.find("# config_hash " + config_hash(a)), std::string::npos);
  EXPECT_NE(h.find("# seeds 0,1,2"), std::string::npos);
}

TEST(Verify, ReportsEveryRegisteredCheckAndTheControl) {
  const ConfigMap m = with({"verify_nsd_scales=0.05,1.5"});
  const VerifyReport r = run_verify(to_config(m));
  // symmetry, gap, 2 widths x 2 scales x 2 ranks, control, 3 convergence, 2 Fisher, 9 ordering/entropy
  EXPECT_EQ(r.checks.size(), 2u + 8u + 1u + 3u + 2u + 9u);
  for (const auto& c : r.checks) {
    if (c.name.rfind("m_delta_nsd n=", 0) == 0) {
      EXPECT_EQ(c.passed, c.name.find("k=1.5") == std::string::npos) << c.name;
    }
    if (c.name.rfind("m_delta_nsd_control", 0) == 0) {
      EXPECT_TRUE(c.passed);
      EXPECT_TRUE(c.expected_failure);
    }
    if (c.name == "lora_kernel_gap_exact" || c.name == "fisher_routes_agree" || c.name == "kernel_symmetry") {
      EXPECT_TRUE(c.passed) << c.name;
    }
  }
  EXPECT_FALSE(r.all_passed());
  const auto j = nlohmann::json::parse(to_json(r, m));
  EXPECT_EQ(j["checks"].size(), r.checks.size());
  EXPECT_EQ(j["config_hash"], config_hash(m));
}

TEST(Sweep, RowCountAndDeterminism) {
  const ExperimentConfig c = to_config(small_sweep());
  const SweepResult a = run_attack_sweep(c);
  // 2 methods x 3 rates x 10 seeds, two evaluated snapshots each
  EXPECT_EQ(a.rows.size(), 120u);
  EXPECT_TRUE(a.triggered_rows.empty());
  EXPECT_FALSE(a.any_diverged());
  EXPECT_EQ(result_csv(a.rows), result_csv(run_attack_sweep(c).rows));
  ExperimentConfig parallel = c;
  parallel.workers = 3;
  EXPECT_EQ(result_csv(a.rows), result_csv(run_attack_sweep(parallel).rows));
}

TEST(Sweep, RowContents) {
  const SweepResult r = run_attack_sweep(to_config(small_sweep()));
  for (const auto& row : r.rows) {
    ASSERT_TRUE(row.accuracy && row.f1 && row.ttr_m);
    EXPECT_FALSE(row.asr);
    if (row.method == Method::ff) {
      EXPECT_EQ(row.rank, 0u);
    } else {
      EXPECT_EQ(row.rank, 2u);
    }
    if (row.rho == 0.0) {
      EXPECT_EQ(*row.ttr_m, 0.0);
      EXPECT_FALSE(row.ttr_m_prime);
    } else {
      ASSERT_TRUE(row.ttr_m_prime);
      EXPECT_GE(*row.ttr_m_prime, 0.0);
      if (row.step == 0) {
        EXPECT_EQ(*row.ttr_m, 0.0);
      } else {
        EXPECT_GT(*row.ttr_m, 0.0);
      }
    }
  }
  const std::string csv = result_csv(r.rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kResultCsvHeader);
  EXPECT_NE(csv.find("\n0,ff,,,,upa,0,0,"), std::string::npos);
  const std::string summary = summary_csv(r.rows);
  EXPECT_EQ(lines(summary), 1u + 2u * 3u * 2u);
  EXPECT_NE(summary.find("lora,2,0.33333333333333331,kaiming-uniform,upa,0.29999999999999999,60,10,"), std::string::npos);
}

TEST(Sweep, BackdoorFillsAsrAndTriggeredRows) {
  ConfigMap m = small_sweep();
  apply_override(m, "attack=bpa");
  apply_override(m, "rhos=0.1");
  apply_override(m, "seeds=0,1");
  apply_override(m, "snapshot_every=20");
  const SweepResult r = run_attack_sweep(to_config(m));
  ASSERT_EQ(r.rows.size(), 2u * 2u * 4u);
  ASSERT_EQ(r.triggered_rows.size(), r.rows.size());
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    ASSERT_TRUE(r.rows[i].asr);
    EXPECT_EQ(r.triggered_rows[i].asr, r.rows[i].asr);
    EXPECT_EQ(r.triggered_rows[i].step, r.rows[i].step);
    EXPECT_EQ(r.triggered_rows[i].ttr_m, r.rows[i].ttr_m);
  }
}

TEST(Sweep, DivergenceIsRecordedInRow) {
  ConfigMap m = small_sweep();
  for (const char* o : {"seeds=0", "rhos=0,0.1", "loss=mse", "lr_ff=1e4", "activation=identity", "pretrain_steps=0"})
    apply_override(m, o);
  const SweepResult r = run_attack_sweep(to_config(m));
  EXPECT_TRUE(r.any_diverged());
  bool ff_diverged = false, lora_ok = false;
  for (const auto& row : r.rows) {
    if (row.method == Method::ff) {
      ff_diverged = ff_diverged || row.status.rfind("diverged@", 0) == 0;
      if (row.status != "ok") {
        EXPECT_FALSE(row.accuracy);
      }
    }
    lora_ok = lora_ok || (row.method == Method::lora && row.status == "ok");
  }
  EXPECT_TRUE(ff_diverged);
  EXPECT_TRUE(lora_ok);
  EXPECT_NE(result_csv(r.rows).find(",diverged@"), std::string::npos);
}

TEST(Sweep, CleanAccuraciesAgreeUnderDefaults) {
  ConfigMap m = default_config_map();
  apply_override(m, "rhos=0");
  apply_override(m, "seeds=0,1,2");
  const SweepResult r = run_attack_sweep(to_config(m));
  double ff = 0.0, lora = 0.0;
  for (const auto& row : r.rows) {
    if (row.step != 2000) continue;
    (row.method == Method::ff ? ff : lora) += *row.accuracy / 3.0;
  }
  EXPECT_GE(ff, 0.95);
  EXPECT_LE(std::abs(ff - lora), 0.03);
}

TEST(Manifold, GridDeterministicWithHeader) {
  const ConfigMap m = with({"experiment=manifold", "ranks=2,4,8", "var_scales=0.1,1/3", "manifold_n=128",
                            "manifold_trials=4"});
  const std::string a = run_manifold(to_config(m));
  EXPECT_EQ(a, run_manifold(to_config(m)));
  EXPECT_EQ(a.substr(0, a.find('\n')), kManifoldCsvHeader);
  EXPECT_EQ(lines(a), 1u + 6u);
  EXPECT_THROW(run_manifold(to_config(with({"ranks=256", "manifold_n=128"}))), ConfigError);
}

TEST(Ntk, ReportsEachPair) {
  const auto j = nlohmann::json::parse(
      run_ntk(to_config(with({"experiment=ntk", "dims=4,16,4", "ntk_pairs=3", "methods=lora", "adapted_layers=0"}))));
  ASSERT_EQ(j.size(), 3u);
  EXPECT_TRUE(j[0].contains("empirical"));
}

TEST(ParallelFor, RethrowsInIndexOrder) {
  std::vector<int> hit(10, 0);
  parallel_for(10, 3, [&](std::size_t i) { hit[i] = 1; });
  EXPECT_EQ(std::count(hit.begin(), hit.end(), 1), 10);
  try {
    parallel_for(6, 2, [](std::size_t i) {
      if (i >= 3) throw DataError("job " + std::to_string(i));
    });
    FAIL();
  } catch (const DataError& e) {
    EXPECT_STREQ(e.what(), "job 3");
  }
}
