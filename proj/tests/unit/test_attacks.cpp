#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "lorattr/attacks.hpp"
#include "lorattr/errors.hpp"
#include "lorattr/rng.hpp"

using namespace lorattr;

namespace {

double probe_accuracy(const LabeledDataset& d) {
  const Vector u = default_blob_direction(d.dims());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t pred = dot(u, d.inputs[i]) > 0.0 ? 1 : 0;
    correct += pred == d.labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(d.size());
}

}  // namespace

TEST(Blobs, DeterministicAndBalanced) {
  const auto a = gen_blobs(50, 8, 3.0, 1.0, 11);
  const auto b = gen_blobs(50, 8, 3.0, 1.0, 11);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, gen_blobs(50, 8, 3.0, 1.0, 12));
  ASSERT_EQ(a.size(), 100u);
  EXPECT_EQ(std::accumulate(a.labels.begin(), a.labels.end(), std::size_t{0}), 50u);
  EXPECT_EQ(a.count(SampleFlag::clean), 100u);
}

TEST(Blobs, LinearProbeMatchesGaussianTail) {
  // The mean-difference direction is the Bayes classifier: accuracy Phi(mu / sigma).
  const auto d = gen_blobs(5000, 16, 1.0, 1.0, 3);
  const double bayes = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));
  const double sd = std::sqrt(bayes * (1 - bayes) / 10000.0);
  EXPECT_NEAR(probe_accuracy(d), bayes, 4 * sd);
  EXPECT_GE(probe_accuracy(gen_blobs(2000, 32, 3.0, 1.0, 4)), 0.99);
}

TEST(Blobs, ZeroSeparationIsChance) {
  EXPECT_NEAR(probe_accuracy(gen_blobs(5000, 8, 0.0, 1.0, 5)), 0.5, 0.03);
}

TEST(Blobs, TriggerCoordinateCarriesNoSignal) {
  const auto d = gen_blobs(4000, 6, 3.0, 1.0, 6);
  double m0 = 0.0, m1 = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) (d.labels[i] ? m1 : m0) += d.inputs[i].back();
  EXPECT_NEAR(m0 / 4000.0, 0.0, 0.07);
  EXPECT_NEAR(m1 / 4000.0, 0.0, 0.07);
}

TEST(Blobs, RejectsBadShapes) {
  EXPECT_THROW(gen_blobs(5, 1, 1.0, 1.0, 0), ConfigError);
  const Vector dir{1.0, 0.0, 1.0};
  EXPECT_THROW(gen_blobs(5, 3, 1.0, 1.0, 0, dir), ConfigError);
  EXPECT_THROW(gen_blobs(5, 4, 1.0, 1.0, 0, dir), DimensionError);
}

TEST(PoisonCount, RoundsHalfUp) {
  EXPECT_EQ(poison_count(1000, 0.3), 300u);
  EXPECT_EQ(poison_count(3, 0.5), 2u);
  EXPECT_EQ(poison_count(10, 0.0), 0u);
  EXPECT_EQ(poison_count(10, 1.0), 10u);
  EXPECT_THROW(poison_count(10, 1.5), ConfigError);
  EXPECT_THROW(poison_count(10, -0.1), ConfigError);
}

TEST(Choose, DistinctAndDeterministic) {
  const auto a = choose_without_replacement(100, 40, 9);
  EXPECT_EQ(std::set<std::size_t>(a.begin(), a.end()).size(), 40u);
  EXPECT_EQ(a, choose_without_replacement(100, 40, 9));
  EXPECT_THROW(choose_without_replacement(3, 4, 0), ConfigError);
}

TEST(Upa, ZeroRateIsIdentity) {
  const auto d = gen_blobs(100, 4, 2.0, 1.0, 1);
  EXPECT_EQ(upa_flip(d, 0.0, 3), d);
}

TEST(Upa, FullRateFlipsEverything) {
  const auto d = gen_blobs(100, 4, 2.0, 1.0, 1);
  const auto p = upa_flip(d, 1.0, 3);
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(p.labels[i], 1 - d.labels[i]);
    EXPECT_EQ(p.inputs[i], d.inputs[i]);
  }
  EXPECT_EQ(p.count(SampleFlag::flipped), 200u);
}

TEST(Upa, FlipsExactlyTheRoundedCount) {
  const auto d = gen_blobs(500, 4, 2.0, 1.0, 2);
  const auto p = upa_flip(d, 0.3, 8);
  std::size_t changed = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    const bool flipped = p.flags[i] == SampleFlag::flipped;
    EXPECT_EQ(flipped, p.labels[i] != d.labels[i]);
    changed += flipped;
  }
  EXPECT_EQ(changed, 300u);
  EXPECT_EQ(p.count(SampleFlag::clean) + p.count(SampleFlag::flipped), p.size());
  EXPECT_EQ(p, upa_flip(d, 0.3, 8));
}

TEST(Bpa, InjectsTriggerAndTarget) {
  const auto d = gen_blobs(1000, 6, 2.0, 1.0, 3);
  AttackSpec spec{AttackKind::bpa, 0.05, 5, 3.0, 1, 17};
  const auto p = bpa_inject(d, spec);
  EXPECT_EQ(p.count(SampleFlag::triggered), 100u);
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::size_t diffs = 0;
    for (std::size_t j = 0; j < 6; ++j) diffs += p.inputs[i][j] != d.inputs[i][j];
    if (p.flags[i] == SampleFlag::triggered) {
      EXPECT_EQ(p.labels[i], 1u);
      EXPECT_EQ(p.inputs[i][5], 3.0);
      EXPECT_LE(diffs, 1u);
    } else {
      EXPECT_EQ(diffs, 0u);
      EXPECT_EQ(p.labels[i], d.labels[i]);
    }
  }
}

TEST(Bpa, RejectsBadSpecs) {
  const auto d = gen_blobs(10, 4, 2.0, 1.0, 3);
  AttackSpec spec{AttackKind::bpa, 0.1, 4, 3.0, 1, 0};
  EXPECT_THROW(bpa_inject(d, spec), ConfigError);
  spec.trigger_index = 3;
  spec.kind = AttackKind::upa;
  EXPECT_THROW(bpa_inject(d, spec), ConfigError);
  EXPECT_THROW(trigger_testset(d, spec), ConfigError);
}

TEST(Bpa, TriggerTestsetKeepsLabels) {
  const auto d = gen_blobs(20, 4, 2.0, 1.0, 3);
  const AttackSpec spec{AttackKind::bpa, 0.1, 3, 2.5, 1, 0};
  const auto t = trigger_testset(d, spec);
  EXPECT_EQ(t.labels, d.labels);
  for (const auto& x : t.inputs) EXPECT_EQ(x[3], 2.5);
  EXPECT_EQ(t.count(SampleFlag::triggered), t.size());
}

TEST(Metrics, PerfectPredictor) {
  const std::vector<std::size_t> y{0, 1, 1, 0};
  const Metrics m = evaluate_predictions(y, y);
  EXPECT_EQ(m.accuracy, 1.0);
  EXPECT_EQ(m.precision, 1.0);
  EXPECT_EQ(m.recall, 1.0);
  EXPECT_EQ(m.f1, 1.0);
}

TEST(Metrics, ConstantPositivePredictor) {
  const std::vector<std::size_t> y{0, 1, 0, 1};
  const std::vector<std::size_t> p{1, 1, 1, 1};
  const Metrics m = evaluate_predictions(p, y);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
  EXPECT_DOUBLE_EQ(m.precision, 0.5);
  EXPECT_DOUBLE_EQ(m.recall, 1.0);
  EXPECT_DOUBLE_EQ(m.f1, 2.0 / 3.0);
}

TEST(Metrics, NoPositivePredictionsGiveZeros) {
  const std::vector<std::size_t> y{0, 1};
  const std::vector<std::size_t> p{0, 0};
  const Metrics m = evaluate_predictions(p, y);
  EXPECT_DOUBLE_EQ(m.accuracy, 0.5);
  EXPECT_EQ(m.precision, 0.0);
  EXPECT_EQ(m.recall, 0.0);
  EXPECT_EQ(m.f1, 0.0);
}

TEST(Metrics, RandomPredictorIsChance) {
  Rng rng(5);
  std::vector<std::size_t> y(20000), p(20000);
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = rng.below(2);
    p[i] = rng.below(2);
  }
  EXPECT_NEAR(evaluate_predictions(p, y).accuracy, 0.5, 0.02);
}

TEST(Metrics, ErrorPaths) {
  const std::vector<std::size_t> a{0, 1}, b{0}, bad{2, 0}, none;
  EXPECT_THROW(evaluate_predictions(a, b), DimensionError);
  EXPECT_THROW(evaluate_predictions(none, none), DataError);
  EXPECT_THROW(evaluate_predictions(a, bad), DataError);
}

TEST(Asr, CountsOnlyNonTargetSamples) {
  const std::vector<std::size_t> y{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(asr_from_predictions(std::vector<std::size_t>{1, 0, 1, 0}, y, 1), 0.5);
  EXPECT_DOUBLE_EQ(asr_from_predictions(std::vector<std::size_t>{1, 1, 0, 0}, y, 1), 1.0);
  EXPECT_THROW(asr_from_predictions(std::vector<std::size_t>{1, 1}, std::vector<std::size_t>{1, 1}, 1), DataError);
}

TEST(Asr, NetworkRoute) {
  // Output 1 reads the trigger coordinate, so a large trigger always wins.
  Network net = Network::build({{3, 2}, Activation::identity, true, {InitDistribution::zero, 1.0, 0},
                                Parameterization::standard});
  net.layer(0).weight(1, 2) = 1.0;
  const auto test = gen_blobs(50, 3, 2.0, 1.0, 2);
  const AttackSpec spec{AttackKind::bpa, 0.0, 2, 5.0, 1, 0};
  EXPECT_DOUBLE_EQ(asr(net, trigger_testset(test, spec), 1), 1.0);
}

TEST(DatasetCsv, RoundTrip) {
  const auto d = upa_flip(gen_blobs(10, 3, 2.0, 1.0, 2), 0.4, 1);
  std::stringstream ss;
  d.save_csv(ss);
  EXPECT_EQ(ss.str().substr(0, ss.str().find('\n')), "x_0,x_1,x_2,label,flag");
  LabeledDataset back = LabeledDataset::load_csv(ss);
  back.seed = d.seed;
  EXPECT_EQ(back, d);
}

TEST(DatasetCsv, RejectsGarbage) {
  std::stringstream empty;
  EXPECT_THROW(LabeledDataset::load_csv(empty), DataError);
  std::stringstream bad("x_0,label,flag\nfoo,0,clean\n");
  EXPECT_THROW(LabeledDataset::load_csv(bad), DataError);
  std::stringstream flag("x_0,label,flag\n1.0,0,dirty\n");
  EXPECT_THROW(LabeledDataset::load_csv(flag), DataError);
}

TEST(AttackKind, ParseRoundTrip) {
  EXPECT_EQ(parse_attack_kind(to_string(AttackKind::bpa)), AttackKind::bpa);
  EXPECT_EQ(parse_attack_kind(to_string(AttackKind::upa)), AttackKind::upa);
  EXPECT_THROW(parse_attack_kind("dpa"), ConfigError);
}
