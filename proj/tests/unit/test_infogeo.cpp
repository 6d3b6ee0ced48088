#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>

#include "lorattr/errors.hpp"
#include "lorattr/infogeo.hpp"
#include "lorattr/rng.hpp"

using namespace lorattr;

namespace {

LabeledDataset noise_data(std::size_t n, std::size_t dims, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  LabeledDataset d;
  for (std::size_t i = 0; i < n; ++i) {
    Vector x(dims);
    for (double& v : x) v = rng.normal();
    d.inputs.push_back(std::move(x));
    d.labels.push_back(static_cast<std::size_t>(rng.below(classes)));
    d.flags.push_back(SampleFlag::clean);
  }
  return d;
}

Network make_net(std::vector<std::size_t> dims, std::uint64_t seed, Parameterization p = Parameterization::ntk) {
  return Network::build({std::move(dims), Activation::relu, false, {InitDistribution::gaussian, 1.0, seed}, p});
}

double rel(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

Vector random_spectrum(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  Vector v(n);
  for (double& x : v) x = rng.uniform(0.01, 3.0);
  return v;
}

}  // namespace

TEST(Fisher, ParameterAndKernelRoutesAgree) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Network net = make_net({6, 20, 20, 3}, seed);
    const LabeledDataset data = noise_data(10, 6, 3, seed + 1);
    for (Loss loss : {Loss::cross_entropy, Loss::mse}) {
      const double a = fisher_scalar(net, data, loss);
      const double b = fisher_scalar_via_kernel(net, data, loss);
      EXPECT_LE(rel(b, a), 1e-8);
    }
  }
}

TEST(Fisher, RoutesAgreeWithAdapters) {
  LoraConfig lc;
  lc.adapted_layers = {1, 2};
  lc.rank = 2;
  lc.b_init = {InitDistribution::gaussian, 1.0, 4};
  const Network net = Network::build({{6, 12, 12, 3}, Activation::tanh, true, {InitDistribution::gaussian, 1.0, 2},
                                      Parameterization::standard},
                                     lc);
  const LabeledDataset data = noise_data(8, 6, 3, 9);
  EXPECT_LE(rel(fisher_scalar_via_kernel(net, data, Loss::cross_entropy), fisher_scalar(net, data, Loss::cross_entropy)),
            1e-8);
}

TEST(Fisher, PerfectMseFitGivesZero) {
  // Identity net on one-hot inputs reproduces the one-hot target exactly.
  const Network net = Network::build({{2, 2}, Activation::identity, false, {InitDistribution::identity, 1.0, 0},
                                      Parameterization::standard});
  LabeledDataset data;
  data.inputs = {{1.0, 0.0}, {0.0, 1.0}};
  data.labels = {0, 1};
  data.flags = {SampleFlag::clean, SampleFlag::clean};
  EXPECT_EQ(fisher_scalar(net, data, Loss::mse), 0.0);
  EXPECT_EQ(fisher_scalar_via_kernel(net, data, Loss::mse), 0.0);
  EXPECT_EQ(output_fisher_matrix(net, data, Loss::mse), Matrix(2, 2));
}

TEST(Fisher, FrozenNetworkGivesZero) {
  LoraConfig lc;
  lc.adapted_layers = {0};
  lc.rank = 2;
  lc.freeze_a = true;
  Network net = Network::build({{4, 4, 2}, Activation::relu, false, {InitDistribution::gaussian, 1.0, 1},
                                Parameterization::standard},
                               lc);
  net.layer(0).adapter->b_trainable = false;
  EXPECT_EQ(net.trainable_parameter_count(), 0u);
  const LabeledDataset data = noise_data(5, 4, 2, 1);
  EXPECT_EQ(fisher_scalar(net, data, Loss::cross_entropy), 0.0);
  EXPECT_EQ(fisher_scalar_via_kernel(net, data, Loss::cross_entropy), 0.0);
}

TEST(Fisher, EmptyDataThrows) {
  const Network net = make_net({4, 2}, 1);
  EXPECT_THROW(fisher_scalar(net, LabeledDataset{}, Loss::mse), DataError);
  EXPECT_THROW(output_fisher_matrix(net, LabeledDataset{}, Loss::mse), DataError);
}

TEST(OutputFisher, TraceEqualsScalar) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Network net = make_net({6, 24, 24, 4}, seed);
    const LabeledDataset data = noise_data(12, 6, 4, seed + 3);
    const Matrix phi = output_fisher_matrix(net, data, Loss::cross_entropy);
    double trace = 0.0;
    for (std::size_t i = 0; i < 4; ++i) trace += phi(i, i);
    EXPECT_LE(rel(trace, fisher_scalar(net, data, Loss::cross_entropy)), 1e-8);
    EXPECT_TRUE(is_symmetric(phi));
    EXPECT_GE(sym_eigvals(phi).front(), -1e-12 * trace);
  }
}

TEST(OutputFisher, SingleOutputEqualsScalar) {
  const Network net = make_net({5, 16, 1}, 3);
  LabeledDataset data = noise_data(6, 5, 1, 2);
  const Matrix phi = output_fisher_matrix(net, data, Loss::mse);
  ASSERT_EQ(phi.rows(), 1u);
  EXPECT_LE(rel(phi(0, 0), fisher_scalar(net, data, Loss::mse)), 1e-10);
}

TEST(PsdSqrt, SquaresBackAndRejectsIndefinite) {
  const Matrix m(2, 2, {2.0, 1.0, 1.0, 2.0});
  const Matrix r = psd_sqrt(m);
  const Matrix back = matmul(r, r);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(back.entries()[i], m.entries()[i], 1e-14);
  EXPECT_THROW(psd_sqrt(Matrix(2, 2, {1.0, 0.0, 0.0, -1.0})), NumericalError);
}

TEST(Spectrum, ClampToleratesRoundoffOnly) {
  EXPECT_EQ(clamp_spectrum(Vector{1.0, -1e-12}), (Vector{1.0, 0.0}));
  EXPECT_THROW(clamp_spectrum(Vector{1.0, -1e-3}), NumericalError);
  EXPECT_THROW(clamp_spectrum(Vector{std::nan("")}), NumericalError);
}

TEST(InformationBits, ClosedForms) {
  const auto ib = information_bits(Vector{1.0, 1.0, 0.0});
  EXPECT_DOUBLE_EQ(ib.paper, 1.0);
  EXPECT_DOUBLE_EQ(ib.logdet, 0.0);
  const auto empty = information_bits(Vector{});
  EXPECT_EQ(empty.paper, 0.0);
  EXPECT_EQ(empty.logdet, 0.0);
  EXPECT_DOUBLE_EQ(information_bits(Vector{std::exp(2.0), 4.0}).logdet, 0.5 * (2.0 + std::log(4.0)));
}

TEST(Renyi, UniformSpectrumGivesLogR) {
  const Vector u(5, 0.7);
  for (double a : {0.0, 0.5, 1.0, 2.0, 7.0, std::numeric_limits<double>::infinity()})
    EXPECT_NEAR(renyi_entropy(u, a, true), std::log(5.0), 1e-12) << a;
}

TEST(Renyi, RawSubstitution) {
  EXPECT_NEAR(renyi_entropy(Vector{1.0, 1.0}, 2.0, false), -std::log(2.0), 1e-15);
}

TEST(Renyi, ApproachesShannonNearOne) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Vector v = random_spectrum(12, s);
    EXPECT_LE(std::abs(renyi_entropy(v, 1.0001, true) - shannon_entropy(v, true)), 1e-3);
  }
}

TEST(Renyi, NonincreasingInAlpha) {
  const Vector alphas{0.5, 0.9, 1.0, 1.1, 2.0, std::numeric_limits<double>::infinity()};
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Vector v = random_spectrum(10, s + 100);
    double prev = std::numeric_limits<double>::infinity();
    for (double a : alphas) {
      const double h = renyi_entropy(v, a, true);
      EXPECT_LE(h, prev + 1e-12) << a;
      prev = h;
    }
  }
}

TEST(Renyi, LargeAlphaApproachesMinusLogMaxP) {
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Vector v = random_spectrum(8, s + 7);
    double sum = 0.0, mx = 0.0;
    for (double x : v) {
      sum += x;
      mx = std::max(mx, x);
    }
    // H_64 - (-log max P) is at most log(n) / 63 here, below 1e-3 only once P is peaked;
    // compare against the exact bound instead of a fixed 1e-3 for spread spectra.
    const double h = renyi_entropy(v, 64.0, true);
    EXPECT_GE(h, -std::log(mx / sum) - 1e-12);
    EXPECT_LE(h, -std::log(mx / sum) + std::log(8.0) / 63.0 + 1e-12);
  }
  const Vector peaked{1.0, 1e-3, 1e-3};
  EXPECT_NEAR(renyi_entropy(peaked, 64.0, true), -std::log(1.0 / 1.002), 1e-3);
}

TEST(Renyi, ZerosAreExcludedAndAllZeroThrows) {
  EXPECT_NEAR(renyi_entropy(Vector{0.5, 0.5, 0.0}, 0.0, true), std::log(2.0), 1e-15);
  EXPECT_NEAR(renyi_entropy(Vector{0.5, 0.5, 0.0}, 0.5, true), std::log(2.0), 1e-15);
  EXPECT_THROW(renyi_entropy(Vector{0.0, 0.0}, 2.0, true), NumericalError);
  EXPECT_THROW(renyi_entropy(Vector{1.0}, -1.0, true), ConfigError);
}

TEST(Shannon, ClosedForms) {
  EXPECT_EQ(shannon_entropy(Vector{0.0, 4.0}, true), 0.0);
  EXPECT_NEAR(shannon_entropy(Vector(6, 2.0), true), std::log(6.0), 1e-14);
  EXPECT_NEAR(shannon_entropy(Vector{std::exp(-1.0)}, false), std::exp(-1.0), 1e-15);
  EXPECT_THROW(shannon_entropy(Vector{}, true), NumericalError);
}

TEST(SpectrumReport, JsonMirrorsFields) {
  const Vector alphas{0.5, 2.0};
  const auto r = spectrum_report(Vector{1.0, 2.0, 0.0}, alphas);
  const auto j = nlohmann::json::parse(to_json(r));
  for (const char* key : {"eigenvalues", "ib_paper", "ib_logdet", "renyi", "shannon_normalized", "shannon_unnormalized"})
    EXPECT_TRUE(j.contains(key)) << key;
  EXPECT_EQ(j["renyi"].size(), 2u);
  EXPECT_DOUBLE_EQ(j["ib_paper"].get<double>(), 1.5);
}

TEST(Manifold, RankOneCellHasZeroNormalizedEntropy) {
  const std::vector<std::size_t> ranks{1};
  const Vector scales{0.5};
  const auto cells = entropy_manifold(64, ranks, scales, 3, 1);
  EXPECT_EQ(cells[0].h1_norm_mean, 0.0);
  EXPECT_EQ(cells[0].h1_norm_std, 0.0);
}

TEST(Manifold, GramSpectrumMatchesFullSpectrum) {
  const Matrix a = sample_matrix(4, 40, {InitDistribution::kaiming_uniform, 1.0 / 3.0, 3});
  const Vector small = nonzero_gram_spectrum(a);
  const Vector full = sym_eigvals(gram_of_columns(a));
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(small[i], full[36 + i], 1e-12);
  for (std::size_t i = 0; i < 36; ++i) EXPECT_NEAR(full[i], 0.0, 1e-12);
}

TEST(Manifold, UnnormalizedEntropyIncreasesWithRankAndScale) {
  const std::vector<std::size_t> ranks{2, 4, 8, 16, 32, 64};
  const Vector scales{0.01, 0.03, 0.1, 1.0 / 3.0};
  const auto cells = entropy_manifold(512, ranks, scales, 5, 42);
  ASSERT_EQ(cells.size(), ranks.size() * scales.size());
  for (std::size_t ri = 0; ri < ranks.size(); ++ri)
    for (std::size_t si = 0; si < scales.size(); ++si) {
      const auto& c = cells[ri * scales.size() + si];
      EXPECT_EQ(c.rank, ranks[ri]);
      EXPECT_EQ(c.scale, scales[si]);
      for (std::size_t t = 0; t < c.trials; ++t) {
        if (ri > 0) {
          EXPECT_GT(c.h1_unnorm_trials[t], cells[(ri - 1) * scales.size() + si].h1_unnorm_trials[t]);
        }
        if (si > 0) {
          EXPECT_GT(c.h1_unnorm_trials[t], cells[ri * scales.size() + si - 1].h1_unnorm_trials[t]);
        }
      }
    }
}

TEST(Manifold, ConcentratedCellMatchesPluggedValue) {
  const std::vector<std::size_t> ranks{8};
  const Vector scales{1.0 / 3.0};
  const auto cells = entropy_manifold(1024, ranks, scales, 10, 7);
  EXPECT_NEAR(cells[0].mean_nonzero_eig, 1.0 / 3.0, 0.05);
  EXPECT_NEAR(cells[0].h1_unnorm_mean / (8.0 / 3.0 * std::log(3.0)), 1.0, 0.1);
}

TEST(Manifold, DeterministicAcrossWorkerCounts) {
  const std::vector<std::size_t> ranks{2, 8};
  const Vector scales{0.1, 0.5};
  const auto one = entropy_manifold(128, ranks, scales, 4, 9, InitDistribution::gaussian, 1);
  const auto many = entropy_manifold(128, ranks, scales, 4, 9, InitDistribution::gaussian, 3);
  EXPECT_EQ(manifold_csv(one), manifold_csv(many));
  const std::string csv = manifold_csv(one);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kManifoldCsvHeader);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Manifold, RejectsBadGrid) {
  const std::vector<std::size_t> bad_rank{0};
  const std::vector<std::size_t> ok_rank{2};
  const Vector ok_scale{0.1}, bad_scale{0.0};
  EXPECT_THROW(entropy_manifold(16, bad_rank, ok_scale, 2, 1), ConfigError);
  EXPECT_THROW(entropy_manifold(16, ok_rank, bad_scale, 2, 1), ConfigError);
  EXPECT_THROW(entropy_manifold(1, ok_rank, ok_scale, 2, 1), ConfigError);
}
