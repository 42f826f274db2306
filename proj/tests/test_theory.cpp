#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <vector>

#include "fedopt/theory.hpp"
#include "oracles.hpp"

using namespace fedopt;

namespace {

ProblemConstants single(double sigma, double G, std::size_t K, double gamma, std::size_t S) {
  ProblemConstants c;
  c.L = 1.0;
  c.sigma = {sigma};
  c.G = {G};
  c.p = {1.0};
  c.K = K;
  c.gamma = gamma;
  c.S = S;
  return c;
}

// Two one-point quadratic clients 1/2 ||x - c_i||^2.
std::vector<ClientShard> point_clients(const std::vector<double>& centers, const std::vector<double>& w) {
  std::vector<ClientShard> shards(centers.size());
  for (std::size_t i = 0; i < centers.size(); ++i) {
    shards[i].data = Dataset(1, 1, {centers[i]}, {0});
    shards[i].weight = w[i];
  }
  return shards;
}

}  // namespace

TEST(ComputeV, Examples) {
  EXPECT_EQ(compute_V(single(1.0, 2.0, 2, 0.0, 1)), 0.0);
  EXPECT_NEAR(compute_V(single(1.0, 2.0, 2, 0.1, 1)), 5.12, 1e-12);
  const auto terms = compute_V_terms(single(1.0, 2.0, 2, 0.1, 1));
  EXPECT_NEAR(terms.partial_participation, 4.32, 1e-12);
  // 1/S -> 0 leaves only the local-update term 4 K^2 gamma^2 sum p (sigma^2 + G^2)
  EXPECT_NEAR(terms.local_updates, 4.0 * 4.0 * 0.01 * 5.0, 1e-12);
  EXPECT_NEAR(compute_V_terms(single(1.0, 2.0, 2, 0.1, 1000000000)).partial_participation, 0.0, 1e-8);
}

TEST(ComputeV, WeightedOverClients) {
  ProblemConstants c;
  c.sigma = {1.0, 3.0};
  c.G = {2.0, 0.5};
  c.p = {0.25, 0.75};
  c.K = 3;
  c.gamma = 0.05;
  c.S = 2;
  const double ss = 0.25 * 1.0 + 0.75 * 9.0;
  const double gg = 0.25 * 4.0 + 0.75 * 0.25;
  const double kg2 = 9.0 * 0.0025;
  EXPECT_NEAR(compute_V(c), kg2 * ((12 * ss + 24 * gg) / 2.0 + 4 * (ss + gg)), 1e-12);
}

TEST(ComputeV, MonotoneInItsArguments) {
  RngStream rng(80, 0);
  for (int trial = 0; trial < 200; ++trial) {
    const auto base = single(rng.uniform(0.0, 3.0), rng.uniform(0.0, 3.0), 1 + rng.uniform_index(10),
                             rng.uniform(0.0, 0.2), 1 + rng.uniform_index(10));
    const double v = compute_V(base);
    auto c = base;
    c.gamma *= 1.5;
    EXPECT_GE(compute_V(c), v);
    c = base;
    c.K += 1;
    EXPECT_GE(compute_V(c), v);
    c = base;
    c.sigma[0] += 0.5;
    EXPECT_GE(compute_V(c), v);
    c = base;
    c.G[0] += 0.5;
    EXPECT_GE(compute_V(c), v);
    c = base;
    c.S += 1;
    EXPECT_LE(compute_V(c), v);
  }
}

TEST(ComputeV, RejectsInconsistentConstants) {
  auto c = single(1.0, 1.0, 1, 0.1, 1);
  c.G.push_back(1.0);
  EXPECT_THROW(compute_V(c), StructuralError);
  c = single(-1.0, 1.0, 1, 0.1, 1);
  EXPECT_THROW(compute_V(c), ParameterError);
}

TEST(MuPair, Examples) {
  const auto eps0 = mu_pair(EpsilonCalibration{0.01}, 0.0);
  EXPECT_DOUBLE_EQ(eps0.lower, 100.0);
  EXPECT_DOUBLE_EQ(eps0.upper, 100.0);
  for (double V : {0.0, 1.0, 1e6}) {
    EXPECT_DOUBLE_EQ(mu_pair(SoftplusCalibration{50.0}, V).upper, 50.0 / std::log(2.0));
  }
  const auto eps1 = mu_pair(EpsilonCalibration{0.01}, 1.0);
  EXPECT_NEAR(eps1.lower, 0.990099, 1e-6);
  EXPECT_DOUBLE_EQ(eps1.upper, 100.0);
  const auto id = mu_pair(IdentityCalibration{}, 42.0);
  EXPECT_EQ(id.lower, 1.0);
  EXPECT_EQ(id.upper, 1.0);
  const auto pw = mu_pair(PowerCalibration{0.25, 1e-4}, 16.0);
  EXPECT_NEAR(pw.lower, 1.0 / std::pow(16.0001, 0.25), 1e-15);
  EXPECT_NEAR(pw.upper, 10.0, 1e-12);
  EXPECT_THROW(mu_pair(EpsilonCalibration{0.01}, -1.0), ParameterError);
}

TEST(MuPair, SandwichesEveryStepsize) {
  RngStream rng(81, 0);
  const std::vector<Calibration> cals{EpsilonCalibration{1e-3}, PowerCalibration{0.25, 1e-6},
                                      PowerCalibration{0.5, 1e-2}, SoftplusCalibration{50.0},
                                      SoftplusCalibration{0.5}, IdentityCalibration{}};
  for (const auto& cal : cals) {
    for (double V : {0.0, 1e-6, 1.0, 123.0}) {
      const auto mu = mu_pair(cal, V);
      EXPECT_LE(mu.lower, mu.upper);
      for (int i = 0; i < 5000; ++i) {
        const double v = i == 0 ? 0.0 : (i == 1 ? V : rng.uniform(0.0, V));
        const double s = 1.0 / calibrate_value(v, cal);
        ASSERT_GE(s, mu.lower * (1.0 - 1e-15));
        ASSERT_LE(s, mu.upper * (1.0 + 1e-15));
      }
    }
  }
}

TEST(MuPair, ScalingWithInnerStepLength) {
  // sigma = 0 makes V proportional to (K gamma)^2
  for (auto [K, gamma] : {std::pair<std::size_t, double>{4, 0.05}, {10, 0.1}, {2, 0.5}}) {
    const double V1 = compute_V(single(0.0, 100.0, K, gamma, 5));
    const double V2 = compute_V(single(0.0, 100.0, K, 2.0 * gamma, 5));
    EXPECT_NEAR(V2 / V1, 4.0, 1e-12);
    const auto eps_ratio = mu_pair(EpsilonCalibration{1e-3}, V2).lower / mu_pair(EpsilonCalibration{1e-3}, V1).lower;
    EXPECT_NEAR(eps_ratio, 0.5, 0.025);
    const auto sp_ratio =
        mu_pair(SoftplusCalibration{50.0}, V2).lower / mu_pair(SoftplusCalibration{50.0}, V1).lower;
    EXPECT_NEAR(sp_ratio, 0.5, 0.025);
    for (double p : {0.125, 0.25, 0.5}) {
      const auto r = mu_pair(PowerCalibration{p, 1e-8}, V2).lower / mu_pair(PowerCalibration{p, 1e-8}, V1).lower;
      EXPECT_NEAR(r, std::pow(2.0, -2.0 * p), 0.05 * std::pow(2.0, -2.0 * p));
    }
  }
}

TEST(StepsizeAdmissible, Branches) {
  auto c = single(1.0, 2.0, 10, 0.001, 1);
  c.L = 1e6;
  auto a = stepsize_admissible(c, mu_pair(EpsilonCalibration{0.01}, 1.0));
  EXPECT_TRUE(a.smoothness_binds);
  EXPECT_DOUBLE_EQ(a.gamma_max, 1.0 / (8e6 * 10));
  EXPECT_FALSE(a.ok);

  c.L = 1.0;
  a = stepsize_admissible(c, mu_pair(IdentityCalibration{}, 5.0));
  EXPECT_DOUBLE_EQ(a.gamma_max, std::min(1.0 / 80.0, 1.0 / (10.0 * std::sqrt(10.0))));
  EXPECT_TRUE(a.ok);

  c = single(1.0, 2.0, 2, 0.1, 1);  // V = 5.12
  c.K = 10;
  const double V = 5.12;
  const auto mu = mu_pair(EpsilonCalibration{0.01}, V);
  a = stepsize_admissible(c, mu);
  const double mu_limit = std::sqrt(mu.lower / (10.0 * mu.upper)) / 10.0;
  EXPECT_DOUBLE_EQ(a.adaptivity_limit, mu_limit);
  EXPECT_DOUBLE_EQ(a.gamma_max, std::min(0.0125, mu_limit));
  EXPECT_EQ(a.gamma_max < 0.0125, !a.smoothness_binds);
  EXPECT_FALSE(a.smoothness_binds);

  c.L = 0.0;
  EXPECT_THROW(stepsize_admissible(c, mu), ParameterError);
}

TEST(EmpiricalSigmaG, IidClientsGiveZero) {
  RngStream rng(82, 0);
  const auto data = oracle::random_points(rng, 10, 3);
  std::vector<ClientShard> shards(4);
  for (auto& s : shards) {
    s.data = data;
    s.weight = 0.25;
  }
  const std::vector<Task> tasks{Task::quadratic({1.0, 2.0, 0.5})};
  std::vector<ParamVector> probes;
  for (int i = 0; i < 5; ++i) probes.push_back(oracle::random_params(rng, 3, 2.0));
  EXPECT_EQ(empirical_sigma_g(tasks, shards, probes), 0.0);
}

TEST(EmpiricalSigmaG, SymmetricPairIsOneEverywhere) {
  const auto shards = point_clients({0.0, 2.0}, {0.5, 0.5});
  const std::vector<Task> tasks{Task::quadratic({1.0})};
  for (double x : {-3.0, 0.0, 1.0, 7.5}) {
    EXPECT_NEAR(empirical_sigma_g(tasks, shards, std::vector<ParamVector>{{x}}), 1.0, 1e-14);
    EXPECT_NEAR(empirical_sigma_g(tasks, shards, std::vector<ParamVector>{{x}}, DissimilarityWeighting::Uniform),
                1.0, 1e-14);
  }
  EXPECT_THROW(empirical_sigma_g(tasks, shards, std::vector<ParamVector>{}), ParameterError);
}

TEST(EmpiricalSigmaG, WeightingChoiceMatters) {
  // p = (0.9, 0.1): grad f = x - 0.2, deviations 0.2 and -1.8
  const auto shards = point_clients({0.0, 2.0}, {0.9, 0.1});
  const std::vector<Task> tasks{Task::quadratic({1.0})};
  const std::vector<ParamVector> probe{{0.0}};
  EXPECT_NEAR(empirical_sigma_g(tasks, shards, probe), 0.9 * 0.04 + 0.1 * 3.24, 1e-14);
  EXPECT_NEAR(empirical_sigma_g(tasks, shards, probe, DissimilarityWeighting::Uniform), 0.5 * (0.04 + 3.24), 1e-14);
}

TEST(EmpiricalSigmaG, GrowsWithHeterogeneity) {
  std::vector<double> mean(10, 0.0);
  for (std::size_t h = 0; h < 10; ++h) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      RngStream rng(83, seed);
      QuadraticFamilySpec spec;
      spec.curvature_max = 2.0;
      spec.shared_curvature = true;
      const auto fq = make_synthetic_federated_quadratic(8, 4, 0.25 * static_cast<double>(h), rng, spec);
      const auto shards = shards_from(fq.data, fq.weights);
      const std::vector<ParamVector> probes{fq.optimum, ParamVector(4)};
      mean[h] += empirical_sigma_g(fq.tasks, shards, probes) / 20.0;
    }
  }
  EXPECT_LT(mean[0], 1e-20);
  for (std::size_t h = 0; h + 1 < mean.size(); ++h) EXPECT_LT(mean[h], mean[h + 1]) << h;
}

TEST(GradientMoment, DeterministicSingleClient) {
  RngStream rng(84, 0);
  const std::vector<Task> tasks{Task::quadratic({1.0, 3.0})};
  std::vector<ClientShard> shards(1);
  shards[0].data = oracle::random_points(rng, 6, 2);
  shards[0].weight = 1.0;
  const ParamVector x{2.0, -1.0};
  SamplingSpec full;
  full.mode = SamplingMode::Full;
  const auto draws = draw_aggregated_gradients(tasks, shards, x, full, 0, 1000, rng);
  const auto g = full_gradient(tasks[0], shards[0].data, x);
  for (const auto& d : draws) ASSERT_EQ(d, g);
  const auto c = single(0.0, std::sqrt(l2_norm_sq(g)), 1, 0.1, 1);
  const auto r = verify_gradient_moment_bound(draws, g, c);
  EXPECT_NEAR(r.empirical_second_moment, l2_norm_sq(g), 1e-12 * l2_norm_sq(g));
  EXPECT_NEAR(r.bound, 28.0 * l2_norm_sq(g), 1e-12);
  EXPECT_TRUE(r.satisfied);
  EXPECT_TRUE(r.mean_matches);
  EXPECT_LT(r.max_abs_z, 1e-3);
  EXPECT_THROW(verify_gradient_moment_bound(std::span(draws).first(999), g, c), ParameterError);
}

TEST(GradientMoment, QuadraticBoundHoldsAcrossSeeds) {
  std::size_t satisfied = 0, matched = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(85, seed);
    QuadraticFamilySpec spec;
    spec.samples_per_client = 20;
    spec.curvature_max = 2.0;
    spec.unbalanced = true;
    const auto fq = make_synthetic_federated_quadratic(2, 3, 1.0, rng, spec);
    const auto shards = shards_from(fq.data, fq.weights);
    SamplingSpec sampling;
    sampling.clients_per_round = 2;
    const auto c = quadratic_constants(fq.tasks, shards, fq.optimum, 1.0, 4, 1, 0.01, 2, 1.0);
    const auto x = axpy(0.5, ParamVector{1.0, -1.0, 0.5}, fq.optimum);  // inside the radius-1 ball
    const auto draws = draw_aggregated_gradients(fq.tasks, shards, x, sampling, 4, 2000, rng);
    const auto target = global_gradient(fq.tasks, shards, x);
    const auto r = verify_gradient_moment_bound(draws, target, c);
    satisfied += r.satisfied;
    matched += r.mean_matches;
  }
  EXPECT_EQ(satisfied, 20u);
  EXPECT_GE(matched, 18u);
}

TEST(QuadraticConstants, BoundGradientsInsideTheBall) {
  RngStream rng(86, 0);
  QuadraticFamilySpec spec;
  spec.curvature_max = 3.0;
  spec.unbalanced = true;
  const auto fq = make_synthetic_federated_quadratic(5, 4, 1.5, rng, spec);
  const auto shards = shards_from(fq.data, fq.weights);
  const double radius = 2.0;
  const auto c = quadratic_constants(fq.tasks, shards, fq.optimum, radius, 10, 3, 0.01, 2, 1.0);
  EXPECT_DOUBLE_EQ(c.L, fq.smoothness);
  for (int i = 0; i < 500; ++i) {
    ParamVector u = oracle::random_params(rng, 4, 1.0);
    const double scale = radius * rng.uniform() / std::sqrt(l2_norm_sq(u));
    const auto x = axpy(scale, u, fq.optimum);
    const auto grads = client_gradients(fq.tasks, shards, x);
    for (std::size_t k = 0; k < grads.size(); ++k) ASSERT_LE(std::sqrt(l2_norm_sq(grads[k])), c.G[k] * (1 + 1e-12));
    ASSERT_LE(dissimilarity_at(grads, shards), c.sigma_g * c.sigma_g * (1 + 1e-12));
  }
  for (std::size_t k = 0; k < shards.size(); ++k) {
    EXPECT_DOUBLE_EQ(c.sigma[k] * c.sigma[k], quadratic_minibatch_variance(fq.tasks[k], shards[k].data, 10));
  }
}

TEST(DriftBound, SingleStepAndInapplicableStepsize) {
  const auto shards = point_clients({0.0, 2.0}, {0.5, 0.5});
  const std::vector<Task> tasks{Task::quadratic({1.0})};
  LocalConfig cfg;
  cfg.steps = 1;
  cfg.gamma = 0.05;
  const auto drift = weighted_drift_at(tasks, shards, ParamVector{5.0}, cfg, 1, 0);
  ASSERT_EQ(drift.size(), 2u);
  EXPECT_EQ(drift[0], 0.0);

  ProblemConstants c;
  c.L = 1.0;
  c.sigma = {0.0, 0.0};
  c.G = {6.0, 6.0};
  c.p = {0.5, 0.5};
  c.sigma_g = 1.0;
  c.K = 1;
  c.gamma = 0.05;
  DriftTrace tr;
  tr.weighted_drift = {drift};
  tr.grad_norm_sq = {16.0};
  const auto r = verify_drift_bound(std::vector<DriftTrace>{tr}, c);
  EXPECT_TRUE(r.applicable);
  EXPECT_EQ(r.checked, 2u);
  EXPECT_EQ(r.violations, 0u);

  c.gamma = 0.2;  // > 1 / (8 L K)
  const auto na = verify_drift_bound(std::vector<DriftTrace>{tr}, c);
  EXPECT_FALSE(na.applicable);
  EXPECT_EQ(na.checked, 0u);
  EXPECT_FALSE(na.notes.empty());
  EXPECT_THROW(verify_drift_bound(std::vector<DriftTrace>{}, c), ParameterError);
}

TEST(DriftBound, RightHandSideFormula) {
  ProblemConstants c = single(2.0, 1.0, 4, 0.01, 1);
  c.sigma_g = 3.0;
  EXPECT_NEAR(drift_rhs(c, 0.5), 5 * 4 * 1e-4 * (4.0 + 2 * 4 * 9.0) + 10 * 16 * 1e-4 * 0.5, 1e-15);
  c.gamma = 0.0;
  EXPECT_EQ(drift_rhs(c, 10.0), 0.0);
}

TEST(RateEnvelope, ConvergedStartIsNotFlagged) {
  const std::vector<double> zeros(100, 0.0);
  const auto r = rate_envelope(zeros, MuPair{}, single(0, 0, 1, 0.1, 1));
  EXPECT_FALSE(r.flagged);
  EXPECT_EQ(r.running_avg_final, 0.0);
  EXPECT_EQ(r.fit_residual, 0.0);
}

TEST(RateEnvelope, DivergentHistoryIsFlagged) {
  std::vector<double> g;
  for (int t = 0; t < 50; ++t) g.push_back(std::pow(1.5, t));
  EXPECT_TRUE(rate_envelope(g, MuPair{}, single(0, 0, 1, 0.1, 1)).flagged);
  g.back() = std::numeric_limits<double>::infinity();
  EXPECT_TRUE(rate_envelope(g, MuPair{}, single(0, 0, 1, 0.1, 1)).flagged);
  EXPECT_THROW(rate_envelope(std::span(g).first(19), MuPair{}, single(0, 0, 1, 0.1, 1)), ParameterError);
}

TEST(RateEnvelope, InverseSqrtHistoryFitsExactly) {
  // g_t chosen so the running average is exactly 3 / sqrt(t)
  std::vector<double> g;
  double prev = 0.0;
  for (int t = 1; t <= 400; ++t) {
    const double R = 3.0 / std::sqrt(static_cast<double>(t));
    g.push_back(t * R - prev);
    prev = t * R;
  }
  const auto r = rate_envelope(g, MuPair{}, single(0, 0, 1, 0.1, 1));
  EXPECT_NEAR(r.fit_c0, 3.0, 1e-9);
  EXPECT_LT(r.fit_residual, 1e-9);
  EXPECT_TRUE(r.decreasing);
  EXPECT_NEAR(r.ratio, 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_FALSE(r.halved);
}
