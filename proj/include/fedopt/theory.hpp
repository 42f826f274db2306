#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

#include "fedopt/error.hpp"
#include "fedopt/local.hpp"
#include "fedopt/numerics.hpp"
#include "fedopt/partition.hpp"
#include "fedopt/random.hpp"
#include "fedopt/sampling.hpp"
#include "fedopt/server.hpp"
#include "fedopt/tasks.hpp"

namespace fedopt {

// Constants of the smoothness / bounded-gradient / bounded-variance /
// bounded-dissimilarity assumptions, plus the algorithm knobs the bounds use.
struct ProblemConstants {
  double L = 0.0;
  std::vector<double> sigma;  // per-client gradient-noise std
  std::vector<double> G;      // per-client gradient-norm bound
  double sigma_g = 0.0;       // dissimilarity bound (std, i.e. sqrt of the squared bound)
  std::vector<double> p;
  std::size_t K = 1;
  double gamma = 0.0;
  std::size_t S = 1;
  double eta = 1.0;

  void validate() const {
    if (sigma.size() != p.size() || G.size() != p.size()) {
      throw StructuralError("ProblemConstants: sigma, G, p must have one entry per client");
    }
    auto nonneg = [](double v) { return v >= 0.0; };
    if (!nonneg(L) || !nonneg(sigma_g) || !nonneg(gamma) || !nonneg(eta) ||
        !std::all_of(sigma.begin(), sigma.end(), nonneg) || !std::all_of(G.begin(), G.end(), nonneg) ||
        !std::all_of(p.begin(), p.end(), nonneg)) {
      throw ParameterError("ProblemConstants: all constants must be nonnegative");
    }
    if (S == 0) throw ParameterError("ProblemConstants: S must be >= 1");
  }

  double weighted_sigma_sq() const {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * sigma[i] * sigma[i];
    return s;
  }
  double weighted_G_sq() const {
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += p[i] * G[i] * G[i];
    return s;
  }
};

struct MuPair {
  double lower = 1.0;
  double upper = 1.0;
};

// Second-moment bound on the aggregated direction g_{t,k}, split into the
// partial-participation and local-update terms.
struct GradientMomentBound {
  double partial_participation = 0.0;
  double local_updates = 0.0;
  double total() const { return partial_participation + local_updates; }
};

inline GradientMomentBound gradient_moment_bound(const ProblemConstants& c) {
  c.validate();
  const double ss = c.weighted_sigma_sq();
  const double gg = c.weighted_G_sq();
  GradientMomentBound b;
  b.partial_participation = (12.0 * ss + 24.0 * gg) / static_cast<double>(c.S);
  b.local_updates = 4.0 * (ss + gg);
  return b;
}

// E||Delta_t||^2 <= V = K^2 gamma^2 * gradient_moment_bound.
inline GradientMomentBound compute_V_terms(const ProblemConstants& c) {
  auto b = gradient_moment_bound(c);
  const double kg2 = static_cast<double>(c.K * c.K) * c.gamma * c.gamma;
  b.partial_participation *= kg2;
  b.local_updates *= kg2;
  return b;
}

inline double compute_V(const ProblemConstants& c) { return compute_V_terms(c).total(); }

// Bounds on 1/calibrate(v) for v in [0, V]. calibrate is nondecreasing in v,
// so the ends come from the same expression the server uses.
inline MuPair mu_pair(const Calibration& cal, double V) {
  if (!(V >= 0.0)) throw ParameterError("mu_pair: V must be >= 0");
  fedopt::validate(cal);
  if (std::holds_alternative<IdentityCalibration>(cal)) return {1.0, 1.0};
  return {1.0 / calibrate_value(V, cal), 1.0 / calibrate_value(0.0, cal)};
}

struct Admissibility {
  bool ok = false;
  double gamma_max = 0.0;
  double smoothness_limit = 0.0;  // 1 / (8 L K)
  double adaptivity_limit = 0.0;  // sqrt(mu_lower / (10 mu_upper)) / K
  bool smoothness_binds = false;
};

// gamma < min{1/(8LK), (1/K) sqrt(mu_lower / (10 mu_upper))}
inline Admissibility stepsize_admissible(const ProblemConstants& c, const MuPair& mu) {
  if (!(c.L > 0.0)) throw ParameterError("stepsize_admissible: L must be > 0");
  const auto K = static_cast<double>(c.K);
  Admissibility a;
  a.smoothness_limit = 1.0 / (8.0 * c.L * K);
  a.adaptivity_limit = std::sqrt(mu.lower / (10.0 * mu.upper)) / K;
  a.smoothness_binds = a.smoothness_limit <= a.adaptivity_limit;
  a.gamma_max = std::min(a.smoothness_limit, a.adaptivity_limit);
  a.ok = c.gamma < a.gamma_max;
  return a;
}

// ---------------------------------------------------------------------------
// Federation-level gradient helpers. `tasks` holds either one shared task or
// one task per shard.

inline const Task& task_for(std::span<const Task> tasks, std::size_t i) {
  return tasks.size() == 1 ? tasks.front() : tasks[i];
}

inline std::vector<ParamVector> client_gradients(std::span<const Task> tasks, std::span<const ClientShard> shards,
                                                 const ParamVector& x) {
  std::vector<ParamVector> out;
  out.reserve(shards.size());
  for (std::size_t i = 0; i < shards.size(); ++i) out.push_back(full_gradient(task_for(tasks, i), shards[i].data, x));
  return out;
}

inline ParamVector weighted_gradient(std::span<const ParamVector> grads, std::span<const ClientShard> shards) {
  ParamVector g(grads.front().size());
  for (std::size_t i = 0; i < grads.size(); ++i) {
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += shards[i].weight * grads[i][j];
  }
  return g;
}

// grad f(x) = sum_i p_i grad f_i(x)
inline ParamVector global_gradient(std::span<const Task> tasks, std::span<const ClientShard> shards,
                                   const ParamVector& x) {
  return weighted_gradient(client_gradients(tasks, shards, x), shards);
}

enum class DissimilarityWeighting { ByWeight, Uniform };

inline double dissimilarity_at(std::span<const ParamVector> grads, std::span<const ClientShard> shards,
                               DissimilarityWeighting weighting = DissimilarityWeighting::ByWeight) {
  const ParamVector g = weighted_gradient(grads, shards);
  double s = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    const double w = weighting == DissimilarityWeighting::ByWeight ? shards[i].weight
                                                                  : 1.0 / static_cast<double>(grads.size());
    s += w * l2_dist_sq(grads[i], g);
  }
  return s;
}

// Largest sum_i w_i ||grad f_i(x) - grad f(x)||^2 over the probe points: a
// lower estimate of sigma_g^2.
inline double empirical_sigma_g(std::span<const Task> tasks, std::span<const ClientShard> shards,
                                std::span<const ParamVector> x_points,
                                DissimilarityWeighting weighting = DissimilarityWeighting::ByWeight) {
  if (x_points.empty()) throw ParameterError("empirical_sigma_g: no probe points");
  double best = 0.0;
  for (const auto& x : x_points) {
    const auto grads = client_gradients(tasks, shards, x);
    best = std::max(best, dissimilarity_at(grads, shards, weighting));
  }
  return best;
}

// ---------------------------------------------------------------------------
// Monte Carlo check of the aggregated-gradient second moment at a common point x.

// g = (1/S) sum_{i in S_t} g^(i): clients drawn with replacement by weight,
// each contributing one independent minibatch gradient at x.
inline std::vector<ParamVector> draw_aggregated_gradients(std::span<const Task> tasks,
                                                          std::span<const ClientShard> shards, const ParamVector& x,
                                                          const SamplingSpec& sampling, std::size_t batch_size,
                                                          std::size_t count, RngStream& rng) {
  std::vector<double> weights;
  for (const auto& s : shards) weights.push_back(s.weight);
  std::vector<ParamVector> out;
  out.reserve(count);
  for (std::size_t r = 0; r < count; ++r) {
    const auto chosen = sample_round(weights, sampling, rng);
    ParamVector g(x.size());
    for (std::size_t i : chosen) {
      const auto& data = shards[i].data;
      const std::size_t b = batch_size == 0 ? data.size() : std::min(batch_size, data.size());
      const auto sample = stochastic_gradient(task_for(tasks, i), data, x, b, rng);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += sample.grad[j];
    }
    for (double& v : g) v /= static_cast<double>(chosen.size());
    out.push_back(std::move(g));
  }
  return out;
}

struct GradientMomentReport {
  double empirical_second_moment = 0.0;
  double bound = 0.0;
  bool satisfied = false;
  double max_abs_z = 0.0;  // largest per-coordinate |mean - target| / stderr
  bool mean_matches = false;
  std::size_t draws = 0;
};

inline GradientMomentReport verify_gradient_moment_bound(std::span<const ParamVector> draws,
                                                         const ParamVector& expected_mean, const ProblemConstants& c,
                                                         std::size_t min_draws = 1000) {
  if (draws.size() < min_draws) throw ParameterError("verify_gradient_moment_bound: insufficient samples");
  const std::size_t d = expected_mean.size();
  const auto n = static_cast<double>(draws.size());
  GradientMomentReport r;
  r.draws = draws.size();
  std::vector<double> mean(d, 0.0);
  std::vector<double> sq(d, 0.0);
  double moment = 0.0;
  for (const auto& g : draws) {
    moment += l2_norm_sq(g);
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] += g[j];
      sq[j] += g[j] * g[j];
    }
  }
  r.empirical_second_moment = moment / n;
  r.bound = gradient_moment_bound(c).total();
  r.satisfied = r.empirical_second_moment <= r.bound;
  r.mean_matches = true;
  for (std::size_t j = 0; j < d; ++j) {
    const double m = mean[j] / n;
    const double var = std::max(sq[j] / n - m * m, 0.0) * n / (n - 1.0);
    const double se = std::sqrt(var / n);
    const double err = std::abs(m - expected_mean[j]);
    const double z = se > 0.0 ? err / se : (err <= 1e-12 * (1.0 + std::abs(m)) ? 0.0 : std::numeric_limits<double>::infinity());
    r.max_abs_z = std::max(r.max_abs_z, z);
  }
  r.mean_matches = r.max_abs_z <= 3.0;
  return r;
}

// ---------------------------------------------------------------------------
// Drift bound: sum_i p_i ||x_t - x_{t,k}^(i)||^2
//   <= 5 K gamma^2 (sum_i p_i sigma_i^2 + 2 K sigma_g^2) + 10 K^2 gamma^2 E||grad f(x_t)||^2

// One seed's record: weighted_drift[t][k] for k = 0..K and the exact
// ||grad f(x_t)||^2.
struct DriftTrace {
  std::vector<std::vector<double>> weighted_drift;
  std::vector<double> grad_norm_sq;
};

// Weighted drift of every client's local trajectory started at x_t (all N
// clients, not only the sampled ones). Returns one value per inner step
// k = 0..K.
inline std::vector<double> weighted_drift_at(std::span<const Task> tasks, std::span<const ClientShard> shards,
                                             const ParamVector& x_t, const LocalConfig& cfg,
                                             std::uint64_t seed, std::uint64_t round) {
  if (cfg.variant == LocalVariant::Scaffold) throw ParameterError("weighted_drift_at: SCAFFOLD is not covered");
  std::vector<double> drift;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    RngStream rng = make_stream(seed, StreamRole::Probe, round, i);
    LocalTrace trace;
    run_local(task_for(tasks, i), shards[i], x_t, cfg, nullptr, rng, &trace);
    drift.resize(std::max(drift.size(), trace.iterates.size()), 0.0);
    for (std::size_t k = 0; k < trace.iterates.size(); ++k) {
      drift[k] += shards[i].weight * l2_dist_sq(trace.iterates[k], x_t);
    }
  }
  return drift;
}

struct DriftReport {
  bool applicable = true;
  std::size_t checked = 0;
  std::size_t violations = 0;
  double max_ratio = 0.0;  // max LHS / RHS over checked (t, k)
  std::size_t seeds = 0;
  std::string notes;
};

inline double drift_rhs(const ProblemConstants& c, double grad_norm_sq) {
  const auto K = static_cast<double>(c.K);
  const double g2 = c.gamma * c.gamma;
  return 5.0 * K * g2 * (c.weighted_sigma_sq() + 2.0 * K * c.sigma_g * c.sigma_g) + 10.0 * K * K * g2 * grad_norm_sq;
}

inline DriftReport verify_drift_bound(std::span<const DriftTrace> traces, const ProblemConstants& c) {
  c.validate();
  DriftReport r;
  r.seeds = traces.size();
  if (traces.empty()) throw ParameterError("verify_drift_bound: no traces");
  if (c.L > 0.0 && c.gamma > 1.0 / (8.0 * c.L * static_cast<double>(c.K))) {
    r.applicable = false;
    r.notes = "gamma exceeds 1/(8LK); the drift bound does not apply";
    return r;
  }
  const std::size_t T = traces.front().grad_norm_sq.size();
  for (const auto& tr : traces) {
    if (tr.grad_norm_sq.size() != T || tr.weighted_drift.size() != T) {
      throw StructuralError("verify_drift_bound: traces have different lengths");
    }
  }
  const auto n = static_cast<double>(traces.size());
  for (std::size_t t = 0; t < T; ++t) {
    double gn = 0.0;
    for (const auto& tr : traces) gn += tr.grad_norm_sq[t];
    gn /= n;
    const double rhs = drift_rhs(c, gn);
    const std::size_t K = traces.front().weighted_drift[t].size();
    for (std::size_t k = 0; k < K; ++k) {
      double lhs = 0.0;
      for (const auto& tr : traces) lhs += tr.weighted_drift[t][k];
      lhs /= n;
      ++r.checked;
      if (lhs > rhs) ++r.violations;
      if (rhs > 0.0) r.max_ratio = std::max(r.max_ratio, lhs / rhs);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Convergence-rate trend check on the running average (1/T) sum ||grad f(x_t)||^2.

struct EnvelopeReport {
  double fit_c0 = 0.0;        // least-squares c0 in R(T) ~ c0 / sqrt(T)
  double fit_residual = 0.0;  // RMS of R(T) - c0/sqrt(T)
  double running_avg_final = 0.0;
  double running_avg_half = 0.0;
  double ratio = 0.0;  // R(T) / R(T/2)
  bool decreasing = false;
  bool halved = false;
  bool flagged = false;         // running average failed to decrease
  double theory_shape = 0.0;    // rate expression at T with unit constants
  std::size_t rounds = 0;
};

inline std::vector<double> running_average(std::span<const double> values) {
  std::vector<double> out(values.size());
  double s = 0.0;
  for (std::size_t t = 0; t < values.size(); ++t) {
    s += values[t];
    out[t] = s / static_cast<double>(t + 1);
  }
  return out;
}

inline EnvelopeReport rate_envelope(std::span<const double> grad_norm_sq, const MuPair& mu, const ProblemConstants& c) {
  if (grad_norm_sq.size() < 20) throw ParameterError("rate_envelope: need at least 20 rounds");
  EnvelopeReport r;
  r.rounds = grad_norm_sq.size();
  const auto avg = running_average(grad_norm_sq);
  double num = 0.0;
  double den = 0.0;
  for (std::size_t t = 0; t < avg.size(); ++t) {
    const double basis = 1.0 / std::sqrt(static_cast<double>(t + 1));
    num += avg[t] * basis;
    den += basis * basis;
  }
  r.fit_c0 = num / den;
  double res = 0.0;
  for (std::size_t t = 0; t < avg.size(); ++t) {
    const double e = avg[t] - r.fit_c0 / std::sqrt(static_cast<double>(t + 1));
    res += e * e;
  }
  r.fit_residual = std::sqrt(res / static_cast<double>(avg.size()));
  r.running_avg_final = avg.back();
  r.running_avg_half = avg[avg.size() / 2 - 1];
  r.ratio = r.running_avg_half > 0.0 ? r.running_avg_final / r.running_avg_half
                                     : (r.running_avg_final > 0.0 ? std::numeric_limits<double>::infinity() : 0.0);
  r.decreasing = r.running_avg_final < r.running_avg_half;
  r.halved = r.running_avg_final < 0.5 * r.running_avg_half;
  r.flagged = !std::isfinite(r.running_avg_final) || r.running_avg_final > r.running_avg_half;

  const auto T = static_cast<double>(r.rounds);
  const auto K = static_cast<double>(c.K);
  const double eta = c.eta > 0.0 ? c.eta : 1.0;
  r.theory_shape = std::sqrt(mu.upper / (mu.lower * mu.lower * mu.lower * eta * K * T)) +
                   K * c.sigma_g * c.sigma_g / T +
                   (1.0 + 1.0 / static_cast<double>(c.S)) *
                       std::sqrt(mu.upper * mu.upper * mu.upper * eta * eta * eta * K / (mu.lower * T));
  return r;
}

// ---------------------------------------------------------------------------
// Closed-form constants for the synthetic quadratic family over a probe ball.

// G_i: sup of ||A_i (x - c_i) + lambda x|| over ||x - center|| <= radius,
// bounded by the triangle inequality.
inline ProblemConstants quadratic_constants(std::span<const Task> tasks, std::span<const ClientShard> shards,
                                            const ParamVector& center, double radius, std::size_t batch_size,
                                            std::size_t K, double gamma, std::size_t S, double eta) {
  ProblemConstants c;
  c.K = K;
  c.gamma = gamma;
  c.S = S;
  c.eta = eta;
  const std::size_t N = shards.size();
  std::vector<ParamVector> g_center;
  for (std::size_t i = 0; i < N; ++i) {
    const Task& task = task_for(tasks, i);
    const auto& data = shards[i].data;
    c.L = std::max(c.L, task.quadratic_smoothness());
    const std::size_t b = batch_size == 0 ? data.size() : std::min(batch_size, data.size());
    c.sigma.push_back(std::sqrt(quadratic_minibatch_variance(task, data, b)));
    g_center.push_back(full_gradient(task, data, center));
    c.G.push_back(std::sqrt(l2_norm_sq(g_center.back())) + task.quadratic_smoothness() * radius);
    c.p.push_back(shards[i].weight);
  }
  // grad f_i - grad f is affine with diagonal slope D_i = (A_i + lambda_i) - sum_j p_j (A_j + lambda_j)
  const std::size_t d = center.size();
  std::vector<double> mean_slope(d, 0.0);
  for (std::size_t i = 0; i < N; ++i) {
    const Task& task = task_for(tasks, i);
    const auto& a = std::get<QuadraticModel>(task.model()).curvature;
    for (std::size_t j = 0; j < d; ++j) mean_slope[j] += c.p[i] * (a[j] + task.weight_decay());
  }
  const ParamVector g_mean = weighted_gradient(g_center, shards);
  double sg2 = 0.0;
  for (std::size_t i = 0; i < N; ++i) {
    const Task& task = task_for(tasks, i);
    const auto& a = std::get<QuadraticModel>(task.model()).curvature;
    double slope = 0.0;
    for (std::size_t j = 0; j < d; ++j) slope = std::max(slope, std::abs(a[j] + task.weight_decay() - mean_slope[j]));
    const double at_center = std::sqrt(l2_dist_sq(g_center[i], g_mean));
    const double bound = at_center + slope * radius;
    sg2 += c.p[i] * bound * bound;
  }
  c.sigma_g = std::sqrt(sg2);
  return c;
}

// Sampling-based constants for any task: sigma_i from minibatch variance,
// G_i from gradient norms, L from secants between probe points, sigma_g from
// the weighted dissimilarity, all maximized over the probes.
inline ProblemConstants estimate_constants(std::span<const Task> tasks, std::span<const ClientShard> shards,
                                           std::span<const ParamVector> probes, std::size_t batch_size,
                                           std::size_t K, double gamma, std::size_t S, double eta, RngStream& rng,
                                           std::size_t variance_draws = 16) {
  if (probes.empty()) throw ParameterError("estimate_constants: no probe points");
  ProblemConstants c;
  c.K = K;
  c.gamma = gamma;
  c.S = S;
  c.eta = eta;
  const std::size_t N = shards.size();
  c.sigma.assign(N, 0.0);
  c.G.assign(N, 0.0);
  for (const auto& s : shards) c.p.push_back(s.weight);
  double sg2 = 0.0;
  std::vector<std::vector<ParamVector>> grads_at;
  for (const auto& x : probes) {
    const auto grads = client_gradients(tasks, shards, x);
    sg2 = std::max(sg2, dissimilarity_at(grads, shards));
    for (std::size_t i = 0; i < N; ++i) {
      c.G[i] = std::max(c.G[i], std::sqrt(l2_norm_sq(grads[i])));
      const auto& data = shards[i].data;
      const std::size_t b = batch_size == 0 ? data.size() : std::min(batch_size, data.size());
      if (b >= data.size()) continue;
      double var = 0.0;
      for (std::size_t r = 0; r < variance_draws; ++r) {
        const auto g = stochastic_gradient(task_for(tasks, i), data, x, b, rng);
        var += l2_dist_sq(g.grad, grads[i]);
      }
      c.sigma[i] = std::max(c.sigma[i], std::sqrt(var / static_cast<double>(variance_draws)));
    }
    grads_at.push_back(grads);
  }
  for (std::size_t a = 1; a < probes.size(); ++a) {
    const double dx = std::sqrt(l2_dist_sq(probes[a], probes[a - 1]));
    if (!(dx > 0.0)) continue;
    for (std::size_t i = 0; i < N; ++i) {
      c.L = std::max(c.L, std::sqrt(l2_dist_sq(grads_at[a][i], grads_at[a - 1][i])) / dx);
    }
  }
  c.sigma_g = std::sqrt(sg2);
  return c;
}

// ---------------------------------------------------------------------------
// JSON bound report entries: {quantity, empirical, bound, satisfied, seeds, notes}

struct BoundEntry {
  std::string quantity;
  double empirical = 0.0;
  double bound = 0.0;
  bool satisfied = false;
  std::size_t seeds = 1;
  std::string notes;
};

inline nlohmann::json to_json(const BoundEntry& e) {
  auto num = [](double v) -> nlohmann::json {
    if (std::isfinite(v)) return v;
    return nullptr;
  };
  return nlohmann::json{{"quantity", e.quantity}, {"empirical", num(e.empirical)}, {"bound", num(e.bound)},
                        {"satisfied", e.satisfied}, {"seeds", e.seeds},       {"notes", e.notes}};
}

inline nlohmann::json bound_report_json(std::span<const BoundEntry> entries) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& e : entries) arr.push_back(to_json(e));
  return arr;
}

}  // namespace fedopt
