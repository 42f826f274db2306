#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "fedopt/error.hpp"
#include "fedopt/numerics.hpp"
#include "fedopt/partition.hpp"
#include "fedopt/random.hpp"
#include "fedopt/tasks.hpp"

namespace fedopt {

enum class LocalVariant { PlainSgd, Prox, Scaffold };
enum class LocalStepMode { Fixed, Epoch };

struct LocalConfig {
  LocalStepMode step_mode = LocalStepMode::Fixed;
  std::size_t steps = 1;       // K in Fixed mode
  double gamma = 0.01;         // inner stepsize for the current round
  std::size_t batch_size = 0;  // 0 = full local batch; larger than n_i is clamped
  LocalVariant variant = LocalVariant::PlainSgd;
  double prox_mu = 0.0;

  void validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ParameterError("local: gamma must be > 0");
    if (step_mode == LocalStepMode::Fixed && steps < 1) throw ParameterError("local: K must be >= 1");
    if (variant == LocalVariant::Prox && !(prox_mu >= 0.0)) throw ParameterError("local: prox mu must be >= 0");
  }

  std::size_t batch_for(std::size_t n) const {
    return batch_size == 0 ? n : std::min(batch_size, n);
  }

  // One epoch = ceil(n_i / b) steps.
  std::size_t steps_for(std::size_t n) const {
    if (step_mode == LocalStepMode::Fixed) return steps;
    const std::size_t b = batch_for(n);
    return (n + b - 1) / b;
  }
};

struct LocalResult {
  ParamVector x_final;
  std::size_t steps_taken = 0;
  double sum_grad_norm_sq = 0.0;
  std::optional<ParamVector> new_control_variate;
};

// Optional per-step record: iterates x_0..x_K and the raw minibatch gradients
// g_0..g_{K-1}.
struct LocalTrace {
  std::vector<ParamVector> iterates;
  std::vector<ParamVector> gradients;
};

// K inner steps from x_start on one client. Nothing passed in is modified;
// the updated SCAFFOLD control variate is returned for the caller to apply.
inline LocalResult run_local(const Task& task, const Dataset& data, const ParamVector& x_start,
                             const LocalConfig& cfg, const ParamVector* client_cv, const ParamVector* server_cv,
                             RngStream& rng, LocalTrace* trace = nullptr) {
  cfg.validate();
  if (x_start.size() != task.dim()) throw StructuralError("run_local: x_start has the wrong length");
  if (data.empty()) throw StructuralError("run_local: empty client dataset");
  const bool scaffold = cfg.variant == LocalVariant::Scaffold;
  if (scaffold) {
    if (server_cv == nullptr || client_cv == nullptr) {
      throw StructuralError("run_local: SCAFFOLD needs server and client control variates");
    }
    if (server_cv->size() != task.dim() || client_cv->size() != task.dim()) {
      throw StructuralError("run_local: control variate length mismatch");
    }
  }
  const std::size_t n = data.size();
  const std::size_t K = cfg.steps_for(n);
  const std::size_t b = cfg.batch_for(n);
  const double gamma = cfg.gamma;

  LocalResult out;
  ParamVector x(x_start);
  if (trace != nullptr) {
    trace->iterates.assign(1, x);
    trace->gradients.clear();
  }
  for (std::size_t k = 0; k < K; ++k) {
    GradSample g = stochastic_gradient(task, data, x, b, rng);
    out.sum_grad_norm_sq += l2_norm_sq(g.grad);
    switch (cfg.variant) {
      case LocalVariant::PlainSgd:
        for (std::size_t j = 0; j < x.size(); ++j) x[j] -= gamma * g.grad[j];
        break;
      case LocalVariant::Prox:
        for (std::size_t j = 0; j < x.size(); ++j) {
          x[j] -= gamma * (g.grad[j] + cfg.prox_mu * (x[j] - x_start[j]));
        }
        break;
      case LocalVariant::Scaffold: {
        const auto& ci = *client_cv;
        const auto& c = *server_cv;
        for (std::size_t j = 0; j < x.size(); ++j) x[j] -= gamma * (g.grad[j] - ci[j] + c[j]);
        break;
      }
    }
    if (trace != nullptr) {
      trace->gradients.push_back(std::move(g.grad));
      trace->iterates.push_back(x);
    }
  }
  if (scaffold) {
    // option II: c_i+ = c_i - c + (x_start - x_K) / (K gamma)
    const auto& ci = *client_cv;
    const auto& c = *server_cv;
    ParamVector next(x.size());
    const double inv = 1.0 / (static_cast<double>(K) * gamma);
    for (std::size_t j = 0; j < x.size(); ++j) next[j] = ci[j] - c[j] + (x_start[j] - x[j]) * inv;
    out.new_control_variate = std::move(next);
  }
  out.steps_taken = K;
  out.x_final = std::move(x);
  return out;
}

inline LocalResult run_local(const Task& task, const ClientShard& shard, const ParamVector& x_start,
                             const LocalConfig& cfg, const ParamVector* server_cv, RngStream& rng,
                             LocalTrace* trace = nullptr) {
  const ParamVector* cv = shard.control_variate ? &*shard.control_variate : nullptr;
  return run_local(task, shard.data, x_start, cfg, cv, server_cv, rng, trace);
}

// sum_k ||x_k - x_start||^2 over a client's inner trajectory.
inline double drift_diagnostic(std::span<const ParamVector> trajectory, const ParamVector& x_start) {
  double s = 0.0;
  for (const auto& x : trajectory) s += l2_dist_sq(x, x_start);
  return s;
}

}  // namespace fedopt
