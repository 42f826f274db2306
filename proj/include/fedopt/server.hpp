#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedopt/error.hpp"
#include "fedopt/numerics.hpp"

namespace fedopt {

// ---------------------------------------------------------------------------
// Calibration of the second moment into a per-coordinate denominator.

struct IdentityCalibration {};
struct EpsilonCalibration {
  double eps = 1e-8;
};
// (v + eps)^p
struct PowerCalibration {
  double p = 0.25;
  double eps = 1e-8;
};
// softplus(sqrt v) = log(1 + exp(beta sqrt v)) / beta
struct SoftplusCalibration {
  double beta = 50.0;
};

using Calibration =
    std::variant<IdentityCalibration, EpsilonCalibration, PowerCalibration, SoftplusCalibration>;

inline void validate(const Calibration& cal) {
  std::visit(
      [](const auto& c) {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, EpsilonCalibration>) {
          if (!(c.eps > 0.0)) throw ParameterError("epsilon calibration: eps must be > 0");
        } else if constexpr (std::is_same_v<C, PowerCalibration>) {
          if (!(c.p > 0.0) || c.p > 0.5) throw ParameterError("power calibration: p must be in (0, 1/2]");
          if (!(c.eps > 0.0)) throw ParameterError("power calibration: eps must be > 0");
        } else if constexpr (std::is_same_v<C, SoftplusCalibration>) {
          if (!(c.beta > 0.0)) throw ParameterError("softplus calibration: beta must be > 0");
        }
      },
      cal);
}

// log(1 + e^z) without overflow.
inline double log1p_exp(double z) noexcept { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

inline double calibrate_value(double v, const Calibration& cal) {
  if (v < 0.0 || std::isnan(v)) throw NumericError("calibrate: negative second moment");
  return std::visit(
      [v](const auto& c) -> double {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, IdentityCalibration>) {
          return 1.0;
        } else if constexpr (std::is_same_v<C, EpsilonCalibration>) {
          return std::sqrt(v) + c.eps;
        } else if constexpr (std::is_same_v<C, PowerCalibration>) {
          return std::pow(v + c.eps, c.p);
        } else {
          return log1p_exp(c.beta * std::sqrt(v)) / c.beta;
        }
      },
      cal);
}

inline ParamVector calibrate(const ParamVector& v, const Calibration& cal) {
  ParamVector out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = calibrate_value(v[j], cal);
  return out;
}

// ---------------------------------------------------------------------------

enum class ServerKind { Avg, Momentum, Adam, AmsGrad, Yogi };

struct ServerOptimizer {
  ServerKind kind = ServerKind::Avg;
  double eta = 1.0;
  double beta1 = 0.0;
  double beta2 = 0.0;
  Calibration calibration = IdentityCalibration{};

  void validate() const {
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ParameterError("server: eta must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw ParameterError("server: beta1, beta2 must be in [0, 1)");
    }
    fedopt::validate(calibration);
    const bool identity = std::holds_alternative<IdentityCalibration>(calibration);
    switch (kind) {
      case ServerKind::Avg:
        if (beta1 != 0.0 || beta2 != 0.0 || !identity) {
          throw ParameterError("server: Avg requires beta1 = beta2 = 0 and identity calibration");
        }
        break;
      case ServerKind::Momentum:
        if (beta2 != 0.0 || !identity) {
          throw ParameterError("server: Momentum requires beta2 = 0 and identity calibration");
        }
        break;
      case ServerKind::Yogi:
        if (beta1 != 0.0) throw ParameterError("server: Yogi runs without first momentum (beta1 = 0)");
        break;
      case ServerKind::Adam:
      case ServerKind::AmsGrad:
        break;
    }
  }
};

struct ServerState {
  ParamVector x;
  ParamVector m;
  ParamVector v;
  std::size_t round = 0;
  std::optional<ParamVector> server_cv;
  std::size_t yogi_clamps = 0;  // coordinates of v clamped back to 0 so far

  static ServerState initial(ParamVector x0) {
    ServerState s;
    s.m = ParamVector(x0.size());
    s.v = ParamVector(x0.size());
    s.x = std::move(x0);
    return s;
  }
};

struct Aggregate {
  ParamVector x_tilde;
  ParamVector delta;
};

// Exact average of the participants' final iterates (multiplicity counted,
// divided by S) and the virtual direction x_t - x_tilde.
inline Aggregate aggregate(const ParamVector& x_t, std::span<const ParamVector> client_finals) {
  if (client_finals.empty()) throw StructuralError("aggregate: empty participation set");
  for (const auto& f : client_finals) detail::require_same_length(f.size(), x_t.size(), "aggregate");
  Aggregate a;
  a.x_tilde = pairwise_mean(client_finals);
  a.delta = ParamVector(x_t.size());
  for (std::size_t j = 0; j < x_t.size(); ++j) a.delta[j] = x_t[j] - a.x_tilde[j];
  return a;
}

// One server update. No bias correction on m or v.
inline ServerState server_step(const ServerState& state, const Aggregate& agg, const ServerOptimizer& opt) {
  const std::size_t d = state.x.size();
  detail::require_same_length(agg.delta.size(), d, "server_step");
  detail::require_same_length(agg.x_tilde.size(), d, "server_step");
  ServerState next = state;
  const auto& delta = agg.delta;
  const double b1 = opt.beta1;
  const double b2 = opt.beta2;

  for (std::size_t j = 0; j < d; ++j) next.m[j] = b1 * state.m[j] + (1.0 - b1) * delta[j];

  switch (opt.kind) {
    case ServerKind::Avg:
    case ServerKind::Momentum:
      break;
    case ServerKind::Adam:
      for (std::size_t j = 0; j < d; ++j) next.v[j] = b2 * state.v[j] + (1.0 - b2) * delta[j] * delta[j];
      break;
    case ServerKind::AmsGrad:
      // v_hat uses the previous post-max v
      for (std::size_t j = 0; j < d; ++j) {
        const double v_hat = b2 * state.v[j] + (1.0 - b2) * delta[j] * delta[j];
        next.v[j] = std::max(v_hat, state.v[j]);
      }
      break;
    case ServerKind::Yogi:
      for (std::size_t j = 0; j < d; ++j) {
        const double sq = delta[j] * delta[j];
        const double diff = state.v[j] - sq;
        const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        double v = state.v[j] - (1.0 - b2) * sq * sign;
        if (v < 0.0) {
          v = 0.0;
          ++next.yogi_clamps;
        }
        next.v[j] = v;
      }
      break;
  }

  if (opt.kind == ServerKind::Avg) {
    // (1 - eta) x_t + eta x_tilde == x_t - eta delta; exact x_tilde at eta = 1
    for (std::size_t j = 0; j < d; ++j) next.x[j] = (1.0 - opt.eta) * state.x[j] + opt.eta * agg.x_tilde[j];
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      next.x[j] = state.x[j] - opt.eta / calibrate_value(next.v[j], opt.calibration) * next.m[j];
    }
  }
  next.round = state.round + 1;
  return next;
}

inline ServerState server_step(const ServerState& state, const ParamVector& delta, const ServerOptimizer& opt) {
  detail::require_same_length(delta.size(), state.x.size(), "server_step");
  Aggregate agg;
  agg.x_tilde = ParamVector(delta.size());
  for (std::size_t j = 0; j < delta.size(); ++j) agg.x_tilde[j] = state.x[j] - delta[j];
  agg.delta = delta;
  return server_step(state, agg, opt);
}

// Reporting name for a server configuration.
inline std::string recover_baseline(const ServerOptimizer& opt) {
  const bool identity = std::holds_alternative<IdentityCalibration>(opt.calibration);
  if (opt.kind == ServerKind::Avg) return "FedAvg";
  if (opt.kind == ServerKind::Yogi) return "FedYogi";
  if (identity) return opt.beta1 == 0.0 ? "FedAvg" : "FedMomentum";
  const std::string base = opt.kind == ServerKind::AmsGrad ? "FedAMSGrad" : "FedAdam";
  return std::visit(
      [&base](const auto& c) -> std::string {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, EpsilonCalibration>) {
          return c.eps <= 1e-8 ? base : "eps-" + base;
        } else if constexpr (std::is_same_v<C, PowerCalibration>) {
          return "p-" + base;
        } else if constexpr (std::is_same_v<C, SoftplusCalibration>) {
          return "s-" + base;
        } else {
          return base;
        }
      },
      opt.calibration);
}

}  // namespace fedopt
