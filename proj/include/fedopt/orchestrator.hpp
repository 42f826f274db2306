#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "fedopt/error.hpp"
#include "fedopt/io.hpp"
#include "fedopt/local.hpp"
#include "fedopt/numerics.hpp"
#include "fedopt/partition.hpp"
#include "fedopt/random.hpp"
#include "fedopt/sampling.hpp"
#include "fedopt/schedule.hpp"
#include "fedopt/server.hpp"
#include "fedopt/tasks.hpp"
#include "fedopt/theory.hpp"

namespace fedopt {

// Clients, their objectives and evaluation data. `tasks` holds one shared
// task or one per client.
struct Federation {
  std::vector<Task> tasks;
  std::vector<ClientShard> clients;
  std::optional<Dataset> test_set;
  std::vector<Dataset> client_tests;
  ParamVector x0;

  std::vector<double> weights() const {
    std::vector<double> w;
    w.reserve(clients.size());
    for (const auto& c : clients) w.push_back(c.weight);
    return w;
  }

  void validate() const {
    if (clients.empty()) throw StructuralError("federation: no clients");
    if (tasks.size() != 1 && tasks.size() != clients.size()) {
      throw StructuralError("federation: need one task or one task per client");
    }
    for (std::size_t i = 0; i < clients.size(); ++i) {
      if (clients[i].data.empty()) throw StructuralError("federation: client " + std::to_string(i) + " has no data");
      const Task& t = task_for(tasks, i);
      if (t.dim() != x0.size()) throw StructuralError("federation: x0 length does not match the task");
      if (clients[i].data.feature_dim() != t.input_dim()) {
        throw StructuralError("federation: client " + std::to_string(i) + " feature width does not match the task");
      }
    }
    if (!client_tests.empty() && client_tests.size() != clients.size()) {
      throw StructuralError("federation: per-client test sets must match the client count");
    }
  }
};

enum class TestEvaluation { Global, PerClient };

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t rounds = 1;  // T
  SamplingSpec sampling;
  LocalConfig local;        // local.gamma is the base inner stepsize
  ServerOptimizer server;   // server.eta is the base server stepsize
  Schedule gamma_schedule;  // schedules count communication rounds
  Schedule eta_schedule;
  std::size_t metric_every = 1;
  std::size_t threads = 1;
  TestEvaluation test_evaluation = TestEvaluation::Global;
  bool timing = false;  // wall_ms stays 0 when off so logs stay byte-stable
  double divergence_loss = 1e12;
  bool shuffle_execution = false;  // permute client evaluation order each round

  void validate() const {
    if (rounds < 1) throw ParameterError("experiment: T must be >= 1");
    if (metric_every < 1) throw ParameterError("experiment: metric cadence must be >= 1");
    if (sampling.mode == SamplingMode::WithReplacementByWeight && sampling.clients_per_round < 1) {
      throw ParameterError("experiment: S must be >= 1");
    }
    local.validate();
    server.validate();
    gamma_schedule.validate();
    eta_schedule.validate();
  }
};

struct RoundMetrics {
  std::size_t t = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double grad_norm_sq = 0.0;
  double sigma_g_probe = 0.0;  // sqrt of sum_i p_i ||grad f_i(x_t) - grad f(x_t)||^2
  std::vector<std::size_t> sampled_clients;
  double gamma = 0.0;
  double eta = 0.0;
  double wall_ms = 0.0;
};

struct CommStats {
  std::size_t rounds = 0;
  std::size_t broadcasts = 0;
  std::size_t downlink_messages = 0;
  std::size_t uploads = 0;
  std::size_t aggregations = 0;
};

struct DivergenceReport {
  std::string reason;
  std::ptrdiff_t last_finite_round = -1;
};

struct ExperimentResult {
  std::vector<RoundMetrics> metrics;
  ServerState final_state;
  double final_train_loss = 0.0;
  double final_test_accuracy = 0.0;
  double final_grad_norm_sq = 0.0;
  CommStats comm;
  std::vector<ParamVector> client_control_variates;
  std::optional<DivergenceReport> divergence;

  bool diverged() const noexcept { return divergence.has_value(); }
  void throw_if_diverged() const {
    if (divergence) throw DivergenceError(divergence->reason, divergence->last_finite_round);
  }
};

// Everything one round produced, handed to an observer after server_step.
struct RoundEvent {
  std::size_t t;
  const ServerState& before;
  const ServerState& after;
  std::span<const std::size_t> sampled;
  std::span<const LocalResult> locals;
  const Aggregate& aggregate;
  double gamma;
  double eta;
};

using RoundObserver = std::function<void(const RoundEvent&)>;

// Worker count: the requested value, capped by FEDOPT_THREADS when set.
inline std::size_t effective_threads(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(requested, 1);
  if (const char* env = std::getenv("FEDOPT_THREADS")) {
    char* end = nullptr;
    const unsigned long long cap = std::strtoull(env, &end, 10);
    if (end != env && cap >= 1) n = std::min<std::size_t>(n, cap);
  }
  return n;
}

// Runs body(i) for i in [0, count) on up to `threads` workers and rethrows the
// first failure by index.
template <typename Body>
void parallel_for(std::size_t count, std::size_t threads, Body&& body) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next.fetch_add(1); i < count; i = next.fetch_add(1)) {
      try {
        body(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace detail {

struct GlobalView {
  double train_loss = 0.0;
  double grad_norm_sq = 0.0;
  double sigma_g = 0.0;
  bool finite = true;
};

// Loss only unless gradients are asked for; the loss is the same either way.
inline GlobalView global_view(const Federation& fed, const ParamVector& x, bool gradients = true) {
  GlobalView out;
  if (!gradients) {
    for (std::size_t i = 0; i < fed.clients.size(); ++i) {
      out.train_loss += fed.clients[i].weight * evaluate(task_for(fed.tasks, i), fed.clients[i].data, x).loss;
    }
    out.finite = std::isfinite(out.train_loss);
    return out;
  }
  std::vector<ParamVector> grads;
  grads.reserve(fed.clients.size());
  for (std::size_t i = 0; i < fed.clients.size(); ++i) {
    auto s = full_loss_gradient(task_for(fed.tasks, i), fed.clients[i].data, x);
    out.train_loss += fed.clients[i].weight * s.loss;
    grads.push_back(std::move(s.grad));
  }
  const ParamVector g = weighted_gradient(grads, fed.clients);
  out.grad_norm_sq = l2_norm_sq(g);
  out.sigma_g = std::sqrt(dissimilarity_at(grads, fed.clients));
  out.finite = std::isfinite(out.train_loss) && std::isfinite(out.grad_norm_sq);
  return out;
}

inline double test_accuracy(const Federation& fed, const ParamVector& x, TestEvaluation mode) {
  const Task& task = fed.tasks.front();
  if (task.kind() == TaskKind::Quadratic) return 0.0;
  if (mode == TestEvaluation::PerClient && !fed.client_tests.empty()) {
    double acc = 0.0;
    for (std::size_t i = 0; i < fed.clients.size(); ++i) {
      acc += fed.clients[i].weight * evaluate(task_for(fed.tasks, i), fed.client_tests[i], x).accuracy;
    }
    return acc;
  }
  if (fed.test_set) return evaluate(task, *fed.test_set, x).accuracy;
  double acc = 0.0;
  for (std::size_t i = 0; i < fed.clients.size(); ++i) {
    acc += fed.clients[i].weight * evaluate(task_for(fed.tasks, i), fed.clients[i].data, x).accuracy;
  }
  return acc;
}

}  // namespace detail

// T rounds of: sample, broadcast x_t, local updates, aggregate in ascending
// client order, server step, schedules. Row t of the log describes x_t.
// Divergence stops the run and is reported in the result, not thrown.
inline ExperimentResult run_experiment(const Federation& fed, const ExperimentConfig& cfg,
                                       const RoundObserver& observer = {}) {
  fed.validate();
  cfg.validate();
  const std::size_t N = fed.clients.size();
  const std::size_t T = cfg.rounds;
  const std::vector<double> weights = fed.weights();
  const bool scaffold = cfg.local.variant == LocalVariant::Scaffold;
  const std::size_t threads = effective_threads(cfg.threads);

  ExperimentResult result;
  ServerState state = ServerState::initial(fed.x0);
  std::vector<ParamVector> client_cv;
  if (scaffold) {
    state.server_cv = ParamVector(fed.x0.size());
    for (const auto& c : fed.clients) {
      client_cv.push_back(c.control_variate ? *c.control_variate : ParamVector(fed.x0.size()));
    }
  }
  ScheduleState gamma_sched(cfg.gamma_schedule);
  ScheduleState eta_sched(cfg.eta_schedule);

  auto diverge = [&](std::string reason, std::ptrdiff_t last) {
    result.divergence = DivergenceReport{std::move(reason), last};
  };

  for (std::size_t t = 0; t < T; ++t) {
    const auto started = std::chrono::steady_clock::now();
    const double gamma_t = cfg.local.gamma * gamma_sched.multiplier(t, T);
    const double eta_t = cfg.server.eta * eta_sched.multiplier(t, T);

    if (!state.x.all_finite()) {
      diverge("non-finite iterate at round " + std::to_string(t), static_cast<std::ptrdiff_t>(t) - 1);
      break;
    }
    const bool logged = t % cfg.metric_every == 0;
    const auto view = detail::global_view(fed, state.x, logged);
    if (!view.finite || view.train_loss > cfg.divergence_loss) {
      diverge("train loss " + fmt17(view.train_loss) + " at round " + std::to_string(t),
              static_cast<std::ptrdiff_t>(t) - 1);
      break;
    }

    RngStream server_rng = make_stream(cfg.seed, StreamRole::Server, t);
    const auto sampled = sample_round(weights, cfg.sampling, server_rng);
    const std::size_t S = sampled.size();
    ++result.comm.broadcasts;
    result.comm.downlink_messages += S;

    LocalConfig local = cfg.local;
    local.gamma = gamma_t;
    std::vector<std::size_t> order(S);
    for (std::size_t s = 0; s < S; ++s) order[s] = s;
    if (cfg.shuffle_execution) {
      RngStream order_rng = make_stream(cfg.seed, StreamRole::Order, t);
      shuffle(order_rng, order);
    }

    // each slot sees only x_t, the server control variate and its own client's state
    std::vector<LocalResult> locals(S);
    const ParamVector x_t = state.x;
    const ParamVector* server_cv = scaffold ? &*state.server_cv : nullptr;
    parallel_for(S, threads, [&](std::size_t pos) {
      const std::size_t slot = order[pos];
      const std::size_t i = sampled[slot];
      RngStream rng = make_stream(cfg.seed, StreamRole::ClientLocal, t, slot);
      const ParamVector* cv = scaffold ? &client_cv[i] : nullptr;
      locals[slot] = run_local(task_for(fed.tasks, i), fed.clients[i].data, x_t, local, cv, server_cv, rng);
    });
    result.comm.uploads += S;

    std::vector<ParamVector> finals;
    finals.reserve(S);
    for (const auto& r : locals) finals.push_back(r.x_final);
    const Aggregate agg = aggregate(x_t, finals);
    ++result.comm.aggregations;
    if (!agg.x_tilde.all_finite()) {
      diverge("non-finite client update at round " + std::to_string(t), static_cast<std::ptrdiff_t>(t));
      break;
    }

    if (scaffold) {
      // c <- c + (1/N) sum over slots of (c_i_new - c_i_old); a client drawn
      // twice keeps the mean of its slots' new values
      ParamVector& c = *state.server_cv;
      ParamVector dc_sum(c.size());
      std::vector<ParamVector> new_cv(N);
      std::vector<std::size_t> hits(N, 0);
      for (std::size_t s = 0; s < S; ++s) {
        const std::size_t i = sampled[s];
        const auto& nc = *locals[s].new_control_variate;
        for (std::size_t j = 0; j < c.size(); ++j) dc_sum[j] += nc[j] - client_cv[i][j];
        if (hits[i]++ == 0) {
          new_cv[i] = nc;
        } else {
          for (std::size_t j = 0; j < c.size(); ++j) new_cv[i][j] += nc[j];
        }
      }
      for (std::size_t j = 0; j < c.size(); ++j) c[j] += dc_sum[j] / static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i) {
        if (hits[i] == 0) continue;
        for (std::size_t j = 0; j < c.size(); ++j) new_cv[i][j] /= static_cast<double>(hits[i]);
        client_cv[i] = std::move(new_cv[i]);
      }
    }

    ServerOptimizer opt = cfg.server;
    opt.eta = eta_t;
    ServerState before = state;
    state = server_step(state, agg, opt);
    ++result.comm.rounds;

    gamma_sched.observe(view.train_loss);
    eta_sched.observe(view.train_loss);

    if (logged) {
      RoundMetrics row;
      row.t = t;
      row.train_loss = view.train_loss;
      row.grad_norm_sq = view.grad_norm_sq;
      row.sigma_g_probe = view.sigma_g;
      row.test_accuracy = detail::test_accuracy(fed, x_t, cfg.test_evaluation);
      row.sampled_clients = sampled;
      row.gamma = gamma_t;
      row.eta = eta_t;
      if (cfg.timing) {
        row.wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
      }
      result.metrics.push_back(std::move(row));
    }

    if (observer) observer(RoundEvent{t, before, state, sampled, locals, agg, gamma_t, eta_t});
  }

  if (!result.divergence) {
    if (!state.x.all_finite()) {
      diverge("non-finite iterate after round " + std::to_string(T - 1), static_cast<std::ptrdiff_t>(T) - 1);
    } else {
      const auto view = detail::global_view(fed, state.x);
      if (!view.finite || view.train_loss > cfg.divergence_loss) {
        diverge("train loss " + fmt17(view.train_loss) + " after round " + std::to_string(T - 1),
                static_cast<std::ptrdiff_t>(T) - 1);
      }
      result.final_train_loss = view.train_loss;
      result.final_grad_norm_sq = view.grad_norm_sq;
      result.final_test_accuracy = detail::test_accuracy(fed, state.x, cfg.test_evaluation);
    }
  }
  result.final_state = std::move(state);
  result.client_control_variates = std::move(client_cv);
  return result;
}

// ---------------------------------------------------------------------------
// Metric log formats

inline constexpr const char* kMetricsCsvHeader = "t,train_loss,test_acc,grad_norm_sq,sigma_g,gamma,eta,clients,wall_ms";

inline std::string join_clients(std::span<const std::size_t> clients) {
  std::string s;
  for (std::size_t k = 0; k < clients.size(); ++k) {
    if (k > 0) s += ';';
    s += std::to_string(clients[k]);
  }
  return s;
}

// The clients column lists the sampled client ids separated by ';'.
inline std::string metrics_csv(std::span<const RoundMetrics> rows) {
  std::string out = kMetricsCsvHeader;
  out += '\n';
  for (const auto& r : rows) {
    out += std::to_string(r.t);
    for (double v : {r.train_loss, r.test_accuracy, r.grad_norm_sq, r.sigma_g_probe, r.gamma, r.eta}) {
      out += ',';
      out += fmt17(v);
    }
    out += ',';
    out += join_clients(r.sampled_clients);
    out += ',';
    out += fmt17(r.wall_ms);
    out += '\n';
  }
  return out;
}

inline std::string metrics_jsonl(std::span<const RoundMetrics> rows) {
  std::string out;
  for (const auto& r : rows) {
    nlohmann::json j = {{"t", r.t},
                        {"train_loss", r.train_loss},
                        {"test_acc", r.test_accuracy},
                        {"grad_norm_sq", r.grad_norm_sq},
                        {"sigma_g", r.sigma_g_probe},
                        {"gamma", r.gamma},
                        {"eta", r.eta},
                        {"clients", r.sampled_clients},
                        {"wall_ms", r.wall_ms}};
    dump_json17(j, out);
    out += '\n';
  }
  return out;
}

}  // namespace fedopt
