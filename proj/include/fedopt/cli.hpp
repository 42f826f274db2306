#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "fedopt/config.hpp"
#include "fedopt/io.hpp"
#include "fedopt/orchestrator.hpp"
#include "fedopt/partition.hpp"
#include "fedopt/server.hpp"
#include "fedopt/theory.hpp"

namespace fedopt::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitDivergence = 2;

// Round-level quantities the bound report compares against theory.
struct RunObservations {
  double delta_sq_sum = 0.0;
  std::size_t rounds = 0;
  double min_step = std::numeric_limits<double>::infinity();
  double max_step = 0.0;
};

inline RoundObserver observe_into(RunObservations& obs, const ServerOptimizer& opt) {
  return [&obs, opt](const RoundEvent& ev) {
    obs.delta_sq_sum += l2_norm_sq(ev.aggregate.delta);
    ++obs.rounds;
    for (double v : ev.after.v) {
      const double step = 1.0 / calibrate_value(v, opt.calibration);
      obs.min_step = std::min(obs.min_step, step);
      obs.max_step = std::max(obs.max_step, step);
    }
  };
}

inline std::size_t local_steps_max(const Federation& fed, const LocalConfig& local) {
  std::size_t K = 1;
  for (const auto& c : fed.clients) K = std::max(K, local.steps_for(c.data.size()));
  return K;
}

// Problem constants for the configured federation. Quadratics use closed
// forms over a ball around x*; other tasks are probed along the segment from
// x0 to `x_end`.
inline ProblemConstants constants_for(const RunConfig& rc, const BuiltFederation& built, const ParamVector& x_end) {
  const auto& fed = built.federation;
  const auto& ex = rc.experiment;
  const std::size_t K = local_steps_max(fed, ex.local);
  const std::size_t S =
      ex.sampling.mode == SamplingMode::Full ? fed.clients.size() : ex.sampling.clients_per_round;
  if (built.optimum) {
    const double radius = std::max(rc.bounds.radius, std::sqrt(l2_dist_sq(fed.x0, *built.optimum)));
    return quadratic_constants(fed.tasks, fed.clients, *built.optimum, radius, ex.local.batch_size, K,
                               ex.local.gamma, S, ex.server.eta);
  }
  std::vector<ParamVector> probes;
  const std::size_t n = std::max<std::size_t>(rc.bounds.probes, 2);
  for (std::size_t k = 0; k < n; ++k) {
    const double a = static_cast<double>(k) / static_cast<double>(n - 1);
    ParamVector x(fed.x0.size());
    for (std::size_t j = 0; j < x.size(); ++j) x[j] = (1.0 - a) * fed.x0[j] + a * x_end[j];
    probes.push_back(std::move(x));
  }
  RngStream rng = make_stream(ex.seed, StreamRole::Probe);
  return estimate_constants(fed.tasks, fed.clients, probes, ex.local.batch_size, K, ex.local.gamma, S,
                            ex.server.eta, rng);
}

inline nlohmann::json constants_json(const ProblemConstants& c, double V, const MuPair& mu, const Admissibility& a) {
  return nlohmann::json{{"L", c.L},
                        {"sigma_g", c.sigma_g},
                        {"weighted_sigma_sq", c.weighted_sigma_sq()},
                        {"weighted_G_sq", c.weighted_G_sq()},
                        {"K", c.K},
                        {"S", c.S},
                        {"gamma", c.gamma},
                        {"eta", c.eta},
                        {"V", V},
                        {"mu_lower", mu.lower},
                        {"mu_upper", mu.upper},
                        {"gamma_max", a.gamma_max},
                        {"smoothness_limit", a.smoothness_limit},
                        {"adaptivity_limit", a.adaptivity_limit}};
}

struct BoundReport {
  ProblemConstants constants;
  double V = 0.0;
  MuPair mu;
  Admissibility admissibility;
  std::vector<BoundEntry> entries;

  nlohmann::json to_json(const std::string& method, std::uint64_t seed) const {
    return nlohmann::json{{"method", method},
                          {"seed", seed},
                          {"constants", constants_json(constants, V, mu, admissibility)},
                          {"entries", bound_report_json(entries)}};
  }
};

inline Admissibility admissibility_for(const ProblemConstants& c, const ServerOptimizer& opt, double* V_out = nullptr,
                                       MuPair* mu_out = nullptr) {
  const double V = compute_V(c);
  const MuPair mu = mu_pair(opt.calibration, V);
  if (V_out != nullptr) *V_out = V;
  if (mu_out != nullptr) *mu_out = mu;
  return stepsize_admissible(c, mu);
}

inline BoundReport bound_report(const RunConfig& rc, const BuiltFederation& built, const ExperimentResult& result,
                                const RunObservations& obs) {
  BoundReport rep;
  const auto& opt = rc.experiment.server;
  rep.constants = constants_for(rc, built, result.final_state.x);
  rep.admissibility = admissibility_for(rep.constants, opt, &rep.V, &rep.mu);
  const auto& a = rep.admissibility;

  BoundEntry step{"stepsize_admissible", rep.constants.gamma, a.gamma_max, a.ok, 1, ""};
  step.notes = a.smoothness_binds ? "smoothness limit 1/(8LK) binds" : "adaptivity limit binds";
  if (!a.ok) step.notes = "inadmissible stepsize: gamma >= gamma_max; " + step.notes;
  rep.entries.push_back(step);

  if (obs.rounds > 0) {
    const double mean_delta = obs.delta_sq_sum / static_cast<double>(obs.rounds);
    rep.entries.push_back({"delta_second_moment", mean_delta, rep.V, mean_delta <= rep.V, 1,
                           "mean over rounds of ||Delta_t||^2"});
    rep.entries.push_back({"adaptive_stepsize_lower", obs.min_step, rep.mu.lower, obs.min_step >= rep.mu.lower, 1,
                           "smallest 1/calibrate(v_t) seen"});
    rep.entries.push_back({"adaptive_stepsize_upper", obs.max_step, rep.mu.upper, obs.max_step <= rep.mu.upper, 1,
                           "largest 1/calibrate(v_t) seen"});
  }
  double sg = 0.0;
  for (const auto& m : result.metrics) sg = std::max(sg, m.sigma_g_probe);
  rep.entries.push_back({"gradient_dissimilarity", sg, rep.constants.sigma_g, sg <= rep.constants.sigma_g, 1,
                         "largest per-round sigma_g probe"});

  std::vector<double> gn;
  for (const auto& m : result.metrics) gn.push_back(m.grad_norm_sq);
  if (rc.experiment.metric_every == 1 && gn.size() >= 20) {
    const auto env = rate_envelope(gn, rep.mu, rep.constants);
    rep.entries.push_back({"rate_trend", env.ratio, 1.0, !env.flagged, 1,
                           "running average of ||grad f||^2 at T over its value at T/2"});
  } else {
    rep.entries.push_back({"rate_trend", 0.0, 1.0, false, 1, "needs a per-round log of at least 20 rounds"});
  }
  return rep;
}

inline void write_run_outputs(const std::filesystem::path& dir, const ExperimentResult& result) {
  write_file_atomic(dir / "metrics.csv", metrics_csv(result.metrics));
  write_file_atomic(dir / "metrics.jsonl", metrics_jsonl(result.metrics));
  write_file_atomic(dir / "model.bin", encode_model(result.final_state.x));
}

// run <config.json> [--out DIR] [--seed N]
inline int cmd_run(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
                   std::optional<std::uint64_t> seed, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  BuiltFederation built;
  try {
    rc = load_run_config(config_path);
    if (seed) rc.experiment.seed = *seed;
    built = build_federation(rc);
    built.federation.validate();
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  const auto& ex = rc.experiment;
  const std::string method = recover_baseline(ex.server);

  try {
    const auto c = constants_for(rc, built, built.optimum ? *built.optimum : built.federation.x0);
    const auto a = admissibility_for(c, ex.server);
    if (!a.ok) {
      err << "warning: gamma " << fmt17(ex.local.gamma) << " exceeds the admissible limit " << fmt17(a.gamma_max)
          << "; running anyway\n";
    }
  } catch (const std::exception& e) {
    err << "warning: admissibility check skipped: " << e.what() << '\n';
  }

  RunObservations obs;
  ExperimentResult result;
  try {
    result = run_experiment(built.federation, ex, observe_into(obs, ex.server));
  } catch (const std::invalid_argument& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  write_run_outputs(out_dir, result);
  nlohmann::json report;
  if (result.diverged()) {
    report = {{"method", method},
              {"seed", ex.seed},
              {"diverged", true},
              {"reason", result.divergence->reason},
              {"last_finite_round", result.divergence->last_finite_round}};
  } else {
    report = bound_report(rc, built, result, obs).to_json(method, ex.seed);
    report["diverged"] = false;
  }
  write_file_atomic(out_dir / "bounds.json", dump_json17(report) + "\n");

  if (result.diverged()) {
    err << "diverged: " << result.divergence->reason << " (last finite round "
        << result.divergence->last_finite_round << ")\n";
    return kExitDivergence;
  }
  out << method << " seed " << ex.seed << ": rounds " << ex.rounds << ", final train loss "
      << fmt17(result.final_train_loss) << ", final test accuracy " << fmt17(result.final_test_accuracy)
      << ", final ||grad f||^2 " << fmt17(result.final_grad_norm_sq) << '\n';
  return kExitOk;
}

// ---------------------------------------------------------------------------
// compare <manifest.json>

struct ManifestMethod {
  std::string label;
  ServerOptimizer server;
};

struct RunManifest {
  RunConfig base;
  std::filesystem::path output;
  std::vector<ManifestMethod> methods;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
};

inline std::string file_safe(const std::string& label) {
  std::string s;
  for (char ch : label) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') || (ch >= '0' && ch <= '9') || ch == '-' ||
                    ch == '_' || ch == '.';
    s += ok ? ch : '_';
  }
  return s.empty() ? "method" : s;
}

// {"config": path or object, "output": dir, "methods": [server sections],
//  "seeds": [..], "jobs": n}. Relative paths resolve against the manifest.
inline RunManifest load_manifest(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  const auto root = parse_json_text(text, path.string());
  detail::Section top(root, "manifest");
  top.allow({"config", "output", "methods", "seeds", "jobs"});
  const auto base_dir = path.parent_path();
  RunManifest m;
  if (!top.has("config")) throw ConfigError("manifest: missing \"config\"");
  const auto& cfg = top.raw("config");
  if (cfg.is_string()) {
    m.base = load_run_config(base_dir / cfg.get<std::string>());
  } else {
    m.base = parse_run_config(cfg);
  }
  m.output = base_dir / top.require<std::string>("output");
  if (!top.has("methods") || !top.raw("methods").is_array() || top.raw("methods").empty()) {
    throw ConfigError("manifest.methods: expected a nonempty array");
  }
  std::map<std::string, std::size_t> seen;
  std::size_t k = 0;
  for (const auto& mj : top.raw("methods")) {
    const std::string where = "manifest.methods[" + std::to_string(k++) + "]";
    ManifestMethod mm;
    mm.server = parse_server(mj, where);
    try {
      mm.server.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + ": " + e.what());
    }
    mm.label = mj.contains("label") && mj.at("label").is_string() ? mj.at("label").get<std::string>()
                                                                  : recover_baseline(mm.server);
    if (const auto n = seen[mm.label]++; n > 0) mm.label += "#" + std::to_string(n + 1);
    m.methods.push_back(std::move(mm));
  }
  if (top.has("seeds")) {
    const auto& sj = top.raw("seeds");
    if (!sj.is_array() || sj.empty()) throw ConfigError("manifest.seeds: expected a nonempty array");
    for (const auto& s : sj) {
      if (!s.is_number_unsigned()) throw ConfigError("manifest.seeds: expected nonnegative integers");
      m.seeds.push_back(s.get<std::uint64_t>());
    }
  } else {
    m.seeds.push_back(m.base.experiment.seed);
  }
  m.jobs = top.get<std::size_t>("jobs", 1);
  if (m.jobs < 1) throw ConfigError("manifest.jobs: must be >= 1");
  return m;
}

struct CellOutcome {
  bool ok = false;
  std::string status;  // ok | diverged | error
  std::string message;
  double test_accuracy = 0.0;
  double train_loss = 0.0;
  double grad_norm_sq = 0.0;
};

struct MethodSummary {
  std::string label;
  std::size_t succeeded = 0;
  std::size_t failed = 0;
  double acc_mean = 0.0, acc_std = 0.0;
  double loss_mean = 0.0, loss_std = 0.0;
  double grad_mean = 0.0, grad_std = 0.0;
};

// Sample mean and standard deviation (n - 1 denominator; 0 for one value).
inline std::pair<double, double> mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  if (xs.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / static_cast<double>(xs.size() - 1))};
}

inline std::string pm(double mean, double sd, int digits = 4) {
  if (!std::isfinite(mean)) return "n/a";
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << mean << " ± " << sd;
  return os.str();
}

// Left-justify to `width` columns, counting UTF-8 code points rather than bytes.
inline std::string pad(std::string s, std::size_t width) {
  std::size_t cols = 0;
  for (unsigned char ch : s) cols += (ch & 0xC0) != 0x80;
  if (cols < width) s.append(width - cols, ' ');
  return s;
}

struct CompareResult {
  std::vector<MethodSummary> summaries;
  std::string table;        // human-readable summary
  std::string summary_csv;  // fmt17 numbers
  std::string cells_csv;
  std::size_t succeeded = 0;
};

inline CompareResult run_compare(const RunManifest& m) {
  const std::size_t M = m.methods.size();
  const std::size_t R = m.seeds.size();
  std::vector<CellOutcome> cells(M * R);
  std::vector<ExperimentResult> results(M * R);

  parallel_for(M * R, effective_threads(m.jobs), [&](std::size_t cell) {
    const auto& method = m.methods[cell / R];
    RunConfig rc = m.base;
    rc.experiment.seed = m.seeds[cell % R];
    rc.experiment.server = method.server;
    auto& o = cells[cell];
    try {
      const auto built = build_federation(rc);
      results[cell] = run_experiment(built.federation, rc.experiment);
      const auto& r = results[cell];
      if (r.diverged()) {
        o.status = "diverged";
        o.message = r.divergence->reason;
      } else {
        o.ok = true;
        o.status = "ok";
        o.test_accuracy = r.final_test_accuracy;
        o.train_loss = r.final_train_loss;
        o.grad_norm_sq = r.final_grad_norm_sq;
      }
    } catch (const std::exception& e) {
      o.status = "error";
      o.message = e.what();
    }
  });

  CompareResult out;
  out.cells_csv = "method,seed,status,final_test_acc,final_train_loss,final_grad_norm_sq,message\n";
  for (std::size_t mi = 0; mi < M; ++mi) {
    const auto& label = m.methods[mi].label;
    std::vector<double> acc, loss, grad;
    MethodSummary s;
    s.label = label;
    for (std::size_t ri = 0; ri < R; ++ri) {
      const std::size_t cell = mi * R + ri;
      const auto& o = cells[cell];
      std::string msg = o.message;
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      out.cells_csv += label + "," + std::to_string(m.seeds[ri]) + "," + o.status + "," + fmt17(o.test_accuracy) +
                       "," + fmt17(o.train_loss) + "," + fmt17(o.grad_norm_sq) + "," + msg + "\n";
      if (o.status != "error") {
        write_file_atomic(m.output / file_safe(label) / ("seed_" + std::to_string(m.seeds[ri]) + ".csv"),
                          metrics_csv(results[cell].metrics));
      }
      if (o.ok) {
        ++s.succeeded;
        acc.push_back(o.test_accuracy);
        loss.push_back(o.train_loss);
        grad.push_back(o.grad_norm_sq);
      } else {
        ++s.failed;
      }
    }
    std::tie(s.acc_mean, s.acc_std) = mean_std(acc);
    std::tie(s.loss_mean, s.loss_std) = mean_std(loss);
    std::tie(s.grad_mean, s.grad_std) = mean_std(grad);
    out.succeeded += s.succeeded;
    out.summaries.push_back(std::move(s));
  }

  out.summary_csv = "method,succeeded,failed,test_acc_mean,test_acc_std,train_loss_mean,train_loss_std,"
                    "grad_norm_sq_mean,grad_norm_sq_std\n";
  std::size_t width = 6;
  for (const auto& s : out.summaries) width = std::max(width, s.label.size());
  std::ostringstream table;
  table << std::left << std::setw(static_cast<int>(width)) << "Method"
        << " | Test accuracy (%)      | Train loss              | Runs\n";
  table << std::string(width, '-') << "-+------------------------+-------------------------+-----\n";
  for (const auto& s : out.summaries) {
    out.summary_csv += s.label + "," + std::to_string(s.succeeded) + "," + std::to_string(s.failed) + "," +
                       fmt17(s.acc_mean) + "," + fmt17(s.acc_std) + "," + fmt17(s.loss_mean) + "," +
                       fmt17(s.loss_std) + "," + fmt17(s.grad_mean) + "," + fmt17(s.grad_std) + "\n";
    table << std::left << std::setw(static_cast<int>(width)) << s.label << " | "
          << pad(pm(100.0 * s.acc_mean, 100.0 * s.acc_std, 2), 22) << " | "
          << pad(pm(s.loss_mean, s.loss_std, 6), 23) << " | " << s.succeeded << "/" << (s.succeeded + s.failed)
          << "\n";
  }
  out.table = table.str();
  return out;
}

inline int cmd_compare(const std::filesystem::path& manifest_path, std::ostream& out, std::ostream& err) {
  RunManifest m;
  try {
    m = load_manifest(manifest_path);
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  const auto res = run_compare(m);
  write_file_atomic(m.output / "summary.csv", res.summary_csv);
  write_file_atomic(m.output / "summary.txt", res.table);
  write_file_atomic(m.output / "cells.csv", res.cells_csv);
  out << res.table;
  if (res.succeeded == 0) {
    err << "no cell succeeded; see " << (m.output / "cells.csv").string() << '\n';
    return kExitDivergence;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// partition-report <config.json>

struct PartitionReportOptions {
  std::vector<double> alphas;  // empty: the config's own alpha
  std::size_t seeds = 1;       // seeds averaged in the entropy summary
};

// Fewest digits that still read back as `v`.
inline std::string fmt_shortest(double v) {
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string alpha_tag(double a) {
  std::string s = fmt_shortest(a);
  std::replace(s.begin(), s.end(), '.', 'p');
  return s;
}

inline int cmd_partition_report(const std::filesystem::path& config_path, const std::filesystem::path& out_dir,
                                const PartitionReportOptions& opts, std::ostream& out, std::ostream& err) {
  RunConfig rc;
  try {
    rc = load_run_config(config_path);
    if (!rc.partition) throw ConfigError("partition-report: config has no \"partition\" section");
    if (opts.seeds < 1) throw ConfigError("partition-report: --seeds must be >= 1");
  } catch (const std::exception& e) {
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  }
  std::vector<double> alphas = opts.alphas;
  const bool dirichlet = rc.partition->scheme == PartitionScheme::Dirichlet;
  if (alphas.empty() || !dirichlet) alphas = {rc.partition->alpha};

  std::string summary = "alpha,mean_entropy,std_entropy,seeds\n";
  for (double alpha : alphas) {
    std::vector<double> entropies;
    for (std::size_t k = 0; k < opts.seeds; ++k) {
      RunConfig cell = rc;
      cell.partition->alpha = alpha;
      cell.experiment.seed = rc.experiment.seed + k;
      BuiltFederation built;
      try {
        built = build_federation(cell);
      } catch (const std::exception& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
      }
      const auto& shards = built.federation.clients;
      entropies.push_back(mean_label_entropy(empirical_label_histogram(shards)));
      if (k == 0) {
        const std::string name = dirichlet ? "histogram_alpha_" + alpha_tag(alpha) + ".csv" : "histogram.csv";
        write_file_atomic(out_dir / name, partition_report_csv(shards));
      }
    }
    const auto [mean, sd] = mean_std(entropies);
    summary += fmt17(alpha) + "," + fmt17(mean) + "," + fmt17(sd) + "," + std::to_string(opts.seeds) + "\n";
    out << "alpha " << fmt_shortest(alpha) << ": mean label entropy " << fmt17(mean) << '\n';
  }
  write_file_atomic(out_dir / "entropy_summary.csv", summary);
  return kExitOk;
}

}  // namespace fedopt::cli
