#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "fedopt/dataset.hpp"
#include "fedopt/error.hpp"
#include "fedopt/io.hpp"
#include "fedopt/orchestrator.hpp"
#include "fedopt/partition.hpp"
#include "fedopt/random.hpp"
#include "fedopt/tasks.hpp"

namespace fedopt {

// Bad config text or values; the CLI maps it to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class DataSource { SyntheticQuadratic, SyntheticClassification, Idx };

struct DataConfig {
  DataSource source = DataSource::SyntheticQuadratic;
  // synthetic quadratic
  std::size_t clients = 2;
  std::size_t dim = 10;
  double heterogeneity = 1.0;
  QuadraticFamilySpec quadratic;
  // synthetic classification
  SyntheticClassificationSpec classification;
  std::size_t test_samples = 2000;
  // IDX files
  std::filesystem::path train_images, train_labels, test_images, test_labels;
  std::size_t limit = 0;  // keep the first `limit` training rows; 0 = all
};

struct TaskConfig {
  TaskKind kind = TaskKind::Quadratic;
  std::size_t hidden = 32;
  double weight_decay = 0.0;
  double init_scale = 0.1;
};

struct BoundsConfig {
  double radius = 1.0;  // probe ball around x* (quadratics) for G_i and sigma_g
  std::size_t probes = 4;
};

struct RunConfig {
  ExperimentConfig experiment;
  TaskConfig task;
  DataConfig data;
  std::optional<PartitionSpec> partition;
  double client_test_fraction = 0.2;  // per-client evaluation split
  BoundsConfig bounds;
};

namespace detail {

inline std::string line_anchor(std::string_view text, std::size_t byte) {
  std::size_t line = 1;
  std::size_t col = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

// Reads one JSON section and rejects keys it does not know.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  void allow(std::initializer_list<std::string_view> keys) const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (std::find(keys.begin(), keys.end(), it.key()) == keys.end()) {
        throw ConfigError(path_ + ": unknown key \"" + it.key() + "\"");
      }
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  std::optional<Section> sub(const char* key) const {
    if (!has(key)) return std::nullopt;
    return Section(j_.at(key), path_ + "." + key);
  }

  template <typename T>
  T get(const char* key, T fallback) const {
    if (!has(key)) return fallback;
    return as<T>(key);
  }

  template <typename T>
  T require(const char* key) const {
    if (!has(key)) throw ConfigError(path_ + ": missing \"" + key + "\"");
    return as<T>(key);
  }

  const nlohmann::json& raw(const char* key) const { return j_.at(key); }
  const std::string& path() const noexcept { return path_; }

 private:
  template <typename T>
  T as(const char* key) const {
    const auto& v = j_.at(key);
    const std::string where = path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0)) {
        throw ConfigError(where + ": expected a nonnegative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(where + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(where + ": expected a string");
    }
    return v.get<T>();
  }

  const nlohmann::json& j_;
  std::string path_;
};

template <typename E>
E pick(const Section& s, const char* key, E fallback, std::initializer_list<std::pair<std::string_view, E>> names) {
  if (!s.has(key)) return fallback;
  const auto name = s.require<std::string>(key);
  for (const auto& [n, e] : names) {
    if (n == name) return e;
  }
  throw ConfigError(s.path() + "." + key + ": unknown value \"" + name + "\"");
}

inline Schedule parse_schedule(const Section& s) {
  s.allow({"kind", "decay", "milestones", "patience", "factor"});
  Schedule out;
  out.kind = pick(s, "kind", ScheduleKind::Constant,
                  {{"constant", ScheduleKind::Constant},
                   {"multistage", ScheduleKind::MultiStage},
                   {"plateau", ScheduleKind::ReduceOnPlateau}});
  out.decay = s.get("decay", out.decay);
  if (s.has("milestones")) {
    const auto& m = s.raw("milestones");
    if (!m.is_array()) throw ConfigError(s.path() + ".milestones: expected an array");
    out.milestones.clear();
    for (const auto& f : m) {
      if (!f.is_number()) throw ConfigError(s.path() + ".milestones: expected numbers");
      out.milestones.push_back(f.get<double>());
    }
  }
  out.patience = s.get("patience", out.patience);
  out.factor = s.get("factor", out.factor);
  return out;
}

inline Calibration parse_calibration(const Section& s) {
  s.allow({"kind", "eps", "p", "beta"});
  const auto kind = s.get<std::string>("kind", "epsilon");
  if (kind == "identity") return IdentityCalibration{};
  if (kind == "epsilon") return EpsilonCalibration{s.get("eps", 1e-8)};
  if (kind == "power") return PowerCalibration{s.get("p", 0.25), s.get("eps", 1e-8)};
  if (kind == "softplus") return SoftplusCalibration{s.get("beta", 50.0)};
  throw ConfigError(s.path() + ".kind: unknown value \"" + kind + "\"");
}

}  // namespace detail

// Server optimizer section. The kind sets default betas and calibration;
// explicit fields override them. "label" names the method in comparisons.
inline ServerOptimizer parse_server(const nlohmann::json& j, const std::string& path = "server") {
  detail::Section s(j, path);
  s.allow({"kind", "eta", "beta1", "beta2", "calibration", "label"});
  ServerOptimizer opt;
  opt.kind = detail::pick(s, "kind", ServerKind::Avg,
                          {{"avg", ServerKind::Avg},
                           {"momentum", ServerKind::Momentum},
                           {"adam", ServerKind::Adam},
                           {"amsgrad", ServerKind::AmsGrad},
                           {"yogi", ServerKind::Yogi}});
  switch (opt.kind) {
    case ServerKind::Avg:
      break;
    case ServerKind::Momentum:
      opt.beta1 = 0.9;
      break;
    case ServerKind::Adam:
    case ServerKind::AmsGrad:
      opt.beta1 = 0.9;
      opt.beta2 = 0.99;
      opt.calibration = EpsilonCalibration{};
      break;
    case ServerKind::Yogi:
      opt.beta2 = 0.99;
      opt.calibration = EpsilonCalibration{};
      break;
  }
  opt.eta = s.get("eta", opt.eta);
  opt.beta1 = s.get("beta1", opt.beta1);
  opt.beta2 = s.get("beta2", opt.beta2);
  if (auto c = s.sub("calibration")) opt.calibration = detail::parse_calibration(*c);
  return opt;
}

inline RunConfig parse_run_config(const nlohmann::json& root) {
  using detail::pick;
  using detail::Section;
  RunConfig rc;
  Section top(root, "config");
  top.allow({"seed", "rounds", "threads", "metric_every", "timing", "task", "data", "partition", "sampling", "local",
             "server", "schedules", "evaluation", "bounds", "divergence_loss"});
  auto& ex = rc.experiment;
  ex.seed = top.get<std::uint64_t>("seed", 0);
  ex.rounds = top.require<std::size_t>("rounds");
  ex.threads = top.get<std::size_t>("threads", 1);
  ex.metric_every = top.get<std::size_t>("metric_every", 1);
  ex.timing = top.get("timing", false);
  ex.divergence_loss = top.get("divergence_loss", ex.divergence_loss);

  if (auto t = top.sub("task")) {
    t->allow({"kind", "hidden", "weight_decay", "init_scale"});
    rc.task.kind = pick(*t, "kind", TaskKind::Quadratic,
                        {{"quadratic", TaskKind::Quadratic},
                         {"logistic", TaskKind::LogisticRegression},
                         {"mlp", TaskKind::Mlp}});
    rc.task.hidden = t->get("hidden", rc.task.hidden);
    rc.task.weight_decay = t->get("weight_decay", rc.task.weight_decay);
    rc.task.init_scale = t->get("init_scale", rc.task.init_scale);
  }

  if (auto d = top.sub("data")) {
    d->allow({"source", "clients", "dim", "heterogeneity", "samples_per_client", "noise", "curvature_min",
              "curvature_max", "shared_curvature", "unbalanced", "samples", "test_samples", "features", "classes",
              "train_images", "train_labels", "test_images", "test_labels", "limit"});
    auto& dc = rc.data;
    dc.source = pick(*d, "source", DataSource::SyntheticQuadratic,
                     {{"synthetic_quadratic", DataSource::SyntheticQuadratic},
                      {"synthetic_classification", DataSource::SyntheticClassification},
                      {"idx", DataSource::Idx}});
    dc.clients = d->get("clients", dc.clients);
    dc.dim = d->get("dim", dc.dim);
    dc.heterogeneity = d->get("heterogeneity", dc.heterogeneity);
    dc.quadratic.samples_per_client = d->get("samples_per_client", dc.quadratic.samples_per_client);
    dc.quadratic.noise = d->get("noise", dc.quadratic.noise);
    dc.quadratic.curvature_min = d->get("curvature_min", dc.quadratic.curvature_min);
    dc.quadratic.curvature_max = d->get("curvature_max", dc.quadratic.curvature_max);
    dc.quadratic.shared_curvature = d->get("shared_curvature", dc.quadratic.shared_curvature);
    dc.quadratic.unbalanced = d->get("unbalanced", dc.quadratic.unbalanced);
    dc.classification.samples = d->get("samples", dc.classification.samples);
    dc.classification.features = d->get("features", dc.classification.features);
    dc.classification.classes = d->get("classes", dc.classification.classes);
    if (dc.source == DataSource::SyntheticClassification) {
      dc.classification.noise = d->get("noise", dc.classification.noise);
    }
    dc.test_samples = d->get("test_samples", dc.test_samples);
    dc.train_images = d->get<std::string>("train_images", "");
    dc.train_labels = d->get<std::string>("train_labels", "");
    dc.test_images = d->get<std::string>("test_images", "");
    dc.test_labels = d->get<std::string>("test_labels", "");
    dc.limit = d->get("limit", dc.limit);
  }
  rc.data.quadratic.weight_decay = rc.task.weight_decay;

  if (auto p = top.sub("partition")) {
    p->allow({"scheme", "clients", "alpha", "classes_per_client", "label_groups", "balance"});
    PartitionSpec ps;
    ps.scheme = pick(*p, "scheme", PartitionScheme::Uniform,
                     {{"dirichlet", PartitionScheme::Dirichlet},
                      {"sort_and_partition", PartitionScheme::SortAndPartition},
                      {"uniform", PartitionScheme::Uniform}});
    ps.clients = p->require<std::size_t>("clients");
    ps.alpha = p->get("alpha", ps.alpha);
    ps.classes_per_client = p->get("classes_per_client", ps.classes_per_client);
    ps.label_groups = p->get("label_groups", ps.label_groups);
    ps.balance = pick(*p, "balance", ps.balance,
                      {{"equal", WeightBalance::Equal}, {"proportional", WeightBalance::Proportional}});
    rc.partition = ps;
  }

  if (auto s = top.sub("sampling")) {
    s->allow({"clients_per_round", "mode"});
    ex.sampling.clients_per_round = s->get("clients_per_round", ex.sampling.clients_per_round);
    ex.sampling.mode = pick(*s, "mode", ex.sampling.mode,
                            {{"with_replacement", SamplingMode::WithReplacementByWeight},
                             {"full", SamplingMode::Full}});
  }

  if (auto l = top.sub("local")) {
    l->allow({"steps", "mode", "gamma", "batch_size", "variant", "prox_mu"});
    auto& lc = ex.local;
    lc.steps = l->get("steps", lc.steps);
    lc.step_mode = pick(*l, "mode", lc.step_mode, {{"fixed", LocalStepMode::Fixed}, {"epoch", LocalStepMode::Epoch}});
    lc.gamma = l->get("gamma", lc.gamma);
    lc.batch_size = l->get("batch_size", lc.batch_size);
    lc.variant = pick(*l, "variant", lc.variant,
                      {{"sgd", LocalVariant::PlainSgd}, {"prox", LocalVariant::Prox}, {"scaffold", LocalVariant::Scaffold}});
    lc.prox_mu = l->get("prox_mu", lc.prox_mu);
  }

  if (top.has("server")) ex.server = parse_server(top.raw("server"));

  if (auto s = top.sub("schedules")) {
    s->allow({"gamma", "eta"});
    if (auto g = s->sub("gamma")) ex.gamma_schedule = detail::parse_schedule(*g);
    if (auto e = s->sub("eta")) ex.eta_schedule = detail::parse_schedule(*e);
  }

  if (auto e = top.sub("evaluation")) {
    e->allow({"test", "client_test_fraction"});
    ex.test_evaluation = pick(*e, "test", ex.test_evaluation,
                              {{"global", TestEvaluation::Global}, {"per_client", TestEvaluation::PerClient}});
    rc.client_test_fraction = e->get("client_test_fraction", rc.client_test_fraction);
  }

  if (auto b = top.sub("bounds")) {
    b->allow({"radius", "probes"});
    rc.bounds.radius = b->get("radius", rc.bounds.radius);
    rc.bounds.probes = b->get("probes", rc.bounds.probes);
  }

  if (rc.data.source != DataSource::SyntheticQuadratic) {
    if (!rc.partition) throw ConfigError("config: classification data needs a \"partition\" section");
    if (rc.task.kind == TaskKind::Quadratic) throw ConfigError("config.task.kind: quadratic needs synthetic_quadratic data");
  } else if (rc.task.kind != TaskKind::Quadratic) {
    throw ConfigError("config.task.kind: synthetic_quadratic data needs the quadratic task");
  }
  if (!(rc.client_test_fraction > 0.0 && rc.client_test_fraction < 1.0)) {
    throw ConfigError("config.evaluation.client_test_fraction: must be in (0, 1)");
  }
  try {
    ex.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

// Parses config text; syntax errors carry the line and column.
inline nlohmann::json parse_json_text(std::string_view text, const std::string& origin) {
  try {
    return nlohmann::json::parse(text.begin(), text.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(origin + ": " + detail::line_anchor(text, e.byte == 0 ? 0 : e.byte - 1) +
                      ": malformed JSON (" + e.what() + ")");
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  auto rc = parse_run_config(parse_json_text(text, path.string()));
  // relative IDX paths are taken from the config file's directory
  for (auto* f : {&rc.data.train_images, &rc.data.train_labels, &rc.data.test_images, &rc.data.test_labels}) {
    if (!f->empty() && f->is_relative()) *f = path.parent_path() / *f;
  }
  return rc;
}

// A built federation plus what the bound report needs about it.
struct BuiltFederation {
  Federation federation;
  std::optional<ParamVector> optimum;  // closed form for quadratics
};

inline BuiltFederation build_federation(const RunConfig& rc) {
  const std::uint64_t seed = rc.experiment.seed;
  BuiltFederation out;
  auto& fed = out.federation;
  RngStream data_rng = make_stream(seed, StreamRole::Data);

  if (rc.data.source == DataSource::SyntheticQuadratic) {
    auto fq = make_synthetic_federated_quadratic(rc.data.clients, rc.data.dim, rc.data.heterogeneity, data_rng,
                                                 rc.data.quadratic);
    fed.tasks = std::move(fq.tasks);
    fed.clients = shards_from(std::move(fq.data), fq.weights);
    fed.x0 = ParamVector(rc.data.dim);
    out.optimum = std::move(fq.optimum);
    return out;
  }

  Dataset train;
  std::optional<Dataset> test;
  if (rc.data.source == DataSource::SyntheticClassification) {
    RngStream proto = make_stream(seed, StreamRole::Data, 1);
    RngStream proto_copy = proto;
    RngStream train_rng = make_stream(seed, StreamRole::Data, 2);
    RngStream test_rng = make_stream(seed, StreamRole::Data, 3);
    train = make_synthetic_classification(rc.data.classification, proto, train_rng);
    if (rc.data.test_samples > 0) {
      auto spec = rc.data.classification;
      spec.samples = rc.data.test_samples;
      test = make_synthetic_classification(spec, proto_copy, test_rng);
    }
  } else {
    if (rc.data.train_images.empty() || rc.data.train_labels.empty()) {
      throw ConfigError("config.data: idx source needs train_images and train_labels");
    }
    train = load_idx_dataset(rc.data.train_images, rc.data.train_labels);
    if (rc.data.limit > 0 && rc.data.limit < train.size()) {
      std::vector<std::size_t> keep(rc.data.limit);
      for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
      train = train.subset(keep);
    }
    if (!rc.data.test_images.empty()) test = load_idx_dataset(rc.data.test_images, rc.data.test_labels);
  }

  RngStream part_rng = make_stream(seed, StreamRole::Partition);
  fed.clients = partition(train, *rc.partition, part_rng);
  const std::size_t C = train.num_classes();
  const std::size_t p = train.feature_dim();
  switch (rc.task.kind) {
    case TaskKind::LogisticRegression:
      fed.tasks.push_back(Task::logistic(p, C, rc.task.weight_decay));
      break;
    case TaskKind::Mlp:
      fed.tasks.push_back(Task::mlp(p, rc.task.hidden, C, rc.task.weight_decay));
      break;
    case TaskKind::Quadratic:
      break;
  }
  if (rc.experiment.test_evaluation == TestEvaluation::PerClient) {
    RngStream split_rng = make_stream(seed, StreamRole::Partition, 1);
    for (auto& shard : fed.clients) {
      const std::size_t n = shard.data.size();
      const auto held = static_cast<std::size_t>(static_cast<double>(n) * rc.client_test_fraction);
      if (held == 0 || held >= n) throw ConfigError("config.evaluation: client shard too small to split");
      auto te = sample_without_replacement(split_rng, n, held);
      std::sort(te.begin(), te.end());
      std::vector<std::size_t> tr;
      tr.reserve(n - held);
      for (std::size_t i = 0, k = 0; i < n; ++i) {
        if (k < te.size() && te[k] == i) {
          ++k;
        } else {
          tr.push_back(i);
        }
      }
      fed.client_tests.push_back(shard.data.subset(te));
      shard.data = shard.data.subset(tr);
    }
  }
  fed.test_set = std::move(test);
  RngStream init_rng = make_stream(seed, StreamRole::Init);
  fed.x0 = initial_params(fed.tasks.front(), init_rng, rc.task.init_scale);
  return out;
}

}  // namespace fedopt
