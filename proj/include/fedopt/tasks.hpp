#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "fedopt/dataset.hpp"
#include "fedopt/error.hpp"
#include "fedopt/numerics.hpp"
#include "fedopt/random.hpp"

namespace fedopt {

// f(x) = mean_s 1/2 sum_j a_j (x_j - z_sj)^2 over the dataset rows z_s.
// Gradient is A (x - mean z), so the client optimum is the row mean.
struct QuadraticModel {
  std::vector<double> curvature;
};

// Multinomial logistic regression. Layout: W (classes x features) row-major,
// then the bias vector (classes).
struct LogisticModel {
  std::size_t features = 0;
  std::size_t classes = 0;
};

// One tanh hidden layer. Layout: W1 (hidden x features), b1 (hidden),
// W2 (classes x hidden), b2 (classes).
struct MlpModel {
  std::size_t features = 0;
  std::size_t hidden = 0;
  std::size_t classes = 0;
};

enum class TaskKind { Quadratic, LogisticRegression, Mlp };

class Task {
 public:
  using Model = std::variant<QuadraticModel, LogisticModel, MlpModel>;

  explicit Task(Model model, double weight_decay = 0.0)
      : model_(std::move(model)), weight_decay_(weight_decay) {
    if (!(weight_decay_ >= 0.0)) throw ParameterError("Task: weight decay must be >= 0");
    std::visit([](const auto& m) { validate(m); }, model_);
  }

  static Task quadratic(std::vector<double> curvature, double weight_decay = 0.0) {
    return Task(QuadraticModel{std::move(curvature)}, weight_decay);
  }
  static Task logistic(std::size_t features, std::size_t classes, double weight_decay = 0.0) {
    return Task(LogisticModel{features, classes}, weight_decay);
  }
  static Task mlp(std::size_t features, std::size_t hidden, std::size_t classes,
                  double weight_decay = 0.0) {
    return Task(MlpModel{features, hidden, classes}, weight_decay);
  }

  TaskKind kind() const noexcept { return static_cast<TaskKind>(model_.index()); }
  const Model& model() const noexcept { return model_; }
  double weight_decay() const noexcept { return weight_decay_; }

  std::size_t dim() const noexcept {
    return std::visit(
        [](const auto& m) -> std::size_t {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, QuadraticModel>) {
            return m.curvature.size();
          } else if constexpr (std::is_same_v<M, LogisticModel>) {
            return m.classes * (m.features + 1);
          } else {
            return m.hidden * m.features + m.hidden + m.classes * m.hidden + m.classes;
          }
        },
        model_);
  }

  // Feature width the task expects of its dataset.
  std::size_t input_dim() const noexcept {
    return std::visit(
        [](const auto& m) -> std::size_t {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, QuadraticModel>) {
            return m.curvature.size();
          } else {
            return m.features;
          }
        },
        model_);
  }

  // Smoothness constant when it is known in closed form (quadratics only).
  double quadratic_smoothness() const {
    const auto* q = std::get_if<QuadraticModel>(&model_);
    if (q == nullptr) throw ParameterError("quadratic_smoothness: not a quadratic task");
    return *std::max_element(q->curvature.begin(), q->curvature.end()) + weight_decay_;
  }

 private:
  static void validate(const QuadraticModel& m) {
    if (m.curvature.empty()) throw StructuralError("quadratic task: empty curvature");
    for (double a : m.curvature) {
      if (!(a > 0.0) || !std::isfinite(a)) throw ParameterError("quadratic task: curvature must be > 0");
    }
  }
  static void validate(const LogisticModel& m) {
    if (m.features == 0 || m.classes < 2) throw ParameterError("logistic task: need features >= 1, classes >= 2");
  }
  static void validate(const MlpModel& m) {
    if (m.features == 0 || m.hidden == 0 || m.classes < 2) {
      throw ParameterError("mlp task: need features, hidden >= 1 and classes >= 2");
    }
  }

  Model model_;
  double weight_decay_ = 0.0;
};

struct GradSample {
  ParamVector grad;
  double loss = 0.0;
  std::vector<std::size_t> batch_indices;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

namespace detail {

inline void check_dims(const Task& task, const Dataset& data, std::span<const double> x) {
  if (x.size() != task.dim()) {
    throw StructuralError("task: parameter length " + std::to_string(x.size()) + " != dim " +
                          std::to_string(task.dim()));
  }
  if (data.feature_dim() != task.input_dim()) {
    throw StructuralError("task: dataset feature width does not match the task");
  }
  if (task.kind() != TaskKind::Quadratic) {
    const std::size_t classes = task.kind() == TaskKind::LogisticRegression
                                    ? std::get<LogisticModel>(task.model()).classes
                                    : std::get<MlpModel>(task.model()).classes;
    if (data.num_classes() > classes) throw StructuralError("task: dataset has more classes than the model");
  }
}

// Softmax cross-entropy on logits in place: logits become softmax - onehot.
// Returns -log softmax_y and reports the argmax.
inline double softmax_xent_residual(std::span<double> logits, int label, std::size_t& argmax) {
  const auto top = std::max_element(logits.begin(), logits.end());
  argmax = static_cast<std::size_t>(top - logits.begin());
  const double m = *top;
  double z = 0.0;
  for (double& l : logits) {
    l = std::exp(l - m);
    z += l;
  }
  const auto y = static_cast<std::size_t>(label);
  const double loss = std::log(z) - std::log(logits[y]);
  for (double& l : logits) l /= z;
  logits[y] -= 1.0;
  return loss;
}

struct Accumulated {
  double loss_sum = 0.0;
  std::size_t correct = 0;
};

// Adds per-sample gradients into grad (if non-empty) for the given rows.
template <typename Rows>
Accumulated accumulate(const QuadraticModel& m, const Dataset& data, std::span<const double> x,
                       const Rows& rows, std::span<double> grad) {
  Accumulated acc;
  const std::size_t d = m.curvature.size();
  for (std::size_t i : rows) {
    const auto z = data.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      const double r = x[j] - z[j];
      acc.loss_sum += 0.5 * m.curvature[j] * r * r;
      if (!grad.empty()) grad[j] += m.curvature[j] * r;
    }
  }
  return acc;
}

template <typename Rows>
Accumulated accumulate(const LogisticModel& m, const Dataset& data, std::span<const double> x,
                       const Rows& rows, std::span<double> grad) {
  Accumulated acc;
  const std::size_t p = m.features;
  const std::size_t c = m.classes;
  const double* w = x.data();
  const double* b = x.data() + c * p;
  std::vector<double> logits(c);
  for (std::size_t i : rows) {
    const auto z = data.row(i);
    for (std::size_t k = 0; k < c; ++k) {
      double s = b[k];
      const double* wk = w + k * p;
      for (std::size_t j = 0; j < p; ++j) s += wk[j] * z[j];
      logits[k] = s;
    }
    const int y = data.label(i);
    std::size_t argmax = 0;
    acc.loss_sum += softmax_xent_residual(logits, y, argmax);
    if (argmax == static_cast<std::size_t>(y)) ++acc.correct;
    if (grad.empty()) continue;
    double* gw = grad.data();
    double* gb = grad.data() + c * p;
    for (std::size_t k = 0; k < c; ++k) {
      const double r = logits[k];
      double* gwk = gw + k * p;
      for (std::size_t j = 0; j < p; ++j) gwk[j] += r * z[j];
      gb[k] += r;
    }
  }
  return acc;
}

template <typename Rows>
Accumulated accumulate(const MlpModel& m, const Dataset& data, std::span<const double> x,
                       const Rows& rows, std::span<double> grad) {
  Accumulated acc;
  const std::size_t p = m.features;
  const std::size_t h = m.hidden;
  const std::size_t c = m.classes;
  const double* w1 = x.data();
  const double* b1 = w1 + h * p;
  const double* w2 = b1 + h;
  const double* b2 = w2 + c * h;
  std::vector<double> act(h);
  std::vector<double> logits(c);
  std::vector<double> delta(h);
  for (std::size_t i : rows) {
    const auto z = data.row(i);
    for (std::size_t u = 0; u < h; ++u) {
      double s = b1[u];
      const double* wu = w1 + u * p;
      for (std::size_t j = 0; j < p; ++j) s += wu[j] * z[j];
      act[u] = std::tanh(s);
    }
    for (std::size_t k = 0; k < c; ++k) {
      double s = b2[k];
      const double* wk = w2 + k * h;
      for (std::size_t u = 0; u < h; ++u) s += wk[u] * act[u];
      logits[k] = s;
    }
    const int y = data.label(i);
    std::size_t argmax = 0;
    acc.loss_sum += softmax_xent_residual(logits, y, argmax);
    if (argmax == static_cast<std::size_t>(y)) ++acc.correct;
    if (grad.empty()) continue;
    double* gw1 = grad.data();
    double* gb1 = gw1 + h * p;
    double* gw2 = gb1 + h;
    double* gb2 = gw2 + c * h;
    std::fill(delta.begin(), delta.end(), 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      const double r = logits[k];
      const double* wk = w2 + k * h;
      double* gwk = gw2 + k * h;
      for (std::size_t u = 0; u < h; ++u) {
        gwk[u] += r * act[u];
        delta[u] += wk[u] * r;
      }
      gb2[k] += r;
    }
    for (std::size_t u = 0; u < h; ++u) {
      const double du = delta[u] * (1.0 - act[u] * act[u]);
      double* gwu = gw1 + u * p;
      for (std::size_t j = 0; j < p; ++j) gwu[j] += du * z[j];
      gb1[u] += du;
    }
  }
  return acc;
}

struct IndexRange {
  std::size_t n;
  struct iterator {
    std::size_t i;
    std::size_t operator*() const { return i; }
    iterator& operator++() {
      ++i;
      return *this;
    }
    bool operator!=(const iterator& o) const { return i != o.i; }
  };
  iterator begin() const { return {0}; }
  iterator end() const { return {n}; }
};

// Mean loss (without weight decay) and mean gradient (with weight decay) over rows.
template <typename Rows>
Accumulated mean_loss_grad(const Task& task, const Dataset& data, std::span<const double> x,
                           const Rows& rows, std::size_t count, std::span<double> grad) {
  if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  Accumulated acc = std::visit(
      [&](const auto& m) { return accumulate(m, data, x, rows, grad); }, task.model());
  if (!grad.empty()) {
    const auto denom = static_cast<double>(count);
    const double lambda = task.weight_decay();
    for (std::size_t j = 0; j < grad.size(); ++j) grad[j] = grad[j] / denom + lambda * x[j];
  }
  return acc;
}

}  // namespace detail

// Exact gradient of the client objective, weight-decay term included.
inline ParamVector full_gradient(const Task& task, const Dataset& data, const ParamVector& x) {
  detail::check_dims(task, data, x.span());
  if (data.empty()) throw StructuralError("full_gradient: empty dataset");
  ParamVector g(task.dim());
  detail::mean_loss_grad(task, data, x.span(), detail::IndexRange{data.size()}, data.size(), g.span());
  return g;
}

// Mean loss and exact gradient in one pass.
inline GradSample full_loss_gradient(const Task& task, const Dataset& data, const ParamVector& x) {
  detail::check_dims(task, data, x.span());
  if (data.empty()) throw StructuralError("full_loss_gradient: empty dataset");
  GradSample out;
  out.grad = ParamVector(task.dim());
  const auto acc = detail::mean_loss_grad(task, data, x.span(), detail::IndexRange{data.size()}, data.size(),
                                          out.grad.span());
  out.loss = acc.loss_sum / static_cast<double>(data.size());
  return out;
}

// Minibatch gradient over batch_size rows drawn without replacement. A full
// batch uses rows in natural order and no randomness, so it equals
// full_gradient bit for bit.
inline GradSample stochastic_gradient(const Task& task, const Dataset& data, const ParamVector& x,
                                      std::size_t batch_size, RngStream& rng) {
  detail::check_dims(task, data, x.span());
  if (data.empty()) throw StructuralError("stochastic_gradient: empty dataset");
  if (batch_size < 1 || batch_size > data.size()) {
    throw ParameterError("stochastic_gradient: batch size must be in [1, n]");
  }
  GradSample out;
  out.grad = ParamVector(task.dim());
  if (batch_size == data.size()) {
    out.batch_indices.resize(data.size());
    std::iota(out.batch_indices.begin(), out.batch_indices.end(), std::size_t{0});
  } else {
    out.batch_indices = sample_without_replacement(rng, data.size(), batch_size);
  }
  const auto acc = detail::mean_loss_grad(task, data, x.span(), out.batch_indices, batch_size,
                                          out.grad.span());
  out.loss = acc.loss_sum / static_cast<double>(batch_size);
  return out;
}

// Mean loss (weight decay excluded) and argmax accuracy; accuracy is 0 for
// quadratic tasks.
inline Evaluation evaluate(const Task& task, const Dataset& data, const ParamVector& x) {
  detail::check_dims(task, data, x.span());
  if (data.empty()) return {};
  const auto acc = detail::mean_loss_grad(task, data, x.span(), detail::IndexRange{data.size()},
                                          data.size(), std::span<double>{});
  Evaluation ev;
  ev.loss = acc.loss_sum / static_cast<double>(data.size());
  ev.accuracy = task.kind() == TaskKind::Quadratic
                    ? 0.0
                    : static_cast<double>(acc.correct) / static_cast<double>(data.size());
  return ev;
}

// Initial iterate: zeros for convex tasks, small uniform weights for the MLP
// (a zero MLP sits on a saddle).
inline ParamVector initial_params(const Task& task, RngStream& rng, double scale = 0.1) {
  ParamVector x(task.dim());
  if (const auto* m = std::get_if<MlpModel>(&task.model())) {
    const double w1 = scale / std::sqrt(static_cast<double>(m->features));
    const double w2 = scale / std::sqrt(static_cast<double>(m->hidden));
    const std::size_t n1 = m->hidden * m->features;
    const std::size_t off2 = n1 + m->hidden;
    for (std::size_t j = 0; j < n1; ++j) x[j] = rng.uniform(-w1, w1) * std::sqrt(3.0);
    for (std::size_t j = 0; j < m->classes * m->hidden; ++j) {
      x[off2 + j] = rng.uniform(-w2, w2) * std::sqrt(3.0);
    }
  }
  return x;
}

// Variance E||g - grad f||^2 of a size-b minibatch gradient of a quadratic
// task, sampling without replacement (finite-population correction).
inline double quadratic_minibatch_variance(const Task& task, const Dataset& data,
                                           std::size_t batch_size) {
  const auto& q = std::get<QuadraticModel>(task.model());
  const std::size_t n = data.size();
  if (batch_size >= n || n < 2) return 0.0;
  const std::size_t d = q.curvature.size();
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto z = data.row(i);
    for (std::size_t j = 0; j < d; ++j) mean[j] += z[j];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  double total = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = data.row(i)[j] - mean[j];
      var += r * r;
    }
    var /= static_cast<double>(n);
    total += q.curvature[j] * q.curvature[j] * var;
  }
  const auto b = static_cast<double>(batch_size);
  const auto nn = static_cast<double>(n);
  return total / b * (nn - b) / (nn - 1.0);
}

inline ParamVector row_mean(const Dataset& data) {
  ParamVector m(data.feature_dim());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto z = data.row(i);
    for (std::size_t j = 0; j < m.size(); ++j) m[j] += z[j];
  }
  for (double& v : m) v /= static_cast<double>(data.size());
  return m;
}

// ---------------------------------------------------------------------------
// Synthetic federated quadratic family with a closed-form global optimum.

struct QuadraticFamilySpec {
  std::size_t samples_per_client = 50;
  double noise = 1.0;           // std of sample points around the client optimum
  double curvature_min = 1.0;   // per-coordinate curvature ~ U[min, max]
  double curvature_max = 1.0;
  bool shared_curvature = false;  // one curvature draw for every client
  bool unbalanced = false;        // p_i ~ U[0.5, 1.5], normalized
  double weight_decay = 0.0;
};

struct FederatedQuadratic {
  std::vector<Task> tasks;
  std::vector<Dataset> data;
  std::vector<double> weights;
  std::vector<ParamVector> centers;
  ParamVector optimum;
  double smoothness = 0.0;
};

// x* = (sum_i p_i A_i + lambda)^-1 sum_i p_i A_i c_i for diagonal A_i.
inline ParamVector quadratic_optimum(std::span<const Task> tasks, std::span<const ParamVector> centers,
                                     std::span<const double> weights) {
  if (tasks.empty() || tasks.size() != centers.size() || tasks.size() != weights.size()) {
    throw StructuralError("quadratic_optimum: inconsistent client lists");
  }
  const std::size_t d = tasks.front().dim();
  ParamVector num(d);
  ParamVector den(d);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& a = std::get<QuadraticModel>(tasks[i].model()).curvature;
    for (std::size_t j = 0; j < d; ++j) {
      num[j] += weights[i] * a[j] * centers[i][j];
      den[j] += weights[i] * (a[j] + tasks[i].weight_decay());
    }
  }
  for (std::size_t j = 0; j < d; ++j) num[j] /= den[j];
  return num;
}

inline FederatedQuadratic make_synthetic_federated_quadratic(std::size_t clients, std::size_t dim,
                                                             double heterogeneity, RngStream& rng,
                                                             const QuadraticFamilySpec& spec = {}) {
  if (clients < 1 || dim < 1) throw ParameterError("federated quadratic: need N >= 1, d >= 1");
  if (!(heterogeneity >= 0.0)) throw ParameterError("federated quadratic: heterogeneity must be >= 0");
  if (spec.samples_per_client < 1) throw ParameterError("federated quadratic: need samples >= 1");
  if (!(spec.curvature_min > 0.0) || spec.curvature_max < spec.curvature_min) {
    throw ParameterError("federated quadratic: bad curvature range");
  }
  FederatedQuadratic out;
  ParamVector base(dim);
  for (double& v : base) v = rng.normal();

  std::vector<double> shared(dim);
  for (double& a : shared) a = rng.uniform(spec.curvature_min, spec.curvature_max);

  double weight_total = 0.0;
  for (std::size_t i = 0; i < clients; ++i) {
    std::vector<double> curv = shared;
    if (!spec.shared_curvature) {
      for (double& a : curv) a = rng.uniform(spec.curvature_min, spec.curvature_max);
    }
    ParamVector center(base);
    if (heterogeneity > 0.0) {
      for (double& v : center) v += heterogeneity * rng.normal();
    }
    const std::size_t n = spec.samples_per_client;
    std::vector<double> points(n * dim);
    std::vector<double> mean(dim, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t j = 0; j < dim; ++j) {
        const double v = spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0;
        points[s * dim + j] = v;
        mean[j] += v;
      }
    }
    for (double& m : mean) m /= static_cast<double>(n);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t j = 0; j < dim; ++j) points[s * dim + j] += center[j] - mean[j];
    }
    Dataset data(dim, 1, std::move(points), std::vector<int>(n, 0));
    out.centers.push_back(spec.noise > 0.0 ? row_mean(data) : center);
    out.data.push_back(std::move(data));
    out.tasks.push_back(Task::quadratic(std::move(curv), spec.weight_decay));
    const double w = spec.unbalanced ? rng.uniform(0.5, 1.5) : 1.0;
    out.weights.push_back(w);
    weight_total += w;
  }
  for (double& w : out.weights) w /= weight_total;
  out.optimum = quadratic_optimum(out.tasks, out.centers, out.weights);
  for (const auto& t : out.tasks) out.smoothness = std::max(out.smoothness, t.quadratic_smoothness());
  return out;
}

}  // namespace fedopt
