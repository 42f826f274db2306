#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "fedopt/error.hpp"

namespace fedopt {

// Flat vector of model coordinates. Shared shape for iterates, momenta and
// server pseudo-gradients.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::size_t dim, double fill = 0.0) : values_(dim, fill) {}
  ParamVector(std::initializer_list<double> init) : values_(init) {}
  explicit ParamVector(std::vector<double> values) : values_(std::move(values)) {}

  static ParamVector zeros(std::size_t dim) { return ParamVector(dim, 0.0); }
  static ParamVector ones(std::size_t dim) { return ParamVector(dim, 1.0); }

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double& operator[](std::size_t j) { return values_[j]; }
  double operator[](std::size_t j) const { return values_[j]; }

  std::span<double> span() noexcept { return values_; }
  std::span<const double> span() const noexcept { return values_; }
  const std::vector<double>& values() const noexcept { return values_; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  bool all_finite() const noexcept {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const ParamVector&, const ParamVector&) = default;

 private:
  std::vector<double> values_;
};

enum class ElementOp { Add, Sub, Mul, Div, Max };

namespace detail {

inline void require_same_length(std::size_t a, std::size_t b, const char* where) {
  if (a != b) {
    throw StructuralError(std::string(where) + ": length mismatch (" + std::to_string(a) +
                          " vs " + std::to_string(b) + ")");
  }
}

inline void require_finite(const ParamVector& v, const char* where) {
  if (!v.all_finite()) throw NumericError(std::string(where) + ": non-finite result");
}

}  // namespace detail

inline ParamVector elementwise(const ParamVector& a, const ParamVector& b, ElementOp op) {
  detail::require_same_length(a.size(), b.size(), "elementwise");
  ParamVector out(a.size());
  for (std::size_t j = 0; j < a.size(); ++j) {
    switch (op) {
      case ElementOp::Add: out[j] = a[j] + b[j]; break;
      case ElementOp::Sub: out[j] = a[j] - b[j]; break;
      case ElementOp::Mul: out[j] = a[j] * b[j]; break;
      case ElementOp::Div:
        if (b[j] == 0.0) throw NumericError("elementwise: division by zero entry");
        out[j] = a[j] / b[j];
        break;
      case ElementOp::Max: out[j] = std::max(a[j], b[j]); break;
    }
  }
  detail::require_finite(out, "elementwise");
  return out;
}

// alpha * x + y
inline ParamVector axpy(double alpha, const ParamVector& x, const ParamVector& y) {
  detail::require_same_length(x.size(), y.size(), "axpy");
  ParamVector out(y);
  for (std::size_t j = 0; j < x.size(); ++j) out[j] += alpha * x[j];
  detail::require_finite(out, "axpy");
  return out;
}

inline ParamVector scale(double alpha, const ParamVector& x) {
  ParamVector out(x);
  for (double& v : out) v *= alpha;
  detail::require_finite(out, "scale");
  return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  detail::require_same_length(a.size(), b.size(), "dot");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) s += a[j] * b[j];
  return s;
}

inline double dot(const ParamVector& a, const ParamVector& b) { return dot(a.span(), b.span()); }

inline double l2_norm_sq(std::span<const double> x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return s;
}

inline double l2_norm_sq(const ParamVector& x) { return l2_norm_sq(x.span()); }

inline double l2_dist_sq(std::span<const double> a, std::span<const double> b) {
  detail::require_same_length(a.size(), b.size(), "l2_dist_sq");
  double s = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = a[j] - b[j];
    s += d * d;
  }
  return s;
}

inline double l2_dist_sq(const ParamVector& a, const ParamVector& b) {
  return l2_dist_sq(a.span(), b.span());
}

// Pairwise (cascade) sum of vectors in the given order. The summation tree
// depends only on the count, so the result is independent of which thread
// produced each term.
inline ParamVector pairwise_sum(std::span<const ParamVector> terms) {
  if (terms.empty()) throw StructuralError("pairwise_sum: no terms");
  const std::size_t dim = terms.front().size();
  for (const auto& t : terms) detail::require_same_length(t.size(), dim, "pairwise_sum");
  if (terms.size() == 1) return terms.front();
  if (terms.size() == 2) {
    ParamVector out(terms[0]);
    for (std::size_t j = 0; j < dim; ++j) out[j] += terms[1][j];
    return out;
  }
  const std::size_t half = terms.size() / 2;
  ParamVector left = pairwise_sum(terms.subspan(0, half));
  const ParamVector right = pairwise_sum(terms.subspan(half));
  for (std::size_t j = 0; j < dim; ++j) left[j] += right[j];
  return left;
}

inline ParamVector pairwise_mean(std::span<const ParamVector> terms) {
  ParamVector sum = pairwise_sum(terms);
  const auto count = static_cast<double>(terms.size());
  for (double& v : sum) v /= count;
  return sum;
}

}  // namespace fedopt
