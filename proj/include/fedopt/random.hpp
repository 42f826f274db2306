#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "fedopt/error.hpp"

namespace fedopt {

namespace detail {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

}  // namespace detail

// Counter-based stream: draw n is mix64(key + n * golden), where the key is a
// hash of (seed, stream_id). Two streams with equal (seed, stream_id) agree on
// every draw regardless of what other streams have been used for.
class RngStream {
 public:
  using result_type = std::uint64_t;

  RngStream(std::uint64_t seed, std::uint64_t stream_id) noexcept
      : seed_(seed),
        stream_id_(stream_id),
        key_(detail::mix64(detail::mix64(seed + detail::kGolden) ^
                           (stream_id * 0xD1B54A32D192ED03ULL + 0x2545F4914F6CDD1DULL))) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept { return std::numeric_limits<result_type>::max(); }

  result_type operator()() noexcept { return next(); }

  result_type next() noexcept {
    ++counter_;
    return detail::mix64(key_ + counter_ * detail::kGolden);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_id_; }
  std::uint64_t draws() const noexcept { return counter_; }

  // [0, 1)
  double uniform() noexcept { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  // (0, 1)
  double uniform_open() noexcept {
    return (static_cast<double>(next() >> 11) + 0.5) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n), Lemire's multiply-shift with rejection.
  std::uint64_t uniform_index(std::uint64_t n) {
    if (n == 0) throw ParameterError("uniform_index: empty range");
    unsigned __int128 m = static_cast<unsigned __int128>(next()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  // Box-Muller, one output per pair of uniforms.
  double normal() noexcept {
    const double u1 = uniform_open();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  // log of a Gamma(shape, 1) variate (Marsaglia-Tsang). Working in log space
  // keeps tiny shapes from underflowing to an all-zero Dirichlet draw.
  double log_gamma_variate(double shape) {
    if (!(shape > 0.0)) throw ParameterError("gamma: shape must be positive");
    if (shape < 1.0) {
      // G(a) = G(a + 1) * U^(1/a)
      return log_gamma_variate(shape + 1.0) + std::log(uniform_open()) / shape;
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double z = 0.0;
      double v = 0.0;
      do {
        z = normal();
        v = 1.0 + c * z;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform_open();
      if (u < 1.0 - 0.0331 * z * z * z * z) return std::log(d * v);
      if (std::log(u) < 0.5 * z * z + d * (1.0 - v + std::log(v))) return std::log(d * v);
    }
  }

  double gamma(double shape) { return std::exp(log_gamma_variate(shape)); }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_id_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// What a stream is used for; folded into the stream id so different roles
// never share draws.
enum class StreamRole : std::uint64_t {
  Server = 1,
  ClientLocal = 2,
  Partition = 3,
  Init = 4,
  Data = 5,
  Probe = 6,
  Order = 7,
};

constexpr std::uint64_t derive_stream_id(StreamRole role, std::uint64_t round = 0,
                                         std::uint64_t slot = 0) noexcept {
  std::uint64_t h = detail::mix64(static_cast<std::uint64_t>(role) * detail::kGolden);
  h = detail::mix64(h ^ (round + 0x632BE59BD9B4E019ULL));
  h = detail::mix64(h ^ (slot + 0x8CB92BA72F3D8DD7ULL));
  return h;
}

inline RngStream make_stream(std::uint64_t seed, StreamRole role, std::uint64_t round = 0,
                             std::uint64_t slot = 0) noexcept {
  return RngStream(seed, derive_stream_id(role, round, slot));
}

// Draw from Dir(alpha * 1_dim) as normalized Gamma variates.
inline std::vector<double> sample_dirichlet(RngStream& rng, double alpha, std::size_t dim) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) {
    throw ParameterError("sample_dirichlet: alpha must be positive and finite");
  }
  if (dim == 0) throw ParameterError("sample_dirichlet: dim must be >= 1");
  if (dim == 1) return {1.0};
  std::vector<double> logs(dim);
  for (auto& l : logs) l = rng.log_gamma_variate(alpha);
  const double top = *std::max_element(logs.begin(), logs.end());
  double total = 0.0;
  for (auto& l : logs) {
    l = std::exp(l - top);
    total += l;
  }
  for (auto& l : logs) l /= total;
  return logs;
}

// Index drawn with probability proportional to weights (need not be normalized).
inline std::size_t sample_categorical(RngStream& rng, std::span<const double> cumulative) {
  const double total = cumulative.back();
  const double u = rng.uniform() * total;
  auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  if (it == cumulative.end()) --it;
  return static_cast<std::size_t>(it - cumulative.begin());
}

// k distinct indices from [0, n) in draw order (partial Fisher-Yates for
// dense draws, rejection for sparse ones).
inline std::vector<std::size_t> sample_without_replacement(RngStream& rng, std::size_t n,
                                                           std::size_t k) {
  if (k > n) throw ParameterError("sample_without_replacement: k > n");
  std::vector<std::size_t> out;
  out.reserve(k);
  if (k * 8 >= n) {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      const std::size_t j = i + rng.uniform_index(n - i);
      std::swap(pool[i], pool[j]);
      out.push_back(pool[i]);
    }
    return out;
  }
  while (out.size() < k) {
    const std::size_t cand = rng.uniform_index(n);
    if (std::find(out.begin(), out.end(), cand) == out.end()) out.push_back(cand);
  }
  return out;
}

template <typename T>
void shuffle(RngStream& rng, std::vector<T>& items) {
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_index(i);
    std::swap(items[i - 1], items[j]);
  }
}

}  // namespace fedopt
