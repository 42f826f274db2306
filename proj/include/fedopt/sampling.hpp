#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <vector>

#include "fedopt/error.hpp"
#include "fedopt/random.hpp"

namespace fedopt {

enum class SamplingMode { WithReplacementByWeight, Full };

struct SamplingSpec {
  std::size_t clients_per_round = 1;  // S
  SamplingMode mode = SamplingMode::WithReplacementByWeight;
};

// S independent categorical draws over clients with probabilities p, returned
// in ascending client order (duplicates kept). Full mode returns 0..N-1.
inline std::vector<std::size_t> sample_round(std::span<const double> weights, const SamplingSpec& spec,
                                             RngStream& rng) {
  const std::size_t N = weights.size();
  if (N == 0) throw ParameterError("sample_round: no clients");
  double total = 0.0;
  for (double p : weights) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw ParameterError("sample_round: weights must be nonnegative");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-12) throw ParameterError("sample_round: weights must sum to 1");

  std::vector<std::size_t> out;
  if (spec.mode == SamplingMode::Full) {
    out.resize(N);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
  }
  if (spec.clients_per_round < 1) throw ParameterError("sample_round: S must be >= 1");
  std::vector<double> cumulative(N);
  std::partial_sum(weights.begin(), weights.end(), cumulative.begin());
  out.reserve(spec.clients_per_round);
  for (std::size_t s = 0; s < spec.clients_per_round; ++s) out.push_back(sample_categorical(rng, cumulative));
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace fedopt
