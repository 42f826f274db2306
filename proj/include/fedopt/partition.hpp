#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedopt/dataset.hpp"
#include "fedopt/error.hpp"
#include "fedopt/io.hpp"
#include "fedopt/numerics.hpp"
#include "fedopt/random.hpp"

namespace fedopt {

enum class PartitionScheme { Dirichlet, SortAndPartition, Uniform };
enum class WeightBalance { Equal, Proportional };

struct PartitionSpec {
  PartitionScheme scheme = PartitionScheme::Uniform;
  std::size_t clients = 1;
  double alpha = 1.0;                  // Dirichlet concentration
  std::size_t classes_per_client = 2;  // SortAndPartition
  // Dirichlet over contiguous label groups, uniform within a group. 0 = off.
  std::size_t label_groups = 0;
  WeightBalance balance = WeightBalance::Proportional;
};

struct ClientShard {
  Dataset data;
  double weight = 0.0;
  std::optional<ParamVector> control_variate;
  std::vector<std::size_t> source_indices;  // rows of the partitioned dataset
};

// Largest-remainder apportionment of `total` units over nonnegative shares.
// Ties go to the lower index.
inline std::vector<std::size_t> apportion(std::span<const double> shares, std::size_t total) {
  std::vector<std::size_t> out(shares.size(), 0);
  const double sum = std::accumulate(shares.begin(), shares.end(), 0.0);
  if (total == 0 || !(sum > 0.0)) return out;
  std::vector<double> rem(shares.size());
  std::size_t assigned = 0;
  for (std::size_t k = 0; k < shares.size(); ++k) {
    const double exact = shares[k] / sum * static_cast<double>(total);
    out[k] = static_cast<std::size_t>(std::floor(exact));
    rem[k] = exact - static_cast<double>(out[k]);
    assigned += out[k];
  }
  std::vector<std::size_t> order(shares.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b]; });
  for (std::size_t r = 0; assigned < total && r < order.size(); ++r) {
    if (shares[order[r]] > 0.0) {
      ++out[order[r]];
      ++assigned;
    }
  }
  // only reachable through floating-point shortfall
  for (std::size_t k = 0; assigned < total; k = (k + 1) % shares.size()) {
    if (shares[k] > 0.0) {
      ++out[k];
      ++assigned;
    }
  }
  return out;
}

namespace detail {

inline std::vector<std::vector<std::size_t>> class_pools(const Dataset& data, RngStream& rng) {
  std::vector<std::vector<std::size_t>> pools(data.num_classes());
  for (std::size_t i = 0; i < data.size(); ++i) pools[static_cast<std::size_t>(data.label(i))].push_back(i);
  for (auto& p : pools) shuffle(rng, p);
  return pools;
}

inline std::vector<double> dirichlet_class_mix(RngStream& rng, const PartitionSpec& spec,
                                               std::size_t classes) {
  if (spec.label_groups == 0) return sample_dirichlet(rng, spec.alpha, classes);
  const std::size_t groups = std::min(spec.label_groups, classes);
  const auto q = sample_dirichlet(rng, spec.alpha, groups);
  std::vector<std::size_t> group_size(groups, 0);
  for (std::size_t c = 0; c < classes; ++c) ++group_size[c * groups / classes];
  std::vector<double> mix(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    const std::size_t g = c * groups / classes;
    mix[c] = q[g] / static_cast<double>(group_size[g]);
  }
  return mix;
}

// Fill one client's quota with class proportions q. Exhausted classes hand
// their shortfall to the classes that still have data, proportionally to q.
inline std::vector<std::size_t> fill_quota(std::vector<std::vector<std::size_t>>& pools,
                                           std::vector<double> q, std::size_t quota) {
  std::vector<std::size_t> taken;
  std::size_t remaining = quota;
  while (remaining > 0) {
    for (std::size_t c = 0; c < q.size(); ++c) {
      if (pools[c].empty()) q[c] = 0.0;
    }
    if (std::accumulate(q.begin(), q.end(), 0.0) <= 0.0) {
      // the client's mix only covers exhausted classes: fall back to what is left
      bool any = false;
      for (std::size_t c = 0; c < q.size(); ++c) {
        q[c] = static_cast<double>(pools[c].size());
        any = any || !pools[c].empty();
      }
      if (!any) break;
    }
    const auto want = apportion(q, remaining);
    for (std::size_t c = 0; c < q.size(); ++c) {
      const std::size_t take = std::min(want[c], pools[c].size());
      for (std::size_t s = 0; s < take; ++s) {
        taken.push_back(pools[c].back());
        pools[c].pop_back();
      }
      remaining -= take;
    }
  }
  return taken;
}

}  // namespace detail

// Split `data` into spec.clients disjoint shards. Uniform and Dirichlet give
// every client floor(n / N) rows (the remainder is dropped); SortAndPartition
// covers every row. Uniform shards match the global label mix up to one row
// per label.
inline std::vector<ClientShard> partition(const Dataset& data, const PartitionSpec& spec, RngStream& rng) {
  const std::size_t n = data.size();
  const std::size_t N = spec.clients;
  if (N == 0) throw ParameterError("partition: need at least one client");
  if (n < N) throw ParameterError("partition: more clients than samples");

  std::vector<std::vector<std::size_t>> members(N);
  switch (spec.scheme) {
    case PartitionScheme::Uniform: {
      // label-stratified: deal each label's shuffled rows round-robin
      const auto pools = detail::class_pools(data, rng);
      const std::size_t used = n / N * N;
      std::size_t r = 0;
      for (const auto& pool : pools) {
        for (std::size_t row : pool) {
          if (r == used) break;
          members[r % N].push_back(row);
          ++r;
        }
      }
      break;
    }
    case PartitionScheme::Dirichlet: {
      if (!(spec.alpha > 0.0)) throw ParameterError("partition: Dirichlet alpha must be > 0");
      auto pools = detail::class_pools(data, rng);
      const std::size_t quota = n / N;
      for (std::size_t i = 0; i < N; ++i) {
        const auto q = detail::dirichlet_class_mix(rng, spec, data.num_classes());
        members[i] = detail::fill_quota(pools, q, quota);
      }
      break;
    }
    case PartitionScheme::SortAndPartition: {
      const std::size_t cpc = spec.classes_per_client;
      if (cpc < 1 || cpc > data.num_classes()) {
        throw ParameterError("partition: classes_per_client must be in [1, C]");
      }
      const auto counts = data.class_counts();
      std::vector<std::size_t> present;
      for (std::size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] > 0) present.push_back(c);
      }
      const std::size_t blocks = N * cpc;
      if (blocks < present.size()) {
        throw ParameterError("partition: clients x classes_per_client cannot cover every label");
      }
      if (blocks > n) throw ParameterError("partition: more label blocks than samples");
      // blocks per label: one each, the rest by label frequency, capped by count
      std::vector<std::size_t> per_label(counts.size(), 0);
      std::vector<double> spare(counts.size(), 0.0);
      for (std::size_t c : present) {
        per_label[c] = 1;
        spare[c] = static_cast<double>(counts[c] - 1);
      }
      std::size_t left = blocks - present.size();
      while (left > 0) {
        const auto extra = apportion(spare, left);
        for (std::size_t c : present) {
          const std::size_t add = std::min(extra[c], counts[c] - per_label[c]);
          per_label[c] += add;
          left -= add;
          spare[c] = static_cast<double>(counts[c] - per_label[c]);
        }
      }
      // stable sort by label, then cut each label's run into near-equal blocks
      std::vector<std::size_t> sorted(n);
      std::iota(sorted.begin(), sorted.end(), std::size_t{0});
      std::stable_sort(sorted.begin(), sorted.end(),
                       [&](std::size_t a, std::size_t b) { return data.label(a) < data.label(b); });
      std::vector<std::vector<std::size_t>> block_rows;
      std::size_t pos = 0;
      for (std::size_t c = 0; c < counts.size(); ++c) {
        for (std::size_t b = 0; b < per_label[c]; ++b) {
          const std::size_t size = counts[c] / per_label[c] + (b < counts[c] % per_label[c] ? 1 : 0);
          block_rows.emplace_back(sorted.begin() + pos, sorted.begin() + pos + size);
          pos += size;
        }
      }
      std::vector<std::size_t> order(block_rows.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      shuffle(rng, order);
      for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t b = 0; b < cpc; ++b) {
          const auto& rows = block_rows[order[i * cpc + b]];
          members[i].insert(members[i].end(), rows.begin(), rows.end());
        }
      }
      break;
    }
  }

  std::size_t total = 0;
  for (const auto& m : members) {
    if (m.empty()) throw ParameterError("partition: a client received no data");
    total += m.size();
  }
  std::vector<ClientShard> shards(N);
  for (std::size_t i = 0; i < N; ++i) {
    shards[i].data = data.subset(members[i]);
    shards[i].source_indices = std::move(members[i]);
    shards[i].weight = spec.balance == WeightBalance::Equal
                           ? 1.0 / static_cast<double>(N)
                           : static_cast<double>(shards[i].data.size()) / static_cast<double>(total);
  }
  return shards;
}

// Shards built from explicit per-client datasets and weights.
inline std::vector<ClientShard> shards_from(std::vector<Dataset> data, std::span<const double> weights) {
  if (data.size() != weights.size()) throw StructuralError("shards_from: data/weight count mismatch");
  std::vector<ClientShard> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    out[i].data = std::move(data[i]);
    out[i].weight = weights[i];
  }
  return out;
}

struct LabelHistogram {
  std::size_t classes = 0;
  std::vector<std::vector<double>> rows;           // normalized, N x C
  std::vector<std::vector<std::size_t>> counts;    // raw, N x C
  std::vector<bool> empty_rows;
};

inline LabelHistogram empirical_label_histogram(std::span<const ClientShard> shards) {
  LabelHistogram h;
  for (const auto& s : shards) h.classes = std::max(h.classes, s.data.num_classes());
  for (const auto& s : shards) {
    std::vector<std::size_t> c(h.classes, 0);
    for (int y : s.data.labels()) ++c[static_cast<std::size_t>(y)];
    std::vector<double> row(h.classes, 0.0);
    const bool empty = s.data.empty();
    if (!empty) {
      for (std::size_t k = 0; k < h.classes; ++k) {
        row[k] = static_cast<double>(c[k]) / static_cast<double>(s.data.size());
      }
    }
    h.rows.push_back(std::move(row));
    h.counts.push_back(std::move(c));
    h.empty_rows.push_back(empty);
  }
  return h;
}

// Shannon entropy in nats.
inline double label_entropy(std::span<const double> row) {
  double e = 0.0;
  for (double p : row) {
    if (p > 0.0) e -= p * std::log(p);
  }
  return e;
}

inline double mean_label_entropy(const LabelHistogram& h) {
  double s = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < h.rows.size(); ++i) {
    if (h.empty_rows[i]) continue;
    s += label_entropy(h.rows[i]);
    ++used;
  }
  return used == 0 ? 0.0 : s / static_cast<double>(used);
}

// client,n,class_0..class_{C-1},weight with per-client label counts.
inline std::string partition_report_csv(std::span<const ClientShard> shards) {
  const auto h = empirical_label_histogram(shards);
  std::string out = "client,n";
  for (std::size_t k = 0; k < h.classes; ++k) out += ",class_" + std::to_string(k);
  out += ",weight\n";
  for (std::size_t i = 0; i < shards.size(); ++i) {
    out += std::to_string(i) + "," + std::to_string(shards[i].data.size());
    for (std::size_t k = 0; k < h.classes; ++k) out += "," + std::to_string(h.counts[i][k]);
    out += "," + fmt17(shards[i].weight) + "\n";
  }
  return out;
}

}  // namespace fedopt
