#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <vector>

#include "fedopt/partition.hpp"

using namespace fedopt;

namespace {

// n rows, label = position mod C (or a random label), feature = row id.
Dataset labelled(std::size_t n, std::size_t classes, RngStream* rng = nullptr) {
  std::vector<double> f(n);
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    f[i] = static_cast<double>(i);
    y[i] = static_cast<int>(rng != nullptr ? rng->uniform_index(classes) : i % classes);
  }
  return Dataset(1, classes, std::move(f), std::move(y));
}

std::vector<double> global_prior(const Dataset& d) {
  std::vector<double> p;
  for (auto c : d.class_counts()) p.push_back(static_cast<double>(c) / static_cast<double>(d.size()));
  return p;
}

void expect_disjoint_cover(const Dataset& data, const std::vector<ClientShard>& shards, std::size_t clients) {
  std::multiset<std::size_t> seen;
  for (const auto& s : shards) {
    ASSERT_EQ(s.source_indices.size(), s.data.size());
    for (std::size_t r = 0; r < s.data.size(); ++r) {
      // the feature carries the original row id, so rows and indices must agree
      ASSERT_EQ(s.data.row(r)[0], static_cast<double>(s.source_indices[r]));
      ASSERT_EQ(s.data.label(r), data.label(s.source_indices[r]));
      seen.insert(s.source_indices[r]);
    }
  }
  std::set<std::size_t> uniq(seen.begin(), seen.end());
  EXPECT_EQ(uniq.size(), seen.size()) << "a row was assigned twice";
  EXPECT_LT(data.size() - seen.size(), clients) << "remainder must be < N";
}

double weight_sum(const std::vector<ClientShard>& shards) {
  double s = 0.0;
  for (const auto& c : shards) s += c.weight;
  return s;
}

PartitionSpec dirichlet(std::size_t clients, double alpha) {
  PartitionSpec spec;
  spec.scheme = PartitionScheme::Dirichlet;
  spec.clients = clients;
  spec.alpha = alpha;
  return spec;
}

}  // namespace

TEST(Partition, UniformSplitsEvenly) {
  const auto data = labelled(100, 10);
  PartitionSpec spec;
  spec.clients = 4;
  RngStream rng(40, 0);
  const auto shards = partition(data, spec, rng);
  ASSERT_EQ(shards.size(), 4u);
  for (const auto& s : shards) {
    EXPECT_EQ(s.data.size(), 25u);
    EXPECT_EQ(s.weight, 0.25);
  }
  expect_disjoint_cover(data, shards, 4);
}

TEST(Partition, UniformRowsFollowTheGlobalPrior) {
  const auto data = labelled(400, 5);  // 80 rows per label
  PartitionSpec spec;
  spec.clients = 8;
  RngStream rng(40, 1);
  const auto shards = partition(data, spec, rng);
  const auto h = empirical_label_histogram(shards);
  for (const auto& row : h.rows) {
    for (std::size_t k = 0; k < row.size(); ++k) EXPECT_EQ(row[k], 0.2);
  }
  RngStream label_rng(40, 2);
  const auto uneven = labelled(1001, 7, &label_rng);
  spec.clients = 9;
  const auto shards2 = partition(uneven, spec, rng);
  const auto prior = global_prior(uneven);
  for (const auto& s : shards2) {
    ASSERT_EQ(s.data.size(), 111u);
    const auto counts = s.data.class_counts();
    for (std::size_t k = 0; k < counts.size(); ++k) {
      // one row from the round-robin split, one from the dropped remainder
      EXPECT_LE(std::abs(static_cast<double>(counts[k]) - prior[k] * 111.0), 2.0);
    }
  }
  expect_disjoint_cover(uneven, shards2, 9);
}

TEST(Partition, SortAndPartitionLimitsLabelsPerClient) {
  RngStream label_rng(41, 0);
  const auto data = labelled(6000, 10, &label_rng);
  for (std::size_t clients : {5u, 10u, 37u, 100u}) {
    PartitionSpec spec;
    spec.scheme = PartitionScheme::SortAndPartition;
    spec.clients = clients;
    spec.classes_per_client = 2;
    RngStream rng(41, clients);
    const auto shards = partition(data, spec, rng);
    const auto h = empirical_label_histogram(shards);
    for (const auto& row : h.rows) {
      EXPECT_LE(std::count_if(row.begin(), row.end(), [](double v) { return v > 0.0; }), 2);
    }
    expect_disjoint_cover(data, shards, clients);
    std::size_t covered = 0;
    for (const auto& s : shards) covered += s.data.size();
    EXPECT_EQ(covered, data.size());
  }
}

TEST(Partition, LargeAlphaMatchesGlobalPrior) {
  RngStream label_rng(42, 0);
  const auto data = labelled(20000, 10, &label_rng);
  const auto prior = global_prior(data);
  RngStream rng(42, 1);
  const auto shards = partition(data, dirichlet(40, 1e6), rng);
  const auto h = empirical_label_histogram(shards);
  std::size_t close = 0;
  for (const auto& row : h.rows) {
    double tv = 0.0;
    for (std::size_t k = 0; k < row.size(); ++k) tv += std::abs(row[k] - prior[k]);
    if (0.5 * tv <= 0.05) ++close;
  }
  EXPECT_GE(static_cast<double>(close), 0.95 * static_cast<double>(shards.size()));
}

TEST(Partition, DirichletIsDisjointWithExactQuotas) {
  RngStream label_rng(43, 0);
  const auto data = labelled(1003, 10, &label_rng);
  for (double alpha : {0.01, 0.1, 1.0, 10.0}) {
    RngStream rng(43, static_cast<std::uint64_t>(alpha * 1000));
    const auto shards = partition(data, dirichlet(10, alpha), rng);
    for (const auto& s : shards) EXPECT_EQ(s.data.size(), 100u);
    expect_disjoint_cover(data, shards, 10);
    EXPECT_NEAR(weight_sum(shards), 1.0, 1e-12);
  }
}

TEST(Partition, WeightsSumToOneAndTrackSizes) {
  RngStream label_rng(44, 0);
  const auto data = labelled(997, 7, &label_rng);
  for (auto balance : {WeightBalance::Equal, WeightBalance::Proportional}) {
    for (std::size_t clients : {1u, 3u, 13u, 50u}) {
      PartitionSpec spec;
      spec.scheme = PartitionScheme::SortAndPartition;
      spec.clients = clients;
      spec.classes_per_client = clients * 3 >= 7 ? 3 : 7;
      spec.balance = balance;
      RngStream rng(44, clients);
      const auto shards = partition(data, spec, rng);
      EXPECT_NEAR(weight_sum(shards), 1.0, 1e-12);
      std::size_t total = 0;
      for (const auto& s : shards) total += s.data.size();
      for (const auto& s : shards) {
        EXPECT_GT(s.weight, 0.0);
        const double expected = balance == WeightBalance::Equal
                                    ? 1.0 / static_cast<double>(clients)
                                    : static_cast<double>(s.data.size()) / static_cast<double>(total);
        EXPECT_EQ(s.weight, expected);
      }
    }
  }
}

TEST(Partition, LabelGroupsKeepMassInsideGroups) {
  // Tiny alpha puts (nearly) all of a client's mass on one group, and the
  // mix is uniform inside a group.
  const auto data = labelled(10000, 100);
  PartitionSpec spec = dirichlet(10, 1e-3);
  spec.label_groups = 10;
  RngStream rng(45, 0);
  const auto shards = partition(data, spec, rng);
  std::size_t single_group = 0;
  for (const auto& s : shards) {
    std::set<int> groups;
    for (int y : s.data.labels()) groups.insert(y / 10);
    if (groups.size() == 1) ++single_group;
  }
  EXPECT_GE(single_group, 8u);
}

TEST(Partition, InfeasibleSpecsThrow) {
  const auto data = labelled(10, 5);
  PartitionSpec spec;
  spec.clients = 11;
  RngStream rng(46, 0);
  EXPECT_THROW(partition(data, spec, rng), ParameterError);
  spec.clients = 0;
  EXPECT_THROW(partition(data, spec, rng), ParameterError);
  EXPECT_THROW(partition(data, dirichlet(2, 0.0), rng), ParameterError);
  EXPECT_THROW(partition(data, dirichlet(2, -1.0), rng), ParameterError);
  PartitionSpec sp;
  sp.scheme = PartitionScheme::SortAndPartition;
  sp.clients = 2;
  sp.classes_per_client = 0;
  EXPECT_THROW(partition(data, sp, rng), ParameterError);
  sp.classes_per_client = 6;
  EXPECT_THROW(partition(data, sp, rng), ParameterError);
  sp.classes_per_client = 2;  // 4 blocks cannot hold 5 labels
  EXPECT_THROW(partition(data, sp, rng), ParameterError);
}

TEST(Histogram, SingleClientEqualsGlobal) {
  RngStream label_rng(47, 0);
  const auto data = labelled(500, 6, &label_rng);
  RngStream rng(47, 1);
  for (const auto& spec : {PartitionSpec{}, dirichlet(1, 0.1)}) {
    const auto shards = partition(data, spec, rng);
    const auto h = empirical_label_histogram(shards);
    ASSERT_EQ(h.rows.size(), 1u);
    const auto prior = global_prior(data);
    for (std::size_t k = 0; k < prior.size(); ++k) EXPECT_DOUBLE_EQ(h.rows[0][k], prior[k]);
  }
}

TEST(Histogram, RowsSumToOneAndEmptyRowsAreFlagged) {
  std::vector<ClientShard> shards(3);
  shards[0].data = Dataset(1, 3, {0, 0, 0, 0}, {0, 1, 1, 2});
  shards[2].data = Dataset(1, 3, {0}, {2});
  const auto h = empirical_label_histogram(shards);
  EXPECT_EQ(h.rows[0], (std::vector<double>{0.25, 0.5, 0.25}));
  EXPECT_EQ(h.rows[1], (std::vector<double>{0.0, 0.0, 0.0}));
  EXPECT_EQ(h.rows[2], (std::vector<double>{0.0, 0.0, 1.0}));
  EXPECT_EQ(h.empty_rows, (std::vector<bool>{false, true, false}));
  EXPECT_EQ(h.counts[0], (std::vector<std::size_t>{1, 2, 1}));
  EXPECT_NEAR(mean_label_entropy(h), 0.5 * (std::log(4.0) - 0.5 * std::log(2.0)), 1e-15);
}

TEST(Histogram, EntropyGrowsWithAlpha) {
  RngStream label_rng(48, 0);
  const auto data = labelled(2000, 10, &label_rng);
  const std::vector<double> grid{0.05, 0.5, 1.0, 100.0};
  std::vector<double> mean(grid.size(), 0.0);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    std::vector<double> e(grid.size());
    for (std::size_t a = 0; a < grid.size(); ++a) {
      RngStream rng(1000 + seed, a);
      e[a] = mean_label_entropy(empirical_label_histogram(partition(data, dirichlet(20, grid[a]), rng)));
      mean[a] += e[a] / 50.0;
    }
    EXPECT_LT(e[0], e[3]) << "seed " << seed;
  }
  for (std::size_t a = 0; a + 1 < grid.size(); ++a) EXPECT_LE(mean[a], mean[a + 1]);
}

TEST(Apportion, LargestRemainder) {
  EXPECT_EQ(apportion(std::vector<double>{1, 1, 1}, 10), (std::vector<std::size_t>{4, 3, 3}));
  EXPECT_EQ(apportion(std::vector<double>{0.5, 0.3, 0.2}, 7), (std::vector<std::size_t>{4, 2, 1}));
  EXPECT_EQ(apportion(std::vector<double>{0, 2, 0}, 5), (std::vector<std::size_t>{0, 5, 0}));
  EXPECT_EQ(apportion(std::vector<double>{0, 0}, 5), (std::vector<std::size_t>{0, 0}));
  RngStream rng(49, 0);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> shares(1 + rng.uniform_index(12));
    for (auto& s : shares) s = rng.uniform() < 0.2 ? 0.0 : rng.uniform();
    const std::size_t total = rng.uniform_index(1000);
    const auto out = apportion(shares, total);
    const double sum = std::accumulate(shares.begin(), shares.end(), 0.0);
    if (sum <= 0.0) continue;
    EXPECT_EQ(std::accumulate(out.begin(), out.end(), std::size_t{0}), total);
    for (std::size_t k = 0; k < shares.size(); ++k) {
      EXPECT_LT(std::abs(static_cast<double>(out[k]) - shares[k] / sum * static_cast<double>(total)), 1.0);
      if (shares[k] == 0.0) {
        EXPECT_EQ(out[k], 0u);
      }
    }
  }
}

TEST(Report, CsvHasCountsAndWeights) {
  std::vector<ClientShard> shards(2);
  shards[0].data = Dataset(1, 2, {0, 0, 0}, {0, 1, 1});
  shards[0].weight = 0.75;
  shards[1].data = Dataset(1, 2, {0}, {0});
  shards[1].weight = 0.25;
  EXPECT_EQ(partition_report_csv(shards), "client,n,class_0,class_1,weight\n0,3,1,2,0.75\n1,1,1,0,0.25\n");
}
