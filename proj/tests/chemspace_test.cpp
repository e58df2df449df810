// SPDX-License-Identifier: Apache-2.0
#include "molda/chemspace.hpp"

#include <gtest/gtest.h>

#include <set>

#include "reference.hpp"

namespace molda {
namespace {

using reference::random_fps;
using reference::reference_butina;

void expect_partition(const Clustering& c, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& cl : c.clusters)
    for (auto i : cl) ++seen[i];
  for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(seen[i], 1) << i;
}

Clustering sized_clusters(std::initializer_list<std::size_t> sizes) {
  Clustering c;
  std::size_t next = 0;
  for (auto s : sizes) {
    std::vector<std::size_t> cl;
    for (std::size_t k = 0; k < s; ++k) cl.push_back(next++);
    c.clusters.push_back(cl);
  }
  return c;
}

}  // namespace

TEST(Butina, AllSimilarIsOneCluster) {
  Fingerprint f(64, 0);
  f.set(3);
  f.set(7);
  std::vector<Fingerprint> fps{f, f, f};
  const auto c = butina_cluster(fps, 0.6);
  ASSERT_EQ(c.clusters.size(), 1u);
  EXPECT_EQ(c.clusters[0], (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Butina, AllDissimilarAreSingletons) {
  std::vector<Fingerprint> fps;
  for (std::size_t i = 0; i < 5; ++i) {
    Fingerprint f(64, 0);
    f.set(i);
    fps.push_back(f);
  }
  const auto c = butina_cluster(fps, 0.6);
  EXPECT_EQ(c.clusters.size(), 5u);
  expect_partition(c, 5);
}

TEST(Butina, MatchesReferenceOnRandomInstances) {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng.below(25);
    const auto fps = random_fps(rng, n);
    const double t = 0.35 + 0.3 * rng.uniform();
    const auto c = butina_cluster(fps, t);
    expect_partition(c, n);
    EXPECT_EQ(c.clusters, reference_butina(fps, t)) << "trial " << trial;
  }
}

TEST(Butina, RealMolecules) {
  std::vector<Fingerprint> fps;
  for (const char* s : {"CCCCCCO", "CCCCCCCO", "CCCCCCN", "c1ccccc1O", "c1ccccc1N", "c1ccccc1CO"})
    fps.push_back(morgan_fingerprint(parse_smiles(s)));
  const auto c = butina_cluster(fps, 0.3);
  expect_partition(c, fps.size());
  for (std::size_t k = 1; k < c.clusters.size(); ++k) EXPECT_GE(c.clusters[k - 1].size(), c.clusters[k].size());
}

TEST(Leader, IdenticalFingerprintsMerge) {
  Fingerprint f(64, 0);
  f.set(1);
  std::vector<Fingerprint> fps(4, f);
  EXPECT_EQ(leader_cluster(fps, 0.9).clusters.size(), 1u);
}

TEST(Leader, ImpossibleThresholdKeepsDistinctApart) {
  Rng rng(5);
  const auto fps = random_fps(rng, 20);
  const auto c = leader_cluster(fps, 1.0 + 1e-9);
  EXPECT_EQ(c.clusters.size(), 20u);
  expect_partition(c, 20);
}

TEST(Leader, Deterministic) {
  Rng rng(6);
  const auto fps = random_fps(rng, 40);
  EXPECT_EQ(leader_cluster(fps, 0.5).clusters, leader_cluster(fps, 0.5).clusters);
  expect_partition(leader_cluster(fps, 0.5), 40);
}

TEST(Subset, ExactProportions) {
  const auto s = proportional_subset(sized_clusters({10, 10}), 0.3, 1);
  EXPECT_EQ(s.per_cluster_quota, (std::vector<std::size_t>{3, 3}));
  EXPECT_EQ(s.indices.size(), 6u);
}

TEST(Subset, Boundaries) {
  const auto c = sized_clusters({4, 3, 1});
  EXPECT_TRUE(proportional_subset(c, 0.0, 1).indices.empty());
  EXPECT_EQ(proportional_subset(c, 1.0, 1).indices.size(), 8u);
}

TEST(Subset, RoundHalfUp) {
  // 0.5 x 7 = 3.5 -> 4, 0.5 x 3 = 1.5 -> 2
  const auto s = proportional_subset(sized_clusters({7, 3}), 0.5, 9);
  EXPECT_EQ(s.per_cluster_quota, (std::vector<std::size_t>{4, 2}));
  EXPECT_EQ(s.indices.size(), 6u);
}

TEST(Subset, PerClusterRatioWithinOneMember) {
  Rng rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    Clustering c;
    std::size_t next = 0;
    const std::size_t k = 1 + rng.below(15);
    for (std::size_t i = 0; i < k; ++i) {
      std::vector<std::size_t> cl(1 + rng.below(30));
      for (auto& x : cl) x = next++;
      c.clusters.push_back(cl);
    }
    for (double f : {0.3, 0.6}) {
      const auto s = proportional_subset(c, f, static_cast<std::uint64_t>(trial));
      std::set<std::size_t> chosen(s.indices.begin(), s.indices.end());
      EXPECT_EQ(chosen.size(), s.indices.size());
      for (const auto& cl : c.clusters) {
        std::size_t hit = 0;
        for (auto x : cl) hit += chosen.count(x);
        EXPECT_LE(std::abs(static_cast<double>(hit) / cl.size() - f), 1.0 / cl.size() + 1e-12);
      }
    }
  }
}

TEST(Subset, SeededAndReproducible) {
  const auto c = sized_clusters({20, 15, 5});
  EXPECT_EQ(proportional_subset(c, 0.3, 4).indices, proportional_subset(c, 0.3, 4).indices);
  EXPECT_NE(proportional_subset(c, 0.3, 4).indices, proportional_subset(c, 0.3, 5).indices);
}

namespace {
void expect_plan_integrity(const SplitPlan& p) {
  ASSERT_EQ(p.folds.size(), p.n_repeats);
  for (std::size_t r = 0; r < p.n_repeats; ++r) {
    ASSERT_EQ(p.folds[r].size(), p.n_folds);
    std::vector<int> seen(*std::max_element(p.rows.begin(), p.rows.end()) + 1, 0);
    for (std::size_t f = 0; f < p.n_folds; ++f) {
      for (auto i : p.test(r, f)) ++seen[i];
      const auto train = p.train(r, f);
      std::set<std::size_t> t(p.test(r, f).begin(), p.test(r, f).end());
      for (auto i : train) EXPECT_EQ(t.count(i), 0u);
      EXPECT_EQ(train.size() + t.size(), p.rows.size());
    }
    for (auto i : p.rows) EXPECT_EQ(seen[i], 1);
  }
}
}  // namespace

TEST(SplitPlan, RandomFiveByFive) {
  std::vector<std::size_t> rows(53);
  std::iota(rows.begin(), rows.end(), 0);
  const auto p = random_split_plan(rows, 5, 5, 3);
  std::size_t cells = 0;
  for (const auto& rep : p.folds) cells += rep.size();
  EXPECT_EQ(cells, 25u);
  expect_plan_integrity(p);
  EXPECT_EQ(to_json(split_plan_from_json(to_json(p))), to_json(p));
}

TEST(SplitPlan, ButinaEqualClustersSpreadEvenly) {
  Clustering c;
  for (std::size_t k = 0; k < 10; ++k) c.clusters.push_back({3 * k, 3 * k + 1, 3 * k + 2});
  std::vector<std::size_t> rows(30);
  std::iota(rows.begin(), rows.end(), 100);
  const auto p = butina_split_plan(c, rows, 5, 5, 8);
  expect_plan_integrity(p);
  for (const auto& rep : p.folds)
    for (const auto& f : rep) EXPECT_EQ(f.size(), 6u);  // two clusters each
}

TEST(SplitPlan, ButinaKeepsClustersWhole) {
  const auto c = sized_clusters({9, 7, 5, 5, 4, 3, 2, 2, 1, 1, 1});
  std::vector<std::size_t> rows(40);
  std::iota(rows.begin(), rows.end(), 0);
  const auto p = butina_split_plan(c, rows, 5, 5, 1);
  expect_plan_integrity(p);
  for (std::size_t r = 0; r < 5; ++r)
    for (const auto& cl : c.clusters) {
      int folds_hit = 0;
      for (std::size_t f = 0; f < 5; ++f) {
        const auto& t = p.test(r, f);
        if (std::find(t.begin(), t.end(), cl[0]) != t.end()) {
          ++folds_hit;
          for (auto m : cl) EXPECT_NE(std::find(t.begin(), t.end(), m), t.end());
        }
      }
      EXPECT_EQ(folds_hit, 1);
    }
}

TEST(SplitPlan, TooFewClusters) {
  std::vector<std::size_t> rows(6);
  std::iota(rows.begin(), rows.end(), 0);
  try {
    butina_split_plan(sized_clusters({2, 2, 2}), rows, 5, 1, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::TooFewClusters);
  }
}

}  // namespace molda
