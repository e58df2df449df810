// SPDX-License-Identifier: Apache-2.0
#pragma once

// Fingerprint-space clustering, proportional subset selection and
// cross-validation split plans.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "molda/error.hpp"
#include "molda/features.hpp"
#include "molda/rng.hpp"

namespace molda {

enum class ClusterMethod { Butina, BitbirchLike };

inline std::string to_string(ClusterMethod m) {
  return m == ClusterMethod::Butina ? "butina" : "bitbirch_like";
}

struct Clustering {
  /// Partition of the input indices, largest cluster first. Butina clusters
  /// list their centroid first; leader clusters list their leader first.
  std::vector<std::vector<std::size_t>> clusters;
  ClusterMethod method = ClusterMethod::Butina;
  double threshold = 0.6;

  std::size_t point_count() const {
    std::size_t n = 0;
    for (const auto& c : clusters) n += c.size();
    return n;
  }
};

namespace detail {

inline void order_clusters(std::vector<std::vector<std::size_t>>& clusters) {
  std::stable_sort(clusters.begin(), clusters.end(),
                   [](const auto& a, const auto& b) { return a.size() > b.size(); });
}

}  // namespace detail

/// Sphere-exclusion clustering: the unassigned point with the most
/// unassigned neighbors (similarity >= threshold) becomes a centroid and
/// takes all its unassigned neighbors; ties go to the lowest index.
inline Clustering butina_cluster(std::span<const Fingerprint> fps, double threshold = 0.6) {
  const std::size_t n = fps.size();
  std::vector<std::vector<std::size_t>> neighbors(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (tanimoto(fps[i], fps[j]) >= threshold) {
        neighbors[i].push_back(j);
        neighbors[j].push_back(i);
      }
  std::vector<std::size_t> count(n);
  for (std::size_t i = 0; i < n; ++i) count[i] = neighbors[i].size();
  std::vector<bool> assigned(n, false);
  Clustering out;
  out.method = ClusterMethod::Butina;
  out.threshold = threshold;
  std::size_t remaining = n;
  while (remaining > 0) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i)
      if (!assigned[i] && (best == n || count[i] > count[best])) best = i;
    std::vector<std::size_t> cluster{best};
    assigned[best] = true;
    for (std::size_t j : neighbors[best])
      if (!assigned[j]) {
        assigned[j] = true;
        cluster.push_back(j);
      }
    std::sort(cluster.begin() + 1, cluster.end());
    remaining -= cluster.size();
    for (std::size_t member : cluster)
      for (std::size_t k : neighbors[member])
        if (!assigned[k]) --count[k];
    out.clusters.push_back(std::move(cluster));
  }
  detail::order_clusters(out.clusters);
  return out;
}

/// Single-pass leader clustering: each point joins the first existing leader
/// with similarity >= threshold, otherwise it becomes a leader. Stand-in for
/// BitBirch at corpus scale; depends on input order.
inline Clustering leader_cluster(std::span<const Fingerprint> fps, double threshold = 0.6) {
  Clustering out;
  out.method = ClusterMethod::BitbirchLike;
  out.threshold = threshold;
  std::vector<std::size_t> leaders;
  for (std::size_t i = 0; i < fps.size(); ++i) {
    bool placed = false;
    for (std::size_t c = 0; c < leaders.size(); ++c)
      if (tanimoto(fps[leaders[c]], fps[i]) >= threshold) {
        out.clusters[c].push_back(i);
        placed = true;
        break;
      }
    if (!placed) {
      leaders.push_back(i);
      out.clusters.push_back({i});
    }
  }
  detail::order_clusters(out.clusters);
  return out;
}

struct SubsetSelection {
  double fraction = 0.0;
  std::uint64_t seed = 0;
  /// Selected indices, ascending.
  std::vector<std::size_t> indices;
  /// Quota per cluster, aligned with Clustering::clusters.
  std::vector<std::size_t> per_cluster_quota;
};

/// round(fraction x size) with halves rounded up.
inline std::size_t proportional_quota(double fraction, std::size_t size) {
  const double exact = fraction * static_cast<double>(size);
  return static_cast<std::size_t>(std::floor(exact + 0.5 + 1e-9));
}

/// Samples round(fraction x |cluster|) members from every cluster without
/// replacement; each cluster draws from its own seeded stream.
inline SubsetSelection proportional_subset(const Clustering& c, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::Config, "fraction must lie in [0, 1]");
  SubsetSelection out;
  out.fraction = fraction;
  out.seed = seed;
  for (std::size_t k = 0; k < c.clusters.size(); ++k) {
    const auto& members = c.clusters[k];
    const std::size_t quota = std::min(members.size(), proportional_quota(fraction, members.size()));
    out.per_cluster_quota.push_back(quota);
    auto pool = members;
    std::sort(pool.begin(), pool.end());
    Rng rng(derive_seed(seed, {k}));
    rng.shuffle(pool);
    out.indices.insert(out.indices.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(quota));
  }
  std::sort(out.indices.begin(), out.indices.end());
  return out;
}

// ---------------------------------------------------------------------------
// Split plans

enum class SplitPolicy { Random, Butina };

inline std::string to_string(SplitPolicy p) { return p == SplitPolicy::Random ? "random" : "butina"; }

inline SplitPolicy split_policy_from(const std::string& s) {
  if (s == "random") return SplitPolicy::Random;
  if (s == "butina") return SplitPolicy::Butina;
  fail(ErrorCode::Config, "unknown split policy '" + s + "'");
}

struct SplitPlan {
  SplitPolicy policy = SplitPolicy::Random;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  std::size_t n_folds = 5;
  std::size_t n_repeats = 5;
  /// Rows taking part in cross-validation (dataset row ids, ascending).
  std::vector<std::size_t> rows;
  /// folds[repeat][fold] = test row ids, ascending.
  std::vector<std::vector<std::vector<std::size_t>>> folds;

  const std::vector<std::size_t>& test(std::size_t repeat, std::size_t fold) const { return folds[repeat][fold]; }

  std::vector<std::size_t> train(std::size_t repeat, std::size_t fold) const {
    const auto& t = folds[repeat][fold];
    std::vector<std::size_t> out;
    std::set_difference(rows.begin(), rows.end(), t.begin(), t.end(), std::back_inserter(out));
    return out;
  }
};

/// Each repeat shuffles the rows with its own stream and deals them to folds
/// round-robin, so fold sizes differ by at most one.
inline SplitPlan random_split_plan(std::vector<std::size_t> rows, std::size_t n_folds, std::size_t n_repeats,
                                   std::uint64_t seed) {
  if (n_folds < 2) fail(ErrorCode::Config, "need at least 2 folds");
  if (rows.size() < n_folds) fail(ErrorCode::InsufficientData, "fewer rows than folds");
  std::sort(rows.begin(), rows.end());
  SplitPlan plan;
  plan.policy = SplitPolicy::Random;
  plan.seed = seed;
  plan.n_folds = n_folds;
  plan.n_repeats = n_repeats;
  plan.rows = rows;
  for (std::size_t r = 0; r < n_repeats; ++r) {
    auto order = rows;
    Rng rng(derive_seed(seed, {r}));
    rng.shuffle(order);
    std::vector<std::vector<std::size_t>> folds(n_folds);
    for (std::size_t i = 0; i < order.size(); ++i) folds[i % n_folds].push_back(order[i]);
    for (auto& f : folds) std::sort(f.begin(), f.end());
    plan.folds.push_back(std::move(folds));
  }
  return plan;
}

/// Whole clusters go to folds, largest first, each to the fold currently
/// holding the fewest rows (lowest fold index on ties). Clusters of equal
/// size are shuffled per repeat. Cluster members are row ids given by `rows`
/// (cluster member k refers to rows[k]).
inline SplitPlan butina_split_plan(const Clustering& c, std::vector<std::size_t> rows, std::size_t n_folds,
                                   std::size_t n_repeats, std::uint64_t seed) {
  if (n_folds < 2) fail(ErrorCode::Config, "need at least 2 folds");
  if (c.clusters.size() < n_folds)
    fail(ErrorCode::TooFewClusters,
         std::to_string(c.clusters.size()) + " clusters cannot fill " + std::to_string(n_folds) + " folds");
  if (c.point_count() != rows.size()) fail(ErrorCode::ShapeMismatch, "clustering does not cover the plan rows");
  SplitPlan plan;
  plan.policy = SplitPolicy::Butina;
  plan.seed = seed;
  plan.n_folds = n_folds;
  plan.n_repeats = n_repeats;
  plan.rows = rows;
  std::sort(plan.rows.begin(), plan.rows.end());

  for (std::size_t r = 0; r < n_repeats; ++r) {
    std::vector<std::size_t> order(c.clusters.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, {r}));
    // Shuffle, then stable sort by size: equal-size clusters end up in a
    // repeat-specific order.
    rng.shuffle(order);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return c.clusters[a].size() > c.clusters[b].size();
    });
    std::vector<std::vector<std::size_t>> folds(n_folds);
    for (std::size_t k : order) {
      std::size_t target = 0;
      for (std::size_t f = 1; f < n_folds; ++f)
        if (folds[f].size() < folds[target].size()) target = f;
      for (std::size_t member : c.clusters[k]) folds[target].push_back(rows[member]);
    }
    for (auto& f : folds) std::sort(f.begin(), f.end());
    plan.folds.push_back(std::move(folds));
  }
  return plan;
}

inline nlohmann::json to_json(const SplitPlan& p) {
  nlohmann::json j;
  j["policy"] = to_string(p.policy);
  j["seed"] = p.seed;
  j["dataset_hash"] = p.dataset_hash;
  j["n_folds"] = p.n_folds;
  j["n_repeats"] = p.n_repeats;
  j["rows"] = p.rows;
  j["repeats"] = p.folds;
  return j;
}

inline SplitPlan split_plan_from_json(const nlohmann::json& j) {
  try {
    SplitPlan p;
    p.policy = split_policy_from(j.at("policy").get<std::string>());
    p.seed = j.at("seed").get<std::uint64_t>();
    p.dataset_hash = j.at("dataset_hash").get<std::string>();
    p.n_folds = j.at("n_folds").get<std::size_t>();
    p.n_repeats = j.at("n_repeats").get<std::size_t>();
    p.rows = j.at("rows").get<std::vector<std::size_t>>();
    p.folds = j.at("repeats").get<std::vector<std::vector<std::vector<std::size_t>>>>();
    return p;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("split plan: ") + e.what());
  }
}

inline nlohmann::json to_json(const Clustering& c) {
  return {{"method", to_string(c.method)}, {"threshold", c.threshold}, {"clusters", c.clusters}};
}

inline nlohmann::json to_json(const SubsetSelection& s) {
  return {{"fraction", s.fraction}, {"seed", s.seed}, {"indices", s.indices}, {"per_cluster_quota", s.per_cluster_quota}};
}

}  // namespace molda
