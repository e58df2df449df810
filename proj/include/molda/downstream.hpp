// SPDX-License-Identifier: Apache-2.0
#pragma once

// Labeled datasets, frozen-embedding extraction, a CART random forest and
// repeated cross-validation with regression metrics.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "molda/checkpoint.hpp"
#include "molda/chemspace.hpp"
#include "molda/encoder.hpp"
#include "molda/features.hpp"
#include "molda/hash.hpp"
#include "molda/molgraph.hpp"
#include "molda/parallel.hpp"
#include "molda/rng.hpp"
#include "molda/tensor.hpp"
#include "molda/tokenizer.hpp"

namespace molda {

// ---------------------------------------------------------------------------
// Labeled data

enum class Transform { None, Log10 };
enum class CensorDirection { Above, Below };

inline std::string to_string(Transform t) { return t == Transform::Log10 ? "log10" : "none"; }
inline std::string to_string(CensorDirection d) { return d == CensorDirection::Above ? "above" : "below"; }

/// Rows whose raw target is at or beyond `value` (in assay units, before the
/// transform) are censored.
struct CensorRule {
  double value = 0.0;
  CensorDirection direction = CensorDirection::Above;

  bool censored(double raw) const { return direction == CensorDirection::Above ? raw >= value : raw <= value; }
};

struct DatasetConfig {
  std::string name = "dataset";
  Transform transform = Transform::None;
  std::optional<CensorRule> censor;
};

inline nlohmann::json to_json(const DatasetConfig& c) {
  nlohmann::json j{{"name", c.name}, {"transform", to_string(c.transform)}};
  if (c.censor) j["censor"] = {{"value", c.censor->value}, {"direction", to_string(c.censor->direction)}};
  return j;
}

inline DatasetConfig dataset_config_from_json(const nlohmann::json& j) {
  DatasetConfig c;
  try {
    c.name = j.value("name", c.name);
    const std::string t = j.value("transform", std::string("none"));
    if (t == "log10") c.transform = Transform::Log10;
    else if (t != "none") fail(ErrorCode::Config, "unknown transform '" + t + "'");
    if (j.contains("censor") && !j["censor"].is_null()) {
      const auto& cj = j["censor"];
      CensorRule r;
      r.value = cj.at("value").get<double>();
      const std::string d = cj.value("direction", std::string("above"));
      if (d == "above") r.direction = CensorDirection::Above;
      else if (d == "below") r.direction = CensorDirection::Below;
      else fail(ErrorCode::Config, "unknown censor direction '" + d + "'");
      c.censor = r;
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Config, std::string("dataset config: ") + e.what());
  }
  return c;
}

inline DatasetConfig load_dataset_config(const std::string& path) {
  try {
    return dataset_config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::Config, path + ": " + e.what());
  }
}

struct LabeledDataset {
  std::string name;
  std::vector<std::string> ids;
  std::vector<std::string> smiles;
  std::vector<double> raw;
  std::vector<double> target;  // after the configured transform
  std::vector<bool> censored;

  std::size_t size() const { return smiles.size(); }

  /// Rows that take part in evaluation (censored rows excluded), ascending.
  std::vector<std::size_t> evaluation_rows() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < size(); ++i)
      if (!censored[i]) out.push_back(i);
    return out;
  }

  std::size_t censored_count() const { return static_cast<std::size_t>(std::count(censored.begin(), censored.end(), true)); }

  std::string hash() const {
    Fnv1a h;
    char buf[32];
    for (std::size_t i = 0; i < size(); ++i) {
      h.update(smiles[i]);
      std::snprintf(buf, sizeof(buf), ",%.17g\n", raw[i]);
      h.update(buf);
    }
    return hex64(h.digest());
  }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cell));
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  out.push_back(std::move(cell));
  for (auto& s : out) {
    const auto b = s.find_first_not_of(" \t");
    const auto e = s.find_last_not_of(" \t");
    s = b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  }
  return out;
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace detail

/// Parses CSV text with a header containing `smiles` and `target` (and
/// optionally `id`). Missing ids become the 0-based row number.
inline LabeledDataset parse_labeled_csv(std::istream& in, const DatasetConfig& cfg) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::Format, "labeled CSV is empty");
  const auto header = detail::split_csv_line(line);
  auto column = [&](const char* name) -> std::ptrdiff_t {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : it - header.begin();
  };
  const auto c_smiles = column("smiles"), c_target = column("target"), c_id = column("id");
  if (c_smiles < 0 || c_target < 0) fail(ErrorCode::Format, "labeled CSV needs 'smiles' and 'target' columns");

  LabeledDataset ds;
  ds.name = cfg.name;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = detail::split_csv_line(line);
    const auto need = static_cast<std::size_t>(std::max({c_smiles, c_target, c_id})) + 1;
    if (cells.size() < need) fail(ErrorCode::Format, "line " + std::to_string(lineno) + ": too few columns");
    double raw = 0.0;
    std::size_t used = 0;
    const std::string& t = cells[static_cast<std::size_t>(c_target)];
    try {
      raw = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != t.size() || !std::isfinite(raw))
      fail(ErrorCode::Format, "line " + std::to_string(lineno) + ": target '" + t + "' is not a finite number");
    double value = raw;
    if (cfg.transform == Transform::Log10) {
      if (raw <= 0.0) fail(ErrorCode::Format, "line " + std::to_string(lineno) + ": log10 of non-positive target");
      value = std::log10(raw);
    }
    ds.smiles.push_back(cells[static_cast<std::size_t>(c_smiles)]);
    ds.ids.push_back(c_id >= 0 ? cells[static_cast<std::size_t>(c_id)] : std::to_string(ds.ids.size()));
    ds.raw.push_back(raw);
    ds.target.push_back(value);
    ds.censored.push_back(cfg.censor && cfg.censor->censored(raw));
  }
  if (ds.size() == 0) fail(ErrorCode::InsufficientData, "labeled CSV has no rows");
  return ds;
}

inline LabeledDataset load_labeled_dataset(const std::string& csv_path, const DatasetConfig& cfg) {
  std::ifstream in(csv_path);
  if (!in) fail(ErrorCode::Io, "cannot open " + csv_path);
  return parse_labeled_csv(in, cfg);
}

// ---------------------------------------------------------------------------
// Representations

/// Eval-mode pooled embeddings, shape (N, hidden). Rows are encoded one at a
/// time so a row's embedding never depends on its batch neighbours.
inline Tensor<double> embed_dataset(const Checkpoint& ck, const std::vector<std::string>& smiles,
                                    Pooling pooling = Pooling::Cls, std::size_t threads = 1) {
  const Encoder<float> enc(ck.config);
  const std::size_t d = ck.config.hidden;
  Tensor<double> out({smiles.size(), d});
  parallel_for(smiles.size(), threads, [&](std::size_t i) {
    const auto ids = encode(smiles[i], ck.vocab, ck.config.max_len);
    const bool known = std::any_of(ids.begin() + 1, ids.end() - 1, [](int id) { return id != kUnkId; });
    if (!known)
      fail(ErrorCode::TokenizationFailure, "row " + std::to_string(i) + ": '" + smiles[i] + "' has no in-vocabulary tokens");
    const auto batch = make_batch({ids});
    const auto hidden = enc.forward(batch, ck.params, Mode::Eval, 0);
    const auto pooled = pool(hidden, batch, pooling);
    std::copy(pooled.data.begin(), pooled.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  });
  return out;
}

inline Tensor<double> descriptor_matrix(const std::vector<std::string>& smiles) {
  const std::size_t d = descriptor_names().size();
  Tensor<double> out({smiles.size(), d});
  for (std::size_t i = 0; i < smiles.size(); ++i) {
    const auto v = compute_descriptors(parse_smiles(smiles[i]));
    std::copy(v.values.begin(), v.values.end(), out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return out;
}

inline Tensor<double> fingerprint_matrix(const std::vector<std::string>& smiles, int radius = 2, std::size_t nbits = 2048) {
  Tensor<double> out({smiles.size(), nbits});
  for (std::size_t i = 0; i < smiles.size(); ++i) {
    const auto fp = morgan_fingerprint(parse_smiles(smiles[i]), radius, nbits);
    for (std::size_t b = 0; b < nbits; ++b) out.data[i * nbits + b] = fp.test(b) ? 1.0 : 0.0;
  }
  return out;
}

inline Tensor<double> select_rows(const Tensor<double>& x, const std::vector<std::size_t>& rows) {
  const std::size_t d = x.cols();
  Tensor<double> out({rows.size(), d});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(rows[i] * d), d,
                out.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  return out;
}

// ---------------------------------------------------------------------------
// Random forest

struct ForestParams {
  std::size_t n_trees = 100;
  std::size_t max_depth = 0;  // 0 = unlimited
  std::size_t min_samples_split = 2;
  bool bootstrap = true;
};

struct TreeNode {
  int feature = -1;  // -1 for a leaf
  double threshold = 0.0;
  std::uint32_t left = 0, right = 0;
  double value = 0.0;
};

struct RegressionTree {
  std::vector<TreeNode> nodes;
  std::uint64_t seed = 0;

  double predict(const double* x) const {
    std::size_t k = 0;
    while (nodes[k].feature >= 0) k = x[nodes[k].feature] <= nodes[k].threshold ? nodes[k].left : nodes[k].right;
    return nodes[k].value;
  }
};

struct ForestModel {
  ForestParams params;
  std::size_t n_features = 0;
  std::vector<RegressionTree> trees;
};

namespace detail {

/// Lexicographic order on (x row, y). Fitting on rows in this order makes the
/// forest independent of the order the caller supplied them in.
inline std::vector<std::size_t> canonical_row_order(const Tensor<double>& x, const std::vector<double>& y) {
  const std::size_t d = x.cols();
  std::vector<std::size_t> order(y.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double* xa = x.data.data() + a * d;
    const double* xb = x.data.data() + b * d;
    for (std::size_t f = 0; f < d; ++f)
      if (xa[f] != xb[f]) return xa[f] < xb[f];
    return y[a] < y[b];
  });
  return order;
}

inline RegressionTree grow_tree(const Tensor<double>& x, const std::vector<double>& y, std::vector<std::size_t> sample,
                                const ForestParams& hp) {
  const std::size_t d = x.cols();
  RegressionTree tree;
  struct Pending {
    std::size_t node, begin, end, depth;
  };
  std::vector<Pending> stack;
  tree.nodes.emplace_back();
  stack.push_back({0, 0, sample.size(), 0});
  std::vector<std::pair<double, double>> col;  // (x, y) of the node's samples on one feature

  while (!stack.empty()) {
    const Pending p = stack.back();
    stack.pop_back();
    const std::size_t n = p.end - p.begin;
    double sum = 0.0;
    bool pure = true;
    const double y0 = y[sample[p.begin]];
    for (std::size_t i = p.begin; i < p.end; ++i) {
      sum += y[sample[i]];
      pure = pure && y[sample[i]] == y0;
    }
    tree.nodes[p.node].value = sum / static_cast<double>(n);
    if (pure || n < hp.min_samples_split || (hp.max_depth && p.depth >= hp.max_depth)) continue;

    // Maximizing sL^2/nL + sR^2/nR is minimizing the children's summed
    // squared error. Strict improvement keeps the lowest feature/threshold.
    double best = -std::numeric_limits<double>::infinity();
    int best_f = -1;
    double best_t = 0.0;
    for (std::size_t f = 0; f < d; ++f) {
      col.clear();
      for (std::size_t i = p.begin; i < p.end; ++i) col.emplace_back(x.data[sample[i] * d + f], y[sample[i]]);
      std::stable_sort(col.begin(), col.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
      if (col.front().first == col.back().first) continue;
      double left = 0.0;
      for (std::size_t k = 0; k + 1 < n; ++k) {
        left += col[k].second;
        if (col[k].first == col[k + 1].first) continue;
        const double nl = static_cast<double>(k + 1), nr = static_cast<double>(n - k - 1);
        const double right = sum - left;
        const double score = left * left / nl + right * right / nr;
        if (score > best) {
          best = score;
          best_f = static_cast<int>(f);
          double t = 0.5 * (col[k].first + col[k + 1].first);
          if (!(t < col[k + 1].first)) t = col[k].first;
          best_t = t;
        }
      }
    }
    if (best_f < 0) continue;  // identical inputs: stays a leaf

    auto mid = std::stable_partition(sample.begin() + static_cast<std::ptrdiff_t>(p.begin),
                                     sample.begin() + static_cast<std::ptrdiff_t>(p.end), [&](std::size_t r) {
                                       return x.data[r * d + static_cast<std::size_t>(best_f)] <= best_t;
                                     });
    const std::size_t split = static_cast<std::size_t>(mid - sample.begin());
    const auto l = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    tree.nodes[p.node].feature = best_f;
    tree.nodes[p.node].threshold = best_t;
    tree.nodes[p.node].left = l;
    tree.nodes[p.node].right = l + 1;
    stack.push_back({l + 1, split, p.end, p.depth + 1});
    stack.push_back({l, p.begin, split, p.depth + 1});
  }
  return tree;
}

}  // namespace detail

/// Bagged CART regressors considering every feature at every split. Tree t
/// draws its bootstrap sample from derive_seed(seed, {t}).
inline ForestModel fit_forest(const Tensor<double>& x, const std::vector<double>& y, const ForestParams& hp,
                              std::uint64_t seed, std::size_t threads = 1) {
  const std::size_t n = y.size();
  if (x.rows() != n) fail(ErrorCode::ShapeMismatch, "feature rows and targets differ in length");
  if (n < 2) fail(ErrorCode::InsufficientData, "random forest needs at least 2 rows");
  if (hp.n_trees == 0) fail(ErrorCode::Config, "n_trees must be positive");
  for (double v : x.data)
    if (!std::isfinite(v)) fail(ErrorCode::NonFinite, "non-finite feature value");
  for (double v : y)
    if (!std::isfinite(v)) fail(ErrorCode::NonFinite, "non-finite target value");

  const auto order = detail::canonical_row_order(x, y);
  const Tensor<double> xs = select_rows(x, order);
  std::vector<double> ys(n);
  for (std::size_t i = 0; i < n; ++i) ys[i] = y[order[i]];

  ForestModel model;
  model.params = hp;
  model.n_features = x.cols();
  model.trees.resize(hp.n_trees);
  parallel_for(hp.n_trees, threads, [&](std::size_t t) {
    const std::uint64_t tree_seed = derive_seed(seed, {t});
    std::vector<std::size_t> sample(n);
    if (hp.bootstrap) {
      Rng rng(tree_seed);
      for (auto& s : sample) s = rng.below(n);
    } else {
      std::iota(sample.begin(), sample.end(), 0);
    }
    model.trees[t] = detail::grow_tree(xs, ys, std::move(sample), hp);
    model.trees[t].seed = tree_seed;
  });
  return model;
}

inline std::vector<double> predict(const ForestModel& model, const Tensor<double>& x) {
  if (x.rows() > 0 && x.cols() != model.n_features) fail(ErrorCode::ShapeMismatch, "feature width differs from the model");
  std::vector<double> out(x.rows(), 0.0);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double* row = x.data.data() + i * model.n_features;
    double s = 0.0;
    for (const auto& t : model.trees) s += t.predict(row);
    out[i] = s / static_cast<double>(model.trees.size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

inline const std::array<std::string, 5>& metric_names() {
  static const std::array<std::string, 5> names{"MAE", "RMSE", "R2", "Pearson", "Spearman"};
  return names;
}

/// Undefined correlation-type metrics (constant inputs) are left empty.
struct Metrics {
  double mae = 0.0;
  double rmse = 0.0;
  std::optional<double> r2, pearson, spearman;

  std::optional<double> get(const std::string& name) const {
    if (name == "MAE") return mae;
    if (name == "RMSE") return rmse;
    if (name == "R2") return r2;
    if (name == "Pearson") return pearson;
    if (name == "Spearman") return spearman;
    fail(ErrorCode::Config, "unknown metric '" + name + "'");
  }
};

/// Average ranks (1-based), ties share the mean of their positions.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

inline std::optional<double> pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::nullopt;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline Metrics compute_metrics(const std::vector<double>& y, const std::vector<double>& yhat) {
  if (y.size() != yhat.size()) fail(ErrorCode::ShapeMismatch, "metric inputs differ in length");
  if (y.size() < 2) fail(ErrorCode::InsufficientData, "metrics need at least 2 values");
  const double n = static_cast<double>(y.size());
  Metrics m;
  double abs = 0.0, sq = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = yhat[i] - y[i];
    abs += std::abs(e);
    sq += e * e;
  }
  m.mae = abs / n;
  m.rmse = std::sqrt(sq / n);
  const double mean = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sst = 0.0;
  for (double v : y) sst += (v - mean) * (v - mean);
  if (sst > 0.0) m.r2 = 1.0 - sq / sst;
  m.pearson = pearson(y, yhat);
  m.spearman = pearson(average_ranks(y), average_ranks(yhat));
  return m;
}

// ---------------------------------------------------------------------------
// Repeated cross-validation

struct MetricRecord {
  std::string model;
  std::string dataset;
  std::string split;
  std::size_t repeat = 0;
  std::size_t fold = 0;
  std::string metric;
  std::optional<double> value;

  bool operator==(const MetricRecord&) const = default;
};

/// One forest per (repeat, fold) cell of `plan`, seeded with
/// derive_seed(seed, {repeat, fold}). Records come out ordered by repeat,
/// fold, then metric.
inline std::vector<MetricRecord> run_repeated_cv(const Tensor<double>& x, const LabeledDataset& ds, const SplitPlan& plan,
                                                 const std::string& model_id, const ForestParams& hp,
                                                 std::uint64_t seed, std::size_t threads = 1) {
  if (x.rows() != ds.size()) fail(ErrorCode::ShapeMismatch, "representation rows differ from dataset rows");
  for (std::size_t r : plan.rows) {
    if (r >= ds.size()) fail(ErrorCode::ShapeMismatch, "split plan refers to row " + std::to_string(r));
    if (ds.censored[r]) fail(ErrorCode::Config, "split plan includes censored row " + std::to_string(r));
  }
  const std::size_t cells = plan.n_repeats * plan.n_folds;
  std::vector<Metrics> results(cells);
  // Cells run one after another; trees inside a cell share the workers.
  for (std::size_t c = 0; c < cells; ++c) {
    const std::size_t rep = c / plan.n_folds, fold = c % plan.n_folds;
    const auto train = plan.train(rep, fold);
    const auto& test = plan.test(rep, fold);
    std::vector<double> ytr, yte;
    for (auto r : train) ytr.push_back(ds.target[r]);
    for (auto r : test) yte.push_back(ds.target[r]);
    const auto model = fit_forest(select_rows(x, train), ytr, hp, derive_seed(seed, {rep, fold}), threads);
    results[c] = compute_metrics(yte, predict(model, select_rows(x, test)));
  }
  std::vector<MetricRecord> out;
  for (std::size_t c = 0; c < cells; ++c)
    for (const auto& name : metric_names())
      out.push_back({model_id, ds.name, to_string(plan.policy), c / plan.n_folds, c % plan.n_folds, name, results[c].get(name)});
  return out;
}

inline std::string records_to_csv(const std::vector<MetricRecord>& records) {
  std::ostringstream os;
  os << "model,dataset,split,repeat,fold,metric,value\n";
  char buf[40];
  for (const auto& r : records) {
    os << detail::csv_escape(r.model) << ',' << detail::csv_escape(r.dataset) << ',' << r.split << ',' << r.repeat << ','
       << r.fold << ',' << r.metric << ',';
    if (r.value) {
      std::snprintf(buf, sizeof(buf), "%.17g", *r.value);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

inline nlohmann::json records_to_json(const std::vector<MetricRecord>& records) {
  auto arr = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json j{{"model", r.model}, {"dataset", r.dataset}, {"split", r.split}, {"repeat", r.repeat},
                     {"fold", r.fold},   {"metric", r.metric}};
    j["value"] = r.value ? nlohmann::json(*r.value) : nlohmann::json(nullptr);
    arr.push_back(std::move(j));
  }
  return arr;
}

inline std::vector<MetricRecord> records_from_json(const nlohmann::json& arr) {
  std::vector<MetricRecord> out;
  try {
    for (const auto& j : arr) {
      MetricRecord r{j.at("model").get<std::string>(), j.at("dataset").get<std::string>(), j.at("split").get<std::string>(),
                     j.at("repeat").get<std::size_t>(), j.at("fold").get<std::size_t>(), j.at("metric").get<std::string>(),
                     std::nullopt};
      if (!j.at("value").is_null()) r.value = j["value"].get<double>();
      out.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::Format, std::string("metric records: ") + e.what());
  }
  return out;
}

inline std::vector<MetricRecord> records_from_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::Format, "metric CSV is empty");
  const auto header = detail::split_csv_line(line);
  const std::vector<std::string> expect{"model", "dataset", "split", "repeat", "fold", "metric", "value"};
  if (header != expect) fail(ErrorCode::Format, "metric CSV header must be " + line);
  std::vector<MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto c = detail::split_csv_line(line);
    if (c.size() != expect.size()) fail(ErrorCode::Format, "metric CSV row has " + std::to_string(c.size()) + " cells");
    try {
      MetricRecord r{c[0], c[1], c[2], std::stoul(c[3]), std::stoul(c[4]), c[5], std::nullopt};
      if (!c[6].empty()) r.value = std::stod(c[6]);
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      fail(ErrorCode::Format, "metric CSV row '" + line + "' is malformed");
    }
  }
  return out;
}

}  // namespace molda
