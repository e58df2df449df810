// SPDX-License-Identifier: Apache-2.0
#pragma once

// Paired t-tests, one-way repeated-measures ANOVA and a Tukey HSD that takes
// its standard error from the repeated-measures error term.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "molda/downstream.hpp"
#include "molda/error.hpp"

namespace molda {

// ---------------------------------------------------------------------------
// Distributions

/// Regularized incomplete beta I_x(a, b), modified Lentz continued fraction.
inline double incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) fail(ErrorCode::Config, "incomplete beta needs positive parameters");
  if (x <= 0.0) return 0.0;
  if (x >= 1.0) return 1.0;
  // The fraction converges quickly only for x < (a+1)/(a+b+2).
  if (x > (a + 1.0) / (a + b + 2.0)) return 1.0 - incomplete_beta(b, a, 1.0 - x);

  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  constexpr double tiny = 1e-300;
  constexpr double eps = 1e-16;
  double c = 1.0;
  double d = 1.0 - (a + b) * x / (a + 1.0);
  if (std::abs(d) < tiny) d = tiny;
  d = 1.0 / d;
  double f = d;
  for (int m = 1; m <= 5000; ++m) {
    const double m2 = 2.0 * m;
    double num = m * (b - m) * x / ((a + m2 - 1.0) * (a + m2));
    d = 1.0 + num * d;
    c = 1.0 + num / c;
    if (std::abs(d) < tiny) d = tiny;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    f *= d * c;
    num = -(a + m) * (a + b + m) * x / ((a + m2) * (a + m2 + 1.0));
    d = 1.0 + num * d;
    c = 1.0 + num / c;
    if (std::abs(d) < tiny) d = tiny;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    f *= delta;
    if (std::abs(delta - 1.0) < eps) break;
  }
  return std::exp(log_front) * f / a;
}

inline double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) fail(ErrorCode::Config, "t distribution needs df > 0");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  // Near zero the other form keeps the CDF strictly increasing.
  if (t * t < df) {
    const double half = 0.5 * incomplete_beta(0.5, 0.5 * df, t * t / (df + t * t));
    return t > 0.0 ? 0.5 + half : 0.5 - half;
  }
  const double tail = 0.5 * incomplete_beta(0.5 * df, 0.5, df / (df + t * t));
  return t > 0.0 ? 1.0 - tail : tail;
}

/// Quantile by bisection on the CDF.
inline double student_t_quantile(double p, double df) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::Config, "quantile probability must be in (0, 1)");
  double lo = -1.0, hi = 1.0;
  while (student_t_cdf(lo, df) > p) lo *= 2.0;
  while (student_t_cdf(hi, df) < p) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(hi)); ++i) {
    const double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, df) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// P(F > f) for F(d1, d2).
inline double f_sf(double f, double d1, double d2) {
  if (!(d1 > 0.0) || !(d2 > 0.0)) fail(ErrorCode::Config, "F distribution needs positive dfs");
  if (f <= 0.0) return 1.0;
  if (std::isinf(f)) return 0.0;
  return incomplete_beta(0.5 * d2, 0.5 * d1, d2 / (d2 + d1 * f));
}

namespace detail {

/// 20-point Gauss-Legendre nodes and weights on [-1, 1].
inline const std::pair<std::array<double, 20>, std::array<double, 20>>& gauss_legendre20() {
  static const auto rule = [] {
    std::array<double, 20> x{}, w{};
    constexpr int n = 20;
    for (int i = 0; i < n; ++i) {
      double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
      double dp = 0.0;
      for (int it = 0; it < 100; ++it) {
        double p0 = 1.0, p1 = 0.0;
        for (int k = 1; k <= n; ++k) {
          const double p2 = p1;
          p1 = p0;
          p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
        }
        dp = n * (z * p0 - p1) / (z * z - 1.0);
        const double dz = p0 / dp;
        z -= dz;
        if (std::abs(dz) < 1e-16) break;
      }
      x[static_cast<std::size_t>(i)] = z;
      w[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    return std::pair{x, w};
  }();
  return rule;
}

/// Composite 20-point Gauss-Legendre over [a, b] split into `panels`.
template <class Fn>
double integrate(Fn&& f, double a, double b, int panels) {
  const auto& [x, w] = gauss_legendre20();
  const double h = (b - a) / panels;
  double total = 0.0;
  for (int p = 0; p < panels; ++p) {
    const double mid = a + (p + 0.5) * h;
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * f(mid + 0.5 * h * x[i]);
    total += 0.5 * h * s;
  }
  return total;
}

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::numbers::sqrt2); }

/// P(range of k standard normals < w).
inline double normal_range_cdf(double w, int k) {
  if (w <= 0.0) return 0.0;
  auto f = [&](double z) {
    const double inner = normal_cdf(z) - normal_cdf(z - w);
    return std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi) * std::pow(inner, k - 1);
  };
  return std::min(1.0, k * integrate(f, -8.5, 8.5 + w, 24));
}

}  // namespace detail

/// CDF of the studentized range Q(k, df). The inner integral (range of k
/// normals) uses 24 panels and the outer integral over the chi-distributed
/// scale s = sqrt(chi2_df / df) uses 40 panels, both 20-point Gauss-Legendre.
inline double studentized_range_cdf(double q, int k, double df) {
  if (k < 2) fail(ErrorCode::Config, "studentized range needs k >= 2");
  if (!(df > 0.0)) fail(ErrorCode::Config, "studentized range needs df > 0");
  if (q <= 0.0) return 0.0;
  if (std::isinf(q)) return 1.0;
  const double log_norm = 0.5 * df * std::log(0.5 * df) - std::lgamma(0.5 * df) + std::log(2.0);
  auto density = [&](double s) {
    if (s <= 0.0) return 0.0;
    return std::exp(log_norm + (df - 1.0) * std::log(s) - 0.5 * df * s * s);
  };
  const double spread = 1.0 / std::sqrt(2.0 * df);
  const double lo = std::max(0.0, 1.0 - 14.0 * spread);
  const double hi = 1.0 + 14.0 * spread + (df < 4 ? 6.0 : 0.0);
  const double p = detail::integrate([&](double s) { return density(s) * detail::normal_range_cdf(q * s, k); }, lo, hi, 40);
  return std::clamp(p, 0.0, 1.0);
}

inline double studentized_range_quantile(double p, int k, double df) {
  if (!(p > 0.0 && p < 1.0)) fail(ErrorCode::Config, "quantile probability must be in (0, 1)");
  // Illinois regula falsi on cdf(q) - p.
  double lo = 0.0, hi = 4.0;
  double flo = -p, fhi = studentized_range_cdf(hi, k, df) - p;
  while (fhi < 0.0) {
    lo = hi;
    flo = fhi;
    hi *= 2.0;
    fhi = studentized_range_cdf(hi, k, df) - p;
  }
  int side = 0;
  double q = hi;
  for (int i = 0; i < 100 && hi - lo > 1e-10; ++i) {
    q = (lo * fhi - hi * flo) / (fhi - flo);
    const double fq = studentized_range_cdf(q, k, df) - p;
    if (std::abs(fq) < 1e-13) break;
    if (fq < 0.0) {
      lo = q;
      flo = fq;
      if (side == -1) fhi *= 0.5;
      side = -1;
    } else {
      hi = q;
      fhi = fq;
      if (side == 1) flo *= 0.5;
      side = 1;
    }
  }
  return q;
}

// ---------------------------------------------------------------------------
// Tests

enum class Tail { Two, Greater, Less };

inline Tail tail_from(const std::string& s) {
  if (s == "two") return Tail::Two;
  if (s == "greater") return Tail::Greater;
  if (s == "less") return Tail::Less;
  fail(ErrorCode::Config, "unknown tail '" + s + "'");
}

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  double mean_difference = 0.0;
};

/// Paired t-test on d = a - b. `Greater` tests mean(d) > 0.
inline TTestResult paired_t(const std::vector<double>& a, const std::vector<double>& b, Tail tail = Tail::Two) {
  if (a.size() != b.size()) fail(ErrorCode::ShapeMismatch, "paired samples differ in length");
  if (a.size() < 3) fail(ErrorCode::InsufficientData, "paired t-test needs at least 3 pairs");
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) mean += a[i] - b[i];
  mean /= n;
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i] - mean) * (a[i] - b[i] - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (!(sd > 1e-12 * std::max(1.0, std::abs(mean))))
    fail(ErrorCode::ZeroVarianceDifferences, "paired differences have zero variance; p is undefined");
  TTestResult r;
  r.t = mean / (sd / std::sqrt(n));
  r.df = n - 1.0;
  r.mean_difference = mean;
  const double cdf = student_t_cdf(r.t, r.df);
  switch (tail) {
    case Tail::Two: r.p = std::min(1.0, 2.0 * std::min(cdf, 1.0 - cdf)); break;
    case Tail::Greater: r.p = 1.0 - cdf; break;
    case Tail::Less: r.p = cdf; break;
  }
  return r;
}

struct RmAnovaResult {
  double f = 0.0;
  double df_treatment = 0.0;
  double df_error = 0.0;
  double ss_total = 0.0, ss_subjects = 0.0, ss_treatment = 0.0, ss_error = 0.0;
  double ms_error = 0.0;
  double p = 1.0;
  std::size_t subjects = 0;
  std::vector<double> means;  // per model
};

/// `table[model][subject]`, one within-subject factor.
inline RmAnovaResult anova_rm(const std::vector<std::vector<double>>& table) {
  const std::size_t m = table.size();
  if (m < 2) fail(ErrorCode::IncompleteTable, "ANOVA needs at least 2 models");
  const std::size_t s = table[0].size();
  if (s < 2) fail(ErrorCode::IncompleteTable, "ANOVA needs at least 2 subjects");
  for (const auto& row : table) {
    if (row.size() != s) fail(ErrorCode::IncompleteTable, "models have different numbers of subjects");
    for (double v : row)
      if (!std::isfinite(v)) fail(ErrorCode::IncompleteTable, "table has missing values");
  }
  RmAnovaResult r;
  r.subjects = s;
  double grand = 0.0;
  r.means.assign(m, 0.0);
  std::vector<double> subj(s, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < s; ++i) {
      r.means[j] += table[j][i] / static_cast<double>(s);
      subj[i] += table[j][i] / static_cast<double>(m);
      grand += table[j][i];
    }
  grand /= static_cast<double>(m * s);
  for (std::size_t j = 0; j < m; ++j) r.ss_treatment += static_cast<double>(s) * std::pow(r.means[j] - grand, 2);
  for (std::size_t i = 0; i < s; ++i) r.ss_subjects += static_cast<double>(m) * std::pow(subj[i] - grand, 2);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < s; ++i) {
      r.ss_total += std::pow(table[j][i] - grand, 2);
      r.ss_error += std::pow(table[j][i] - r.means[j] - subj[i] + grand, 2);
    }
  r.df_treatment = static_cast<double>(m - 1);
  r.df_error = static_cast<double>((m - 1) * (s - 1));
  r.ms_error = r.ss_error / r.df_error;
  const double ms_treatment = r.ss_treatment / r.df_treatment;
  const double scale = std::max(r.ss_total, std::numeric_limits<double>::min());
  if (r.ss_treatment <= 1e-14 * scale) {
    r.f = 0.0;
    r.p = 1.0;
  } else if (r.ss_error <= 1e-14 * scale) {
    r.f = std::numeric_limits<double>::infinity();
    r.p = 0.0;
  } else {
    r.f = ms_treatment / r.ms_error;
    r.p = f_sf(r.f, r.df_treatment, r.df_error);
  }
  return r;
}

struct TukeyPair {
  std::size_t a = 0, b = 0;
  double diff = 0.0;  // mean_a - mean_b
  double q = 0.0;
  double p = 1.0;
  double ci_low = 0.0, ci_high = 0.0;
};

/// Pairwise comparisons with standard error sqrt(MS_error / subjects).
inline std::vector<TukeyPair> tukey_hsd_rm(const RmAnovaResult& r, double alpha = 0.05) {
  const std::size_t m = r.means.size();
  const double se = std::sqrt(r.ms_error / static_cast<double>(r.subjects));
  const double q_crit = studentized_range_quantile(1.0 - alpha, static_cast<int>(m), r.df_error);
  std::vector<TukeyPair> out;
  for (std::size_t a = 0; a < m; ++a)
    for (std::size_t b = a + 1; b < m; ++b) {
      TukeyPair t{a, b, r.means[a] - r.means[b]};
      const double gap = std::abs(t.diff);
      if (se > 0.0) {
        t.q = gap / se;
        t.p = 1.0 - studentized_range_cdf(t.q, static_cast<int>(m), r.df_error);
      } else {
        t.q = gap > 0.0 ? std::numeric_limits<double>::infinity() : 0.0;
        t.p = gap > 0.0 ? 0.0 : 1.0;
      }
      t.p = std::clamp(t.p, 0.0, 1.0);
      t.ci_low = t.diff - q_crit * se;
      t.ci_high = t.diff + q_crit * se;
      out.push_back(t);
    }
  return out;
}

// ---------------------------------------------------------------------------
// Reports over metric records

inline bool lower_is_better(const std::string& metric) {
  if (metric == "MAE" || metric == "RMSE") return true;
  if (metric == "R2" || metric == "Pearson" || metric == "Spearman") return false;
  fail(ErrorCode::Config, "unknown metric '" + metric + "'");
}

inline std::string stars(double p) {
  if (p < 0.001) return "***";
  if (p < 0.01) return "**";
  if (p < 0.05) return "*";
  return "";
}

/// table[model][cell] for one metric, cells aligned on (dataset, split,
/// repeat, fold) and ordered by that key.
inline std::vector<std::vector<double>> metric_table(const std::vector<MetricRecord>& records,
                                                     const std::vector<std::string>& models, const std::string& metric) {
  using Key = std::tuple<std::string, std::string, std::size_t, std::size_t>;
  std::vector<std::map<Key, double>> by_model(models.size());
  std::vector<std::map<Key, bool>> missing(models.size());
  for (const auto& r : records) {
    if (r.metric != metric) continue;
    const auto it = std::find(models.begin(), models.end(), r.model);
    if (it == models.end()) continue;
    const auto j = static_cast<std::size_t>(it - models.begin());
    const Key k{r.dataset, r.split, r.repeat, r.fold};
    if (by_model[j].count(k)) fail(ErrorCode::IncompleteTable, "duplicate record for model " + r.model);
    if (!r.value) fail(ErrorCode::IncompleteTable, "model " + r.model + " has an undefined " + metric + " value");
    by_model[j][k] = *r.value;
  }
  for (std::size_t j = 0; j < models.size(); ++j) {
    if (by_model[j].empty()) fail(ErrorCode::IncompleteTable, "no " + metric + " records for model " + models[j]);
    if (by_model[j].size() != by_model[0].size())
      fail(ErrorCode::IncompleteTable, "models cover different numbers of cells");
  }
  std::vector<std::vector<double>> table(models.size());
  for (const auto& [key, v] : by_model[0]) {
    for (std::size_t j = 0; j < models.size(); ++j) {
      auto it = by_model[j].find(key);
      if (it == by_model[j].end()) fail(ErrorCode::IncompleteTable, "model " + models[j] + " lacks a cell");
      table[j].push_back(it->second);
    }
  }
  return table;
}

struct ModelSummary {
  std::string model;
  double mean = 0.0;
  double ci_low = 0.0, ci_high = 0.0;
};

struct PairwiseEntry {
  std::string a, b;
  double diff = 0.0;
  double q = 0.0;
  double p = 1.0;
  std::string stars;
  std::string better;  // name of the better model, empty on a tie
  std::string direction;  // "<" when a is better, ">" when b is better, "=" otherwise
};

struct SignificanceReport {
  std::string metric;
  std::vector<ModelSummary> models;
  std::optional<RmAnovaResult> anova;
  std::vector<PairwiseEntry> pairwise;
};

inline SignificanceReport significance_report(const std::vector<MetricRecord>& records,
                                              const std::vector<std::string>& models, const std::string& metric) {
  if (models.empty()) fail(ErrorCode::Config, "report needs at least one model");
  const bool lower = lower_is_better(metric);
  const auto table = metric_table(records, models, metric);
  SignificanceReport rep;
  rep.metric = metric;
  for (std::size_t j = 0; j < models.size(); ++j) {
    const auto& v = table[j];
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double x : v) mean += x / n;
    ModelSummary s{models[j], mean, mean, mean};
    if (v.size() >= 2) {
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      const double half = student_t_quantile(0.975, n - 1.0) * std::sqrt(ss / (n - 1.0) / n);
      s.ci_low = mean - half;
      s.ci_high = mean + half;
    }
    rep.models.push_back(s);
  }
  if (models.size() >= 2) {
    rep.anova = anova_rm(table);
    for (const auto& t : tukey_hsd_rm(*rep.anova)) {
      PairwiseEntry e{models[t.a], models[t.b], t.diff, t.q, t.p, stars(t.p), "", "="};
      if (t.diff != 0.0) {
        const bool a_better = lower ? t.diff < 0.0 : t.diff > 0.0;
        e.better = a_better ? e.a : e.b;
        e.direction = a_better ? "<" : ">";
      }
      rep.pairwise.push_back(e);
    }
  }
  return rep;
}

inline nlohmann::json to_json(const SignificanceReport& r) {
  nlohmann::json j;
  j["metric"] = r.metric;
  j["lower_is_better"] = lower_is_better(r.metric);
  j["models"] = nlohmann::json::array();
  j["means"] = nlohmann::json::array();
  j["ci"] = nlohmann::json::array();
  for (const auto& m : r.models) {
    j["models"].push_back(m.model);
    j["means"].push_back(m.mean);
    j["ci"].push_back({m.ci_low, m.ci_high});
  }
  if (r.anova)
    j["anova"] = {{"F", r.anova->f}, {"df_treatment", r.anova->df_treatment}, {"df_error", r.anova->df_error},
                  {"ms_error", r.anova->ms_error}, {"p", r.anova->p}};
  j["pairwise"] = nlohmann::json::array();
  for (const auto& p : r.pairwise)
    j["pairwise"].push_back({{"a", p.a}, {"b", p.b}, {"diff", p.diff}, {"q", p.q}, {"p", p.p},
                             {"stars", p.stars}, {"better", p.better}, {"direction", p.direction}});
  return j;
}

inline std::string to_csv(const SignificanceReport& r) {
  std::ostringstream os;
  os.precision(10);
  os << "kind,metric,a,b,value,ci_low,ci_high,q,p,stars,direction\n";
  for (const auto& m : r.models)
    os << "model," << r.metric << ',' << detail::csv_escape(m.model) << ",," << m.mean << ',' << m.ci_low << ','
       << m.ci_high << ",,,,\n";
  for (const auto& p : r.pairwise)
    os << "pair," << r.metric << ',' << detail::csv_escape(p.a) << ',' << detail::csv_escape(p.b) << ',' << p.diff
       << ",,," << p.q << ',' << p.p << ',' << p.stars << ',' << p.direction << '\n';
  return os.str();
}

}  // namespace molda
