// SPDX-License-Identifier: Apache-2.0
#pragma once

// Central finite-difference checks of analytic gradients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "molda/rng.hpp"
#include "molda/tensor.hpp"

namespace molda {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Lower bound on the relative-error denominator, so entries whose true
  /// gradient is ~0 are judged on absolute error.
  double floor = 1e-6;
  /// Entries probed per tensor; 0 probes every entry.
  std::size_t entries_per_tensor = 0;
  /// Random directional-derivative probes per tensor.
  std::size_t directions = 0;
  std::uint64_t seed = 0;
};

struct TensorCheck {
  std::string name;
  std::size_t probes = 0;
  double max_rel_error = 0.0;
  double analytic = 0.0;  // values at the worst probe
  double numeric = 0.0;
};

struct GradCheckReport {
  std::vector<TensorCheck> tensors;
  double max_rel_error = 0.0;
  bool passed = true;
};

inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

/// `loss(params)` must be deterministic. `params` is perturbed in place and
/// restored.
template <class F>
GradCheckReport check_gradients(F&& loss, ParamSet<double>& params, const ParamSet<double>& grads,
                                const GradCheckOptions& opt = {}) {
  GradCheckReport report;
  Rng rng(opt.seed);
  for (std::size_t t = 0; t < params.count(); ++t) {
    auto& p = params.at(t).data;
    const auto& g = grads[params.name(t)].data;
    TensorCheck tc;
    tc.name = params.name(t);
    auto record = [&](double a, double n) {
      const double e = relative_error(a, n, opt.floor);
      ++tc.probes;
      if (e >= tc.max_rel_error) {
        tc.max_rel_error = e;
        tc.analytic = a;
        tc.numeric = n;
      }
    };
    std::vector<std::size_t> entries;
    if (opt.entries_per_tensor == 0 || opt.entries_per_tensor >= p.size()) {
      entries.resize(p.size());
      for (std::size_t k = 0; k < p.size(); ++k) entries[k] = k;
    } else {
      for (std::size_t k = 0; k < opt.entries_per_tensor; ++k) entries.push_back(rng.below(p.size()));
    }
    for (std::size_t k : entries) {
      const double saved = p[k];
      p[k] = saved + opt.step;
      const double up = loss(params);
      p[k] = saved - opt.step;
      const double down = loss(params);
      p[k] = saved;
      record(g[k], (up - down) / (2.0 * opt.step));
    }
    for (std::size_t r = 0; r < opt.directions; ++r) {
      std::vector<double> dir(p.size());
      double norm = 0.0;
      for (auto& v : dir) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      double analytic = 0.0;
      for (std::size_t k = 0; k < p.size(); ++k) {
        dir[k] /= norm;
        analytic += g[k] * dir[k];
      }
      const auto saved = p;
      for (std::size_t k = 0; k < p.size(); ++k) p[k] = saved[k] + opt.step * dir[k];
      const double up = loss(params);
      for (std::size_t k = 0; k < p.size(); ++k) p[k] = saved[k] - opt.step * dir[k];
      const double down = loss(params);
      p = saved;
      record(analytic, (up - down) / (2.0 * opt.step));
    }
    report.max_rel_error = std::max(report.max_rel_error, tc.max_rel_error);
    if (tc.max_rel_error > opt.tolerance) report.passed = false;
    report.tensors.push_back(std::move(tc));
  }
  return report;
}

}  // namespace molda
