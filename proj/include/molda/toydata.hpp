// SPDX-License-Identifier: Apache-2.0
#pragma once

// Seeded generator for the bundled toy corpus and labeled dataset: small
// drug-like molecules assembled from ring scaffolds, linkers and
// substituents, plus a synthetic target computed from reference descriptors.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "molda/features.hpp"
#include "molda/molgraph.hpp"
#include "molda/rng.hpp"

namespace molda {

namespace detail {

struct RingTemplate {
  std::vector<std::string> atoms;
  std::vector<bool> substitutable;
};

inline const std::vector<RingTemplate>& ring_templates() {
  static const std::vector<RingTemplate> rings{
      {{"c", "c", "c", "c", "c", "c"}, {1, 1, 1, 1, 1, 1}},
      {{"c", "c", "n", "c", "c", "c"}, {1, 1, 0, 1, 1, 1}},
      {{"c", "n", "c", "n", "c", "c"}, {1, 0, 1, 0, 1, 1}},
      {{"c", "c", "c", "s", "c"}, {1, 1, 1, 0, 1}},
      {{"c", "c", "c", "o", "c"}, {1, 1, 1, 0, 1}},
      {{"C", "C", "C", "C", "C", "C"}, {1, 1, 1, 1, 1, 1}},
      {{"C", "C", "N", "C", "C", "C"}, {1, 1, 1, 1, 1, 1}},
      {{"N", "C", "C", "O", "C", "C"}, {1, 0, 0, 0, 0, 0}},
      {{"N", "C", "C", "N", "C", "C"}, {1, 0, 0, 1, 0, 0}},
      {{"C", "C", "C", "C", "C"}, {1, 1, 1, 1, 1}},
      {{"C", "C", "C"}, {1, 1, 1}},
  };
  return rings;
}

inline const std::vector<std::string>& substituents() {
  static const std::vector<std::string> subs{
      "C",    "CC",     "CCC",      "C(C)C",  "O",     "OC",   "N",         "NC",        "N(C)C",
      "F",    "Cl",     "Br",       "C(F)(F)F", "C(=O)O", "C(=O)N", "C(=O)OC", "C#N",       "S(=O)(=O)N",
      "CO",   "CCO",    "CN",       "C(=O)C", "OCC",   "NC(=O)C", "S(C)(=O)=O", "C(C)(C)C", "OC(F)(F)F"};
  return subs;
}

inline const std::vector<std::string>& linkers() {
  static const std::vector<std::string> l{"", "C", "CC", "C(=O)N", "NC(=O)", "O", "N", "OC", "CC(=O)N", "S(=O)(=O)N", "CO"};
  return l;
}

inline std::string ring_smiles(const RingTemplate& ring, int label, const std::vector<std::string>& attached) {
  std::string out;
  const std::string digit = std::to_string(label);
  for (std::size_t i = 0; i < ring.atoms.size(); ++i) {
    out += ring.atoms[i];
    if (i == 0 || i + 1 == ring.atoms.size()) out += digit;
    if (!attached[i].empty()) out += "(" + attached[i] + ")";
  }
  return out;
}

// Substituent draws for one member of an analog series: every draw follows
// the series stream except draw number `mutate`, which comes from the member's own.
struct Decoration {
  Rng series;
  Rng member;
  std::size_t mutate;
  std::size_t draws = 0;

  std::size_t below(std::size_t n) {
    const std::size_t a = series.below(n);
    if (draws++ != mutate || n < 2) return a;
    return (a + 1 + member.below(n - 1)) % n;
  }
};

// `shape` fixes rings, linkers and attachment points; `deco` picks the
// substituents. Members of one analog series share `shape`.
inline std::string random_ring(Rng& shape, Decoration& deco, int label, std::size_t max_subs, const std::string& extra) {
  const auto& rings = ring_templates();
  const auto& ring = rings[shape.below(rings.size())];
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < ring.atoms.size(); ++i)
    if (ring.substitutable[i]) open.push_back(i);
  shape.shuffle(open);
  std::vector<std::string> attached(ring.atoms.size());
  std::size_t next = 0;
  if (!extra.empty() && next < open.size()) attached[open[next++]] = extra;
  const std::size_t subs = shape.below(max_subs + 1);
  for (std::size_t k = 0; k < subs && next < open.size(); ++k)
    attached[open[next++]] = substituents()[deco.below(substituents().size())];
  return ring_smiles(ring, label, attached);
}

inline std::string random_chain(Rng& shape, Decoration& deco) {
  std::string out;
  const std::size_t len = 3 + shape.below(6);
  for (std::size_t i = 0; i < len; ++i) {
    out += "C";
    if (shape.uniform() < 0.3) out += "(" + substituents()[deco.below(substituents().size())] + ")";
  }
  out += substituents()[deco.below(substituents().size())];
  return out;
}

inline std::string random_molecule(Rng& shape, Decoration& deco) {
  const double u = shape.uniform();
  if (u < 0.05) return random_chain(shape, deco);
  std::string second;
  if (u >= 0.2) {
    std::string third;
    if (shape.uniform() < 0.3) third = linkers()[shape.below(linkers().size())] + random_ring(shape, deco, 3, 1, "");
    second = linkers()[shape.below(linkers().size())] + random_ring(shape, deco, 2, 2, third);
  }
  return random_ring(shape, deco, 1, 3, second);
}

// Member 0 is the series head; member j > 0 changes one substituent of it.
inline std::string series_member(std::uint64_t series_seed, std::size_t j) {
  auto build = [&](Rng member, std::size_t mutate, std::size_t* draws) {
    Rng shape(series_seed);
    Decoration deco{Rng(derive_seed(series_seed, {0})), std::move(member), mutate};
    std::string out = random_molecule(shape, deco);
    if (draws) *draws = deco.draws;
    return out;
  };
  std::size_t draws = 0;
  const std::string head = build(Rng(0), SIZE_MAX, &draws);
  if (j == 0 || draws == 0) return head;
  Rng member(derive_seed(series_seed, {j}));
  const std::size_t mutate = member.below(draws);
  return build(std::move(member), mutate, nullptr);
}

}  // namespace detail

/// `n` distinct canonical SMILES with 5..100 heavy atoms, drawn as analog
/// series of 4..20 members sharing a scaffold.
inline std::vector<std::string> generate_toy_corpus(std::size_t n, std::uint64_t seed) {
  Rng sizes(seed);
  std::set<std::string> seen;
  std::vector<std::string> out;
  std::size_t attempts = 0;
  for (std::uint64_t series = 0; out.size() < n; ++series) {
    const std::uint64_t series_seed = derive_seed(seed, {series});
    const std::size_t members = 4 + sizes.below(17);
    for (std::size_t j = 0; j < members && out.size() < n; ++j) {
      if (++attempts > 200 * n + 1000) fail(ErrorCode::DegenerateData, "toy generator cannot find enough molecules");
      const std::string smiles = detail::series_member(series_seed, j);
      try {
        const Molecule m = parse_smiles(smiles);
        if (m.heavy_atom_count() < 5 || m.heavy_atom_count() > 100) continue;
        std::string canon = canonical_smiles(m);
        if (seen.insert(canon).second) out.push_back(std::move(canon));
      } catch (const Error&) {
      }
    }
  }
  return out;
}

struct ToyRow {
  std::string smiles;
  double target = 0.0;  // raw value, clipped at the censor limit
  std::string id;
};

struct ToyDataset {
  std::vector<ToyRow> rows;
  double censor_log10 = 0.0;  // rows with log10(target) >= this are censored
};

/// Synthetic solubility-like target: 10^(linear combination of descriptors
/// + gaussian noise), clipped from above at the `censor_quantile` quantile.
inline ToyDataset generate_toy_dataset(std::size_t n, std::uint64_t seed, double noise = 0.15,
                                       double censor_quantile = 0.92) {
  const auto smiles = generate_toy_corpus(n, seed);
  Rng rng(derive_seed(seed, {0x6c6162656c}));
  std::vector<double> logs;
  for (const auto& s : smiles) {
    const auto d = compute_descriptors(parse_smiles(s));
    auto v = [&](const char* name) {
      const auto& names = d.names;
      return d.values[static_cast<std::size_t>(std::find(names.begin(), names.end(), name) - names.begin())];
    };
    const double y = 2.0 - 0.008 * v("mol_weight") + 0.45 * v("hbond_donors") - 0.3 * v("aromatic_rings") -
                     0.25 * v("count_halogen") + 0.12 * v("rotatable_bonds") + 0.8 * v("fraction_sp3_carbon");
    logs.push_back(y + noise * rng.normal());
  }
  auto sorted = logs;
  std::sort(sorted.begin(), sorted.end());
  ToyDataset ds;
  ds.censor_log10 = std::round(sorted[static_cast<std::size_t>(censor_quantile * static_cast<double>(n - 1))] * 100.0) / 100.0;
  for (std::size_t i = 0; i < smiles.size(); ++i) {
    const double clipped = std::min(logs[i], ds.censor_log10);
    char id[32];
    std::snprintf(id, sizeof(id), "TOY%04zu", i);
    ds.rows.push_back({smiles[i], std::pow(10.0, clipped), id});
  }
  return ds;
}

}  // namespace molda
