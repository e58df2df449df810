// SPDX-License-Identifier: Apache-2.0
#pragma once

// Descriptor vectors, standard scaling and Morgan-style fingerprints.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "molda/error.hpp"
#include "molda/molgraph.hpp"
#include "molda/rng.hpp"

namespace molda {

// ---------------------------------------------------------------------------
// Descriptors
//
// Reference set, all derived from the molecular graph:
//   mol_weight            sum of standard atomic weights incl. all hydrogens
//                         (an isotope label replaces the weight with the
//                         mass number)
//   heavy_atoms           non-hydrogen atoms
//   count_C/N/O/S         per-element heavy atom counts
//   count_halogen         F + Cl + Br + I
//   bonds                 bonds between heavy atoms
//   rings                 size of the smallest set of smallest rings
//   aromatic_atoms        atoms written aromatic
//   aromatic_rings        rings whose atoms are all aromatic
//   hbond_donors          O or N atoms carrying at least one hydrogen
//   hbond_acceptors       O plus N atom count
//   rotatable_bonds       non-ring single bonds between two heavy atoms that
//                         each have heavy degree >= 2
//   formal_charge         net formal charge
//   fraction_sp3_carbon   carbons with only single bonds / all carbons
//                         (0 without carbon)
//   max_ring_size         largest ring in the ring set (0 if acyclic)

inline const std::vector<std::string>& descriptor_names() {
  static const std::vector<std::string> names{
      "mol_weight",      "heavy_atoms",         "count_C",         "count_N",
      "count_O",         "count_S",             "count_halogen",   "bonds",
      "rings",           "aromatic_atoms",      "aromatic_rings",  "hbond_donors",
      "hbond_acceptors", "rotatable_bonds",     "formal_charge",   "fraction_sp3_carbon",
      "max_ring_size"};
  return names;
}

struct DescriptorVector {
  std::vector<double> values;
  std::vector<std::string> names;
};

inline DescriptorVector compute_descriptors(const Molecule& m) {
  double weight = 0.0;
  int heavy = 0, nc = 0, nn = 0, no = 0, ns = 0, nhal = 0, arom = 0, donors = 0, charge = 0;
  int carbons_sp3 = 0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    const int i = static_cast<int>(k);
    const Atom& a = m.atom(i);
    weight += a.isotope ? static_cast<double>(*a.isotope) : info(a.element).atomic_weight;
    weight += a.hydrogens * info(Element::H).atomic_weight;
    charge += a.formal_charge;
    if (a.element == Element::H) continue;
    ++heavy;
    if (a.aromatic) ++arom;
    switch (a.element) {
      case Element::C: ++nc; break;
      case Element::N: ++nn; break;
      case Element::O: ++no; break;
      case Element::S: ++ns; break;
      default: break;
    }
    if (is_halogen(a.element)) ++nhal;
    if ((a.element == Element::O || a.element == Element::N) && m.total_h(i) > 0) ++donors;
    if (a.element == Element::C && !a.aromatic) {
      bool saturated = true;
      for (const auto& nb : m.neighbors(i))
        if (m.bond(nb.bond).order != BondOrder::Single) saturated = false;
      if (saturated) ++carbons_sp3;
    }
  }
  int heavy_bonds = 0, rotatable = 0;
  for (std::size_t k = 0; k < m.bonds().size(); ++k) {
    const Bond& b = m.bond(static_cast<int>(k));
    if (m.atom(b.a).element == Element::H || m.atom(b.b).element == Element::H) continue;
    ++heavy_bonds;
    if (b.order == BondOrder::Single && !m.bond_in_ring(static_cast<int>(k)) && m.heavy_degree(b.a) >= 2 &&
        m.heavy_degree(b.b) >= 2)
      ++rotatable;
  }
  int aromatic_rings = 0;
  std::size_t max_ring = 0;
  for (const auto& ring : m.rings()) {
    max_ring = std::max(max_ring, ring.size());
    if (std::all_of(ring.begin(), ring.end(), [&](int i) { return m.atom(i).aromatic; })) ++aromatic_rings;
  }
  DescriptorVector d;
  d.names = descriptor_names();
  d.values = {weight,
              static_cast<double>(heavy),
              static_cast<double>(nc),
              static_cast<double>(nn),
              static_cast<double>(no),
              static_cast<double>(ns),
              static_cast<double>(nhal),
              static_cast<double>(heavy_bonds),
              static_cast<double>(m.rings().size()),
              static_cast<double>(arom),
              static_cast<double>(aromatic_rings),
              static_cast<double>(donors),
              static_cast<double>(nn + no),
              static_cast<double>(rotatable),
              static_cast<double>(charge),
              nc > 0 ? static_cast<double>(carbons_sp3) / nc : 0.0,
              static_cast<double>(max_ring)};
  return d;
}

/// Keeps only the named descriptors, in the given order.
inline DescriptorVector select_descriptors(const DescriptorVector& d, const std::vector<std::string>& keep) {
  DescriptorVector out;
  for (const auto& name : keep) {
    auto it = std::find(d.names.begin(), d.names.end(), name);
    if (it == d.names.end()) fail(ErrorCode::Config, "unknown descriptor " + name);
    out.names.push_back(name);
    out.values.push_back(d.values[static_cast<std::size_t>(it - d.names.begin())]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Standard scaling

struct ScalerStats {
  /// Names of the input columns, including dropped ones.
  std::vector<std::string> input_names;
  /// Indices (into the input) of retained columns.
  std::vector<std::size_t> kept;
  /// Indices of zero-variance columns that were dropped.
  std::vector<std::size_t> dropped;
  std::vector<double> mean;  // per retained column
  std::vector<double> std;   // per retained column, population std, > 0

  std::vector<std::string> output_names() const {
    std::vector<std::string> out;
    for (auto k : kept) out.push_back(k < input_names.size() ? input_names[k] : std::to_string(k));
    return out;
  }
};

/// Mean and population standard deviation per column; columns whose std is
/// not positive are dropped.
inline ScalerStats fit_scaler(std::span<const DescriptorVector> rows) {
  if (rows.size() < 2) fail(ErrorCode::InsufficientData, "scaler needs at least 2 rows");
  const std::size_t d = rows[0].values.size();
  ScalerStats s;
  s.input_names = rows[0].names;
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (const auto& r : rows) {
      if (r.values.size() != d) fail(ErrorCode::ShapeMismatch, "descriptor rows differ in width");
      mean += r.values[j];
    }
    mean /= static_cast<double>(rows.size());
    double var = 0.0;
    for (const auto& r : rows) var += (r.values[j] - mean) * (r.values[j] - mean);
    var /= static_cast<double>(rows.size());
    const double sd = std::sqrt(var);
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
      s.dropped.push_back(j);
      continue;
    }
    s.kept.push_back(j);
    s.mean.push_back(mean);
    s.std.push_back(sd);
  }
  return s;
}

inline DescriptorVector apply_scaler(const DescriptorVector& v, const ScalerStats& s) {
  if (!s.input_names.empty() && v.values.size() != s.input_names.size())
    fail(ErrorCode::ShapeMismatch, "descriptor width differs from scaler");
  DescriptorVector out;
  out.names = s.output_names();
  out.values.reserve(s.kept.size());
  for (std::size_t k = 0; k < s.kept.size(); ++k)
    out.values.push_back((v.values[s.kept[k]] - s.mean[k]) / s.std[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Morgan fingerprints
//
// Identifiers are 64-bit. Each combine step feeds the running value through
// splitmix64 (see rng.hpp) after xoring in the next field; the chain starts
// from kFingerprintSeed so the bit layout is fixed across platforms.

inline constexpr std::uint64_t kFingerprintSeed = 0x6d6f6c64612d6670ULL;  // "molda-fp"

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return splitmix64(h ^ (v * 0x9e3779b97f4a7c15ULL + 0x7f4a7c159e3779b9ULL));
}

struct Fingerprint {
  std::vector<std::uint64_t> words;
  std::size_t nbits = 0;
  int radius = 0;

  explicit Fingerprint(std::size_t bits = 2048, int r = 2) : words((bits + 63) / 64, 0), nbits(bits), radius(r) {}

  void set(std::size_t bit) { words[bit / 64] |= std::uint64_t{1} << (bit % 64); }
  bool test(std::size_t bit) const { return (words[bit / 64] >> (bit % 64)) & 1U; }
  std::size_t popcount() const {
    std::size_t c = 0;
    for (auto w : words) c += static_cast<std::size_t>(std::popcount(w));
    return c;
  }
  bool operator==(const Fingerprint&) const = default;
};

/// Initial identifier from (element, heavy degree, charge, H count,
/// aromatic, in ring).
inline std::uint64_t atom_invariant_hash(const Molecule& m, int i) {
  const Atom& a = m.atom(i);
  std::uint64_t h = kFingerprintSeed;
  h = hash_combine(h, static_cast<std::uint64_t>(info(a.element).atomic_number));
  h = hash_combine(h, static_cast<std::uint64_t>(m.heavy_degree(i)));
  h = hash_combine(h, static_cast<std::uint64_t>(static_cast<std::int64_t>(a.formal_charge)));
  h = hash_combine(h, static_cast<std::uint64_t>(m.total_h(i)));
  h = hash_combine(h, a.aromatic ? 1U : 0U);
  h = hash_combine(h, m.in_ring(i) ? 1U : 0U);
  return h;
}

/// Hydrogen atoms present in the graph are folded into their neighbor's H
/// count and do not get identifiers of their own.
inline Fingerprint morgan_fingerprint(const Molecule& m, int radius = 2, std::size_t nbits = 2048) {
  if (nbits == 0) fail(ErrorCode::Config, "fingerprint width must be positive");
  Fingerprint fp(nbits, radius);
  const std::size_t n = m.size();
  std::vector<std::uint64_t> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (m.atom(static_cast<int>(i)).element == Element::H) continue;
    ids[i] = atom_invariant_hash(m, static_cast<int>(i));
    fp.set(ids[i] % nbits);
  }
  for (int round = 1; round <= radius; ++round) {
    std::vector<std::uint64_t> next(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (m.atom(static_cast<int>(i)).element == Element::H) continue;
      std::vector<std::pair<std::uint64_t, std::uint64_t>> env;
      for (const auto& nb : m.neighbors(static_cast<int>(i))) {
        if (m.atom(nb.atom).element == Element::H) continue;
        env.emplace_back(static_cast<std::uint64_t>(m.bond(nb.bond).order), ids[static_cast<std::size_t>(nb.atom)]);
      }
      std::sort(env.begin(), env.end());
      std::uint64_t h = hash_combine(kFingerprintSeed, static_cast<std::uint64_t>(round));
      h = hash_combine(h, ids[i]);
      for (const auto& [order, id] : env) h = hash_combine(hash_combine(h, order), id);
      next[i] = h;
      fp.set(h % nbits);
    }
    ids = std::move(next);
  }
  return fp;
}

inline double tanimoto(const Fingerprint& a, const Fingerprint& b) {
  if (a.nbits != b.nbits) fail(ErrorCode::WidthMismatch, "fingerprint widths differ");
  std::size_t both = 0, either = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) {
    both += static_cast<std::size_t>(std::popcount(a.words[w] & b.words[w]));
    either += static_cast<std::size_t>(std::popcount(a.words[w] | b.words[w]));
  }
  if (either == 0) return 1.0;
  return static_cast<double>(both) / static_cast<double>(either);
}

}  // namespace molda
