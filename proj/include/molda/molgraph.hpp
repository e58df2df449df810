// SPDX-License-Identifier: Apache-2.0
#pragma once

// Molecular graphs from SMILES: parsing, ring perception, canonical and
// randomized SMILES output, and an isomorphism test.
//
// Grammar subset: organic-subset atoms, bracket atoms (isotope, explicit H,
// charge), bonds - = # : / \, branches, ring closures including %nn.
// Stereo markers are parsed and dropped. Dot-separated fragments are
// rejected. Aromaticity is taken verbatim from lowercase symbols; there is
// no perception and no kekulization.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <queue>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "molda/elements.hpp"
#include "molda/error.hpp"
#include "molda/rng.hpp"

namespace molda {

enum class BondOrder : std::uint8_t { Single = 1, Double = 2, Triple = 3, Aromatic = 4 };

/// Valence units a bond consumes; aromatic bonds count one.
constexpr int valence_units(BondOrder o) {
  return o == BondOrder::Aromatic ? 1 : static_cast<int>(o);
}

struct Atom {
  Element element = Element::C;
  bool aromatic = false;
  int formal_charge = 0;
  /// Set iff the atom was written as a bracket expression.
  std::optional<int> explicit_h;
  std::optional<int> isotope;
  int index = 0;
  /// Attached hydrogens not present as graph atoms (implicit or explicit).
  int hydrogens = 0;
};

struct Bond {
  int a = 0;
  int b = 0;
  BondOrder order = BondOrder::Single;

  int other(int atom) const { return atom == a ? b : a; }
};

class Molecule {
 public:
  struct Neighbor {
    int atom;
    int bond;
  };

  /// Validates valences, assigns hydrogen counts and perceives rings.
  static Molecule build(std::vector<Atom> atoms, std::vector<Bond> bonds);

  const std::vector<Atom>& atoms() const { return atoms_; }
  const std::vector<Bond>& bonds() const { return bonds_; }
  /// Smallest set of smallest rings; each ring is an ordered atom cycle
  /// starting at its lowest index.
  const std::vector<std::vector<int>>& rings() const { return rings_; }
  const std::vector<Neighbor>& neighbors(int atom) const {
    return adjacency_[static_cast<std::size_t>(atom)];
  }

  std::size_t size() const { return atoms_.size(); }
  const Atom& atom(int i) const { return atoms_[static_cast<std::size_t>(i)]; }
  const Bond& bond(int i) const { return bonds_[static_cast<std::size_t>(i)]; }

  int degree(int i) const { return static_cast<int>(neighbors(i).size()); }
  /// Neighbors that are not hydrogen atoms.
  int heavy_degree(int i) const;
  /// Attached hydrogens, counting hydrogen atoms present in the graph.
  int total_h(int i) const;
  bool in_ring(int i) const { return ring_atom_[static_cast<std::size_t>(i)]; }
  bool bond_in_ring(int b) const { return ring_bond_[static_cast<std::size_t>(b)]; }
  std::optional<int> bond_between(int a, int b) const;
  int heavy_atom_count() const;

 private:
  std::vector<Atom> atoms_;
  std::vector<Bond> bonds_;
  std::vector<std::vector<Neighbor>> adjacency_;
  std::vector<std::vector<int>> rings_;
  std::vector<bool> ring_atom_;
  std::vector<bool> ring_bond_;
};

namespace detail {

/// Valence units used by bonds plus the aromatic pi contribution, for an atom
/// that also carries `hydrogens` hydrogens. The pi unit is only counted when
/// it still fits under the largest permitted valence.
inline int used_valence(const Atom& atom, int bond_units, int hydrogens,
                        const std::vector<int>& allowed) {
  int used = bond_units + hydrogens;
  if (atom.aromatic && info(atom.element).pi_uses_valence && !allowed.empty() &&
      used + 1 <= allowed.back())
    ++used;
  return used;
}

/// Implicit hydrogens for an unbracketed atom; nullopt if no valence fits.
inline std::optional<int> organic_implicit_h(const Atom& atom, int bond_units) {
  const auto allowed = allowed_valences(atom.element, atom.formal_charge);
  const int used = used_valence(atom, bond_units, 0, allowed);
  for (int v : allowed)
    if (v >= used) return v - used;
  return std::nullopt;
}

inline std::vector<int> normalize_cycle(std::vector<int> cycle) {
  auto it = std::min_element(cycle.begin(), cycle.end());
  std::rotate(cycle.begin(), it, cycle.end());
  if (cycle.size() > 2 && cycle.back() < cycle[1]) std::reverse(cycle.begin() + 1, cycle.end());
  return cycle;
}

/// Minimum cycle basis from Horton's candidate set: for every vertex v and
/// edge (x, y), the cycle P(v,x) + (x,y) + P(y,v) when both shortest paths
/// meet only at v. Candidates are taken shortest first and kept when linearly
/// independent over GF(2) in edge space.
inline std::vector<std::vector<int>> smallest_rings(
    std::size_t n, const std::vector<Bond>& bonds,
    const std::vector<std::vector<Molecule::Neighbor>>& adj) {
  const std::size_t m = bonds.size();
  if (m + 1 <= n) return {};
  const std::size_t needed = m + 1 - n;  // connected graph

  struct Candidate {
    std::vector<int> atoms;
    std::vector<std::uint64_t> edges;
  };
  const std::size_t words = (m + 63) / 64;
  std::vector<Candidate> candidates;

  for (std::size_t v = 0; v < n; ++v) {
    std::vector<int> parent(n, -1), parent_bond(n, -1), dist(n, -1);
    std::queue<int> q;
    dist[v] = 0;
    q.push(static_cast<int>(v));
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      for (const auto& nb : adj[static_cast<std::size_t>(u)]) {
        auto w = static_cast<std::size_t>(nb.atom);
        if (dist[w] < 0) {
          dist[w] = dist[static_cast<std::size_t>(u)] + 1;
          parent[w] = u;
          parent_bond[w] = nb.bond;
          q.push(nb.atom);
        }
      }
    }
    auto path_to_root = [&](int x) {
      std::vector<int> p;
      while (x >= 0) {
        p.push_back(x);
        x = parent[static_cast<std::size_t>(x)];
      }
      return p;  // x ... v
    };
    for (std::size_t e = 0; e < m; ++e) {
      const int x = bonds[e].a, y = bonds[e].b;
      if (parent_bond[static_cast<std::size_t>(x)] == static_cast<int>(e) ||
          parent_bond[static_cast<std::size_t>(y)] == static_cast<int>(e))
        continue;
      auto px = path_to_root(x);
      auto py = path_to_root(y);
      // Paths must share only the root.
      std::vector<bool> seen(n, false);
      for (int a : px) seen[static_cast<std::size_t>(a)] = true;
      bool disjoint = true;
      for (std::size_t i = 0; i + 1 < py.size(); ++i)
        if (seen[static_cast<std::size_t>(py[i])]) disjoint = false;
      if (!disjoint) continue;
      Candidate c;
      c.edges.assign(words, 0);
      auto add_edge = [&](std::size_t b) { c.edges[b / 64] ^= (std::uint64_t{1} << (b % 64)); };
      // root ... x, then y ... (excluding root)
      std::vector<int> cyc(px.rbegin(), px.rend());
      for (std::size_t i = 0; i + 1 < py.size(); ++i) cyc.push_back(py[i]);
      for (int a : px)
        if (parent_bond[static_cast<std::size_t>(a)] >= 0)
          add_edge(static_cast<std::size_t>(parent_bond[static_cast<std::size_t>(a)]));
      for (std::size_t i = 0; i + 1 < py.size(); ++i)
        add_edge(static_cast<std::size_t>(parent_bond[static_cast<std::size_t>(py[i])]));
      add_edge(e);
      c.atoms = normalize_cycle(std::move(cyc));
      candidates.push_back(std::move(c));
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.atoms.size() != b.atoms.size()) return a.atoms.size() < b.atoms.size();
    return a.atoms < b.atoms;
  });
  candidates.erase(std::unique(candidates.begin(), candidates.end(),
                               [](const Candidate& a, const Candidate& b) { return a.edges == b.edges; }),
                   candidates.end());

  // Gaussian elimination over GF(2); basis rows keyed by pivot bit.
  std::vector<std::vector<std::uint64_t>> basis;
  std::vector<std::size_t> pivots;
  std::vector<std::vector<int>> rings;
  for (auto& c : candidates) {
    if (rings.size() == needed) break;
    auto vec = c.edges;
    for (std::size_t k = 0; k < basis.size(); ++k)
      if (vec[pivots[k] / 64] >> (pivots[k] % 64) & 1U)
        for (std::size_t w = 0; w < words; ++w) vec[w] ^= basis[k][w];
    std::size_t pivot = words * 64;
    for (std::size_t w = 0; w < words && pivot == words * 64; ++w)
      if (vec[w]) pivot = w * 64 + static_cast<std::size_t>(__builtin_ctzll(vec[w]));
    if (pivot == words * 64) continue;
    for (std::size_t k = 0; k < basis.size(); ++k)
      if (basis[k][pivot / 64] >> (pivot % 64) & 1U)
        for (std::size_t w = 0; w < words; ++w) basis[k][w] ^= vec[w];
    basis.push_back(std::move(vec));
    pivots.push_back(pivot);
    rings.push_back(c.atoms);
  }
  return rings;
}

}  // namespace detail

inline Molecule Molecule::build(std::vector<Atom> atoms, std::vector<Bond> bonds) {
  Molecule mol;
  const std::size_t n = atoms.size();
  mol.adjacency_.assign(n, {});
  std::vector<int> units(n, 0);
  for (std::size_t i = 0; i < bonds.size(); ++i) {
    const Bond& b = bonds[i];
    if (b.a == b.b || b.a < 0 || b.b < 0 || static_cast<std::size_t>(b.a) >= n ||
        static_cast<std::size_t>(b.b) >= n)
      fail(ErrorCode::Syntax, "bond endpoints invalid");
    if (b.order == BondOrder::Aromatic &&
        !(atoms[static_cast<std::size_t>(b.a)].aromatic && atoms[static_cast<std::size_t>(b.b)].aromatic))
      fail(ErrorCode::Syntax, "aromatic bond between non-aromatic atoms");
    mol.adjacency_[static_cast<std::size_t>(b.a)].push_back({b.b, static_cast<int>(i)});
    mol.adjacency_[static_cast<std::size_t>(b.b)].push_back({b.a, static_cast<int>(i)});
    units[static_cast<std::size_t>(b.a)] += valence_units(b.order);
    units[static_cast<std::size_t>(b.b)] += valence_units(b.order);
  }
  for (std::size_t i = 0; i < n; ++i) {
    Atom& a = atoms[i];
    a.index = static_cast<int>(i);
    const auto allowed = allowed_valences(a.element, a.formal_charge);
    if (a.explicit_h) {
      a.hydrogens = *a.explicit_h;
      const int used = detail::used_valence(a, units[i], a.hydrogens, allowed);
      if (allowed.empty() || used > allowed.back())
        fail(ErrorCode::ValenceViolation,
             "atom " + std::to_string(i) + " (" + std::string(info(a.element).symbol) + ") uses " +
                 std::to_string(used) + " valence units");
    } else {
      auto h = detail::organic_implicit_h(a, units[i]);
      if (!h)
        fail(ErrorCode::ValenceViolation,
             "atom " + std::to_string(i) + " (" + std::string(info(a.element).symbol) + ") has " +
                 std::to_string(units[i]) + " bond valence units");
      a.hydrogens = *h;
    }
  }
  mol.atoms_ = std::move(atoms);
  mol.bonds_ = std::move(bonds);
  mol.rings_ = detail::smallest_rings(n, mol.bonds_, mol.adjacency_);
  mol.ring_atom_.assign(n, false);
  mol.ring_bond_.assign(mol.bonds_.size(), false);
  for (const auto& ring : mol.rings_) {
    for (std::size_t k = 0; k < ring.size(); ++k) {
      mol.ring_atom_[static_cast<std::size_t>(ring[k])] = true;
      auto b = mol.bond_between(ring[k], ring[(k + 1) % ring.size()]);
      if (b) mol.ring_bond_[static_cast<std::size_t>(*b)] = true;
    }
  }
  return mol;
}

inline int Molecule::heavy_degree(int i) const {
  int d = 0;
  for (const auto& nb : neighbors(i))
    if (atom(nb.atom).element != Element::H) ++d;
  return d;
}

inline int Molecule::total_h(int i) const {
  int h = atom(i).hydrogens;
  for (const auto& nb : neighbors(i))
    if (atom(nb.atom).element == Element::H) ++h;
  return h;
}

inline std::optional<int> Molecule::bond_between(int a, int b) const {
  for (const auto& nb : neighbors(a))
    if (nb.atom == b) return nb.bond;
  return std::nullopt;
}

inline int Molecule::heavy_atom_count() const {
  return static_cast<int>(std::count_if(atoms_.begin(), atoms_.end(),
                                        [](const Atom& a) { return a.element != Element::H; }));
}

// ---------------------------------------------------------------------------
// Parsing

namespace detail {

class SmilesParser {
 public:
  explicit SmilesParser(std::string_view text) : s_(text) {}

  Molecule parse() {
    if (s_.empty()) fail(ErrorCode::Syntax, "empty SMILES");
    while (pos_ < s_.size()) {
      const char c = s_[pos_];
      if (c == '(') {
        if (prev_ < 0) error(ErrorCode::Syntax, "branch before any atom");
        if (pending_) error(ErrorCode::Syntax, "bond before branch open");
        branches_.push_back(prev_);
        ++pos_;
      } else if (c == ')') {
        if (branches_.empty()) error(ErrorCode::UnbalancedBranch, "unmatched ')'");
        if (pending_) error(ErrorCode::Syntax, "dangling bond before ')'");
        prev_ = branches_.back();
        branches_.pop_back();
        ++pos_;
      } else if (c == '-' || c == '=' || c == '#' || c == ':' || c == '/' || c == '\\') {
        if (pending_) error(ErrorCode::Syntax, "consecutive bond symbols");
        if (prev_ < 0) error(ErrorCode::Syntax, "bond before any atom");
        pending_ = c == '=' ? BondOrder::Double
                   : c == '#' ? BondOrder::Triple
                   : c == ':' ? BondOrder::Aromatic
                              : BondOrder::Single;
        ++pos_;
      } else if (c == '.') {
        error(ErrorCode::MultiFragment, "dot-disconnected components are not accepted");
      } else if (std::isdigit(static_cast<unsigned char>(c)) || c == '%') {
        ring_closure();
      } else if (c == '[') {
        add_atom(bracket_atom());
      } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '*') {
        add_atom(organic_atom());
      } else {
        error(ErrorCode::Syntax, std::string("unexpected character '") + c + "'");
      }
    }
    if (!branches_.empty()) fail(ErrorCode::UnbalancedBranch, "unclosed '(' in " + std::string(s_));
    if (!rings_.empty())
      fail(ErrorCode::UnclosedRing,
           "ring bond " + std::to_string(rings_.begin()->first) + " never closed in " + std::string(s_));
    if (pending_) fail(ErrorCode::Syntax, "trailing bond symbol");
    return Molecule::build(std::move(atoms_), std::move(bonds_));
  }

 private:
  struct OpenRing {
    int atom;
    std::optional<BondOrder> order;
  };

  [[noreturn]] void error(ErrorCode code, const std::string& msg) const {
    fail(code, msg + " at position " + std::to_string(pos_) + " in " + std::string(s_));
  }

  BondOrder default_order(int a, int b) const {
    return atoms_[static_cast<std::size_t>(a)].aromatic && atoms_[static_cast<std::size_t>(b)].aromatic
               ? BondOrder::Aromatic
               : BondOrder::Single;
  }

  void add_bond(int a, int b, std::optional<BondOrder> order) {
    if (a == b) error(ErrorCode::Syntax, "ring closure to the same atom");
    for (const Bond& e : bonds_)
      if ((e.a == a && e.b == b) || (e.a == b && e.b == a)) error(ErrorCode::Syntax, "duplicate bond");
    BondOrder o = order.value_or(default_order(a, b));
    if (o == BondOrder::Aromatic && default_order(a, b) != BondOrder::Aromatic)
      error(ErrorCode::Syntax, "aromatic bond between non-aromatic atoms");
    bonds_.push_back({a, b, o});
  }

  void add_atom(Atom atom) {
    const int idx = static_cast<int>(atoms_.size());
    atoms_.push_back(atom);
    if (prev_ >= 0) {
      add_bond(prev_, idx, pending_);
    } else if (idx > 0) {
      error(ErrorCode::MultiFragment, "disconnected atom");
    }
    pending_.reset();
    prev_ = idx;
  }

  void ring_closure() {
    if (prev_ < 0) error(ErrorCode::Syntax, "ring closure before any atom");
    int number;
    if (s_[pos_] == '%') {
      if (pos_ + 2 >= s_.size() || !std::isdigit(static_cast<unsigned char>(s_[pos_ + 1])) ||
          !std::isdigit(static_cast<unsigned char>(s_[pos_ + 2])))
        error(ErrorCode::Syntax, "'%' must be followed by two digits");
      number = (s_[pos_ + 1] - '0') * 10 + (s_[pos_ + 2] - '0');
      pos_ += 3;
    } else {
      number = s_[pos_] - '0';
      ++pos_;
    }
    auto it = rings_.find(number);
    if (it == rings_.end()) {
      rings_.emplace(number, OpenRing{prev_, pending_});
    } else {
      std::optional<BondOrder> order = it->second.order;
      if (pending_) {
        if (order && *order != *pending_) error(ErrorCode::Syntax, "conflicting ring bond orders");
        order = pending_;
      }
      add_bond(it->second.atom, prev_, order);
      rings_.erase(it);
    }
    pending_.reset();
  }

  Atom organic_atom() {
    const char c = s_[pos_];
    Atom a;
    auto two = [&](char second) { return pos_ + 1 < s_.size() && s_[pos_ + 1] == second; };
    if (c == 'C' && two('l')) {
      a.element = Element::Cl;
      pos_ += 2;
      return a;
    }
    if (c == 'B' && two('r')) {
      a.element = Element::Br;
      pos_ += 2;
      return a;
    }
    switch (c) {
      case 'B': a.element = Element::B; break;
      case 'C': a.element = Element::C; break;
      case 'N': a.element = Element::N; break;
      case 'O': a.element = Element::O; break;
      case 'P': a.element = Element::P; break;
      case 'S': a.element = Element::S; break;
      case 'F': a.element = Element::F; break;
      case 'I': a.element = Element::I; break;
      case 'b': a.element = Element::B; a.aromatic = true; break;
      case 'c': a.element = Element::C; a.aromatic = true; break;
      case 'n': a.element = Element::N; a.aromatic = true; break;
      case 'o': a.element = Element::O; a.aromatic = true; break;
      case 'p': a.element = Element::P; a.aromatic = true; break;
      case 's': a.element = Element::S; a.aromatic = true; break;
      default: {
        std::string sym(1, c);
        if (pos_ + 1 < s_.size() && std::islower(static_cast<unsigned char>(s_[pos_ + 1])) &&
            is_periodic_symbol(sym + s_[pos_ + 1]))
          sym += s_[pos_ + 1];
        if (c == '*' || is_periodic_symbol(sym)) error(ErrorCode::UnknownElement, "element '" + sym + "'");
        error(ErrorCode::Syntax, "unexpected character '" + sym + "'");
      }
    }
    ++pos_;
    return a;
  }

  int read_int() {
    int v = 0;
    bool any = false;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) {
      v = v * 10 + (s_[pos_] - '0');
      if (v > 100000) error(ErrorCode::Syntax, "number too large");
      ++pos_;
      any = true;
    }
    if (!any) return -1;
    return v;
  }

  Atom bracket_atom() {
    ++pos_;  // '['
    Atom a;
    a.explicit_h = 0;
    const int isotope = read_int();
    if (isotope == 0) error(ErrorCode::Syntax, "isotope must be positive");
    if (isotope > 0) a.isotope = isotope;
    if (pos_ >= s_.size()) error(ErrorCode::Syntax, "unterminated bracket atom");

    const char c = s_[pos_];
    std::string sym;
    if (c == '*') error(ErrorCode::UnknownElement, "wildcard atom");
    if (std::islower(static_cast<unsigned char>(c))) {
      a.aromatic = true;
      if (pos_ + 1 < s_.size() && std::islower(static_cast<unsigned char>(s_[pos_ + 1]))) {
        std::string cand{static_cast<char>(std::toupper(static_cast<unsigned char>(c))), s_[pos_ + 1]};
        if (cand == "Se" || cand == "As" || cand == "Te") sym = cand;
      }
      if (sym.empty()) sym = std::string(1, static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    } else if (std::isupper(static_cast<unsigned char>(c))) {
      if (pos_ + 1 < s_.size() && std::islower(static_cast<unsigned char>(s_[pos_ + 1])) &&
          is_periodic_symbol(std::string{c, s_[pos_ + 1]}))
        sym = std::string{c, s_[pos_ + 1]};
      else
        sym = std::string(1, c);
    } else {
      error(ErrorCode::Syntax, "expected element symbol");
    }
    pos_ += sym.size();
    auto e = element_from_symbol(sym);
    if (!e) {
      if (is_periodic_symbol(sym)) error(ErrorCode::UnknownElement, "element '" + sym + "'");
      error(ErrorCode::Syntax, "not an element symbol '" + sym + "'");
    }
    a.element = *e;
    if (a.aromatic && !info(a.element).aromatic_allowed)
      error(ErrorCode::UnknownElement, "aromatic '" + sym + "'");

    // chirality
    if (pos_ < s_.size() && s_[pos_] == '@') {
      ++pos_;
      if (pos_ < s_.size() && s_[pos_] == '@') {
        ++pos_;
      } else if (pos_ + 1 < s_.size() && std::isupper(static_cast<unsigned char>(s_[pos_])) &&
                 std::isupper(static_cast<unsigned char>(s_[pos_ + 1]))) {
        pos_ += 2;
        if (read_int() < 0) error(ErrorCode::Syntax, "chirality class needs a number");
      }
    }
    if (pos_ < s_.size() && s_[pos_] == 'H') {
      ++pos_;
      const int h = read_int();
      a.explicit_h = h < 0 ? 1 : h;
    }
    if (pos_ < s_.size() && (s_[pos_] == '+' || s_[pos_] == '-')) {
      const char sign = s_[pos_++];
      int magnitude = read_int();
      if (magnitude < 0) {
        magnitude = 1;
        while (pos_ < s_.size() && s_[pos_] == sign) {
          ++magnitude;
          ++pos_;
        }
      }
      a.formal_charge = sign == '+' ? magnitude : -magnitude;
    }
    if (pos_ < s_.size() && s_[pos_] == ':') {
      ++pos_;
      if (read_int() < 0) error(ErrorCode::Syntax, "atom class needs a number");
    }
    if (pos_ >= s_.size() || s_[pos_] != ']') error(ErrorCode::Syntax, "expected ']'");
    ++pos_;
    return a;
  }

  std::string_view s_;
  std::size_t pos_ = 0;
  std::vector<Atom> atoms_;
  std::vector<Bond> bonds_;
  std::vector<int> branches_;
  std::map<int, OpenRing> rings_;
  std::optional<BondOrder> pending_;
  int prev_ = -1;
};

}  // namespace detail

inline Molecule parse_smiles(std::string_view text) { return detail::SmilesParser(text).parse(); }

// ---------------------------------------------------------------------------
// Writing

namespace detail {

inline std::string atom_token(const Molecule& m, int i) {
  const Atom& a = m.atom(i);
  const ElementInfo& ei = info(a.element);
  int units = 0;
  for (const auto& nb : m.neighbors(i)) units += valence_units(m.bond(nb.bond).order);

  std::string sym(ei.symbol);
  if (a.aromatic) sym[0] = static_cast<char>(std::tolower(static_cast<unsigned char>(sym[0])));

  if (ei.organic_subset && a.formal_charge == 0 && !a.isotope) {
    Atom probe = a;
    probe.explicit_h.reset();
    auto implied = organic_implicit_h(probe, units);
    if (implied && *implied == a.hydrogens) return sym;
  }
  std::string out = "[";
  if (a.isotope) out += std::to_string(*a.isotope);
  out += sym;
  if (a.hydrogens == 1) out += "H";
  if (a.hydrogens > 1) out += "H" + std::to_string(a.hydrogens);
  if (a.formal_charge != 0) {
    out += a.formal_charge > 0 ? '+' : '-';
    const int mag = a.formal_charge > 0 ? a.formal_charge : -a.formal_charge;
    if (mag > 1) out += std::to_string(mag);
  }
  out += "]";
  return out;
}

inline std::string bond_token(const Molecule& m, const Bond& b) {
  switch (b.order) {
    case BondOrder::Single:
      return m.atom(b.a).aromatic && m.atom(b.b).aromatic ? "-" : "";
    case BondOrder::Double: return "=";
    case BondOrder::Triple: return "#";
    case BondOrder::Aromatic: return "";
  }
  return "";
}

inline std::string ring_label(int d) {
  return d < 10 ? std::to_string(d) : "%" + std::to_string(d);
}

/// Depth-first SMILES emission from `start`, visiting neighbors in
/// ascending `priority`.
class SmilesWriter {
 public:
  SmilesWriter(const Molecule& m, const std::vector<std::uint64_t>& priority)
      : m_(m), priority_(priority) {}

  std::string write(int start) {
    const std::size_t n = m_.size();
    visited_.assign(n, false);
    children_.assign(n, {});
    ring_bonds_.assign(n, {});
    tree_bond_.assign(m_.bonds().size(), false);
    ring_seen_.assign(m_.bonds().size(), false);
    discover(start, -1);
    open_.assign(m_.bonds().size(), -1);
    out_.clear();
    emit(start, -1);
    return out_;
  }

 private:
  std::vector<Molecule::Neighbor> ordered(int atom) const {
    auto nbs = m_.neighbors(atom);
    std::sort(nbs.begin(), nbs.end(), [&](const auto& x, const auto& y) {
      return priority_[static_cast<std::size_t>(x.atom)] < priority_[static_cast<std::size_t>(y.atom)];
    });
    return nbs;
  }

  void discover(int atom, int via_bond) {
    visited_[static_cast<std::size_t>(atom)] = true;
    for (const auto& nb : ordered(atom)) {
      if (nb.bond == via_bond) continue;
      if (visited_[static_cast<std::size_t>(nb.atom)]) {
        if (!tree_bond_[static_cast<std::size_t>(nb.bond)] && !ring_seen_[static_cast<std::size_t>(nb.bond)]) {
          ring_seen_[static_cast<std::size_t>(nb.bond)] = true;
          ring_bonds_[static_cast<std::size_t>(atom)].push_back(nb);
          ring_bonds_[static_cast<std::size_t>(nb.atom)].push_back({atom, nb.bond});
        }
        continue;
      }
      tree_bond_[static_cast<std::size_t>(nb.bond)] = true;
      children_[static_cast<std::size_t>(atom)].push_back(nb);
      discover(nb.atom, nb.bond);
    }
  }

  void emit(int atom, int via_bond) {
    if (via_bond >= 0) out_ += bond_token(m_, m_.bond(via_bond));
    out_ += atom_token(m_, atom);
    std::vector<int> to_free;
    auto rbs = ring_bonds_[static_cast<std::size_t>(atom)];
    std::sort(rbs.begin(), rbs.end(), [&](const auto& x, const auto& y) {
      return priority_[static_cast<std::size_t>(x.atom)] < priority_[static_cast<std::size_t>(y.atom)];
    });
    for (const auto& rb : rbs) {
      int& digit = open_[static_cast<std::size_t>(rb.bond)];
      if (digit >= 0) {
        out_ += ring_label(digit);
        to_free.push_back(digit);
      } else {
        digit = allocate();
        out_ += bond_token(m_, m_.bond(rb.bond)) + ring_label(digit);
      }
    }
    for (int d : to_free) in_use_.erase(std::find(in_use_.begin(), in_use_.end(), d));
    const auto& kids = children_[static_cast<std::size_t>(atom)];
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const bool branch = k + 1 < kids.size();
      if (branch) out_ += '(';
      emit(kids[k].atom, kids[k].bond);
      if (branch) out_ += ')';
    }
  }

  int allocate() {
    for (int d = 1; d < 100; ++d)
      if (std::find(in_use_.begin(), in_use_.end(), d) == in_use_.end()) {
        in_use_.push_back(d);
        return d;
      }
    fail(ErrorCode::Syntax, "more than 99 simultaneous ring closures");
  }

  const Molecule& m_;
  const std::vector<std::uint64_t>& priority_;
  std::vector<bool> visited_;
  std::vector<std::vector<Molecule::Neighbor>> children_;
  std::vector<std::vector<Molecule::Neighbor>> ring_bonds_;
  std::vector<bool> tree_bond_;
  std::vector<bool> ring_seen_;
  std::vector<int> open_;
  std::vector<int> in_use_;
  std::string out_;
};

/// Dense ranks of `keys` (equal keys share a rank).
template <class Key>
std::vector<int> dense_ranks(const std::vector<Key>& keys) {
  std::vector<int> order(keys.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return keys[static_cast<std::size_t>(a)] < keys[static_cast<std::size_t>(b)];
  });
  std::vector<int> rank(keys.size(), 0);
  int r = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    if (k > 0 && keys[static_cast<std::size_t>(order[k - 1])] < keys[static_cast<std::size_t>(order[k])]) ++r;
    rank[static_cast<std::size_t>(order[k])] = r;
  }
  return rank;
}

inline int count_classes(const std::vector<int>& rank) {
  return rank.empty() ? 0 : *std::max_element(rank.begin(), rank.end()) + 1;
}

/// Splits classes by sorted (neighbor rank, bond order) lists until stable.
inline std::vector<int> refine(const Molecule& m, std::vector<int> rank) {
  int classes = count_classes(rank);
  while (true) {
    std::vector<std::pair<int, std::vector<std::pair<int, int>>>> keys(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
      std::vector<std::pair<int, int>> nb;
      for (const auto& x : m.neighbors(static_cast<int>(i)))
        nb.emplace_back(rank[static_cast<std::size_t>(x.atom)], static_cast<int>(m.bond(x.bond).order));
      std::sort(nb.begin(), nb.end());
      keys[i] = {rank[i], std::move(nb)};
    }
    auto next = dense_ranks(keys);
    const int next_classes = count_classes(next);
    rank = std::move(next);
    if (next_classes == classes) return rank;
    classes = next_classes;
  }
}

}  // namespace detail

/// Canonical atom ranks: invariant tuple (element, degree, charge, H count,
/// aromatic, isotope), refined by neighborhoods; remaining ties broken by
/// promoting one member of the lowest tied class and refining again.
inline std::vector<int> canonical_ranks(const Molecule& m) {
  using Invariant = std::tuple<int, int, int, int, int, int>;
  std::vector<Invariant> inv(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    const Atom& a = m.atom(static_cast<int>(i));
    inv[i] = {info(a.element).atomic_number, m.degree(static_cast<int>(i)), a.formal_charge,
              m.total_h(static_cast<int>(i)), a.aromatic ? 1 : 0, a.isotope.value_or(0)};
  }
  auto rank = detail::refine(m, detail::dense_ranks(inv));
  while (detail::count_classes(rank) < static_cast<int>(m.size())) {
    std::vector<int> members(static_cast<std::size_t>(detail::count_classes(rank)), 0);
    for (int r : rank) ++members[static_cast<std::size_t>(r)];
    int tied = 0;
    while (members[static_cast<std::size_t>(tied)] < 2) ++tied;
    int chosen = -1;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (rank[i] == tied) {
        chosen = static_cast<int>(i);
        break;
      }
    for (auto& r : rank) r *= 2;
    rank[static_cast<std::size_t>(chosen)] -= 1;
    rank = detail::refine(m, detail::dense_ranks(rank));
  }
  return rank;
}

inline std::string canonical_smiles(const Molecule& m) {
  if (m.size() == 0) return "";
  const auto rank = canonical_ranks(m);
  std::vector<std::uint64_t> priority(rank.begin(), rank.end());
  const int start = static_cast<int>(std::min_element(rank.begin(), rank.end()) - rank.begin());
  return detail::SmilesWriter(m, priority).write(start);
}

/// Randomized SMILES: seeded start atom and seeded neighbor order.
inline std::string enumerate_smiles(const Molecule& m, std::uint64_t seed) {
  if (m.size() == 0) return "";
  Rng rng(seed);
  std::vector<std::uint64_t> priority(m.size());
  std::iota(priority.begin(), priority.end(), 0);
  rng.shuffle(priority);
  const int start = static_cast<int>(rng.below(m.size()));
  return detail::SmilesWriter(m, priority).write(start);
}

/// Backtracking isomorphism test matching element, aromaticity, charge,
/// isotope, hydrogen count and bond orders. Independent of canonical ranks.
inline bool is_isomorphic(const Molecule& x, const Molecule& y) {
  const std::size_t n = x.size();
  if (n != y.size() || x.bonds().size() != y.bonds().size()) return false;
  auto compatible = [&](int i, int j) {
    const Atom& a = x.atom(i);
    const Atom& b = y.atom(j);
    return a.element == b.element && a.aromatic == b.aromatic && a.formal_charge == b.formal_charge &&
           a.isotope == b.isotope && x.total_h(i) == y.total_h(j) && x.degree(i) == y.degree(j);
  };
  if (n == 0) return true;
  // BFS order over x so every atom after the first has a mapped neighbor.
  std::vector<int> order;
  std::vector<bool> seen(n, false);
  order.push_back(0);
  seen[0] = true;
  for (std::size_t k = 0; k < order.size(); ++k)
    for (const auto& nb : x.neighbors(order[k]))
      if (!seen[static_cast<std::size_t>(nb.atom)]) {
        seen[static_cast<std::size_t>(nb.atom)] = true;
        order.push_back(nb.atom);
      }
  if (order.size() != n) return false;

  std::vector<int> map(n, -1), used(n, 0);
  auto consistent = [&](int i, int j) {
    for (const auto& nb : x.neighbors(i)) {
      const int mj = map[static_cast<std::size_t>(nb.atom)];
      if (mj < 0) continue;
      auto b = y.bond_between(j, mj);
      if (!b || y.bond(*b).order != x.bond(nb.bond).order) return false;
    }
    return true;
  };
  auto search = [&](auto&& self, std::size_t k) -> bool {
    if (k == n) return true;
    const int i = order[k];
    std::vector<int> candidates;
    if (k == 0) {
      candidates.resize(n);
      std::iota(candidates.begin(), candidates.end(), 0);
    } else {
      int anchor = -1;
      for (const auto& nb : x.neighbors(i))
        if (map[static_cast<std::size_t>(nb.atom)] >= 0) {
          anchor = map[static_cast<std::size_t>(nb.atom)];
          break;
        }
      for (const auto& nb : y.neighbors(anchor)) candidates.push_back(nb.atom);
    }
    for (int j : candidates) {
      if (used[static_cast<std::size_t>(j)] || !compatible(i, j) || !consistent(i, j)) continue;
      map[static_cast<std::size_t>(i)] = j;
      used[static_cast<std::size_t>(j)] = 1;
      if (self(self, k + 1)) return true;
      map[static_cast<std::size_t>(i)] = -1;
      used[static_cast<std::size_t>(j)] = 0;
    }
    return false;
  };
  return search(search, 0);
}

// ---------------------------------------------------------------------------
// Corpus files: one SMILES per line, no header. Anything after the first
// whitespace on a line is ignored; blank lines are skipped.

inline std::vector<std::string> read_smiles_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::Io, "cannot open corpus " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    std::size_t e = line.find_first_of(" \t\r", b);
    out.push_back(line.substr(b, e == std::string::npos ? std::string::npos : e - b));
  }
  return out;
}

struct CorpusLimits {
  int min_heavy_atoms = 5;
  int max_heavy_atoms = 100;
};

struct CorpusReport {
  std::vector<std::string> accepted;
  /// (line index, reason) for every rejected entry.
  std::vector<std::pair<std::size_t, std::string>> rejected;
};

/// Parses every entry and keeps those within the heavy-atom size window.
inline CorpusReport validate_corpus(const std::vector<std::string>& lines, CorpusLimits limits = {}) {
  CorpusReport report;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    try {
      const Molecule m = parse_smiles(lines[i]);
      const int heavy = m.heavy_atom_count();
      if (heavy < limits.min_heavy_atoms || heavy > limits.max_heavy_atoms) {
        report.rejected.emplace_back(i, "heavy atom count " + std::to_string(heavy) + " outside [" +
                                            std::to_string(limits.min_heavy_atoms) + ", " +
                                            std::to_string(limits.max_heavy_atoms) + "]");
        continue;
      }
      report.accepted.push_back(lines[i]);
    } catch (const Error& e) {
      report.rejected.emplace_back(i, e.what());
    }
  }
  return report;
}

}  // namespace molda
