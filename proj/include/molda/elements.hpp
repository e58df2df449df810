// SPDX-License-Identifier: Apache-2.0
#pragma once

// Element data for the thirteen elements accepted by the parser.
//
// Atomic weights are the IUPAC conventional / abridged standard atomic
// weights (CIAAW 2021) rounded to the precision commonly printed in
// periodic tables. Valences are the "normal" valences used to derive
// implicit hydrogen counts for unbracketed atoms; the smallest listed value
// that accommodates the explicit bonds is chosen.

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace molda {

enum class Element : std::uint8_t { H, B, C, N, O, F, Si, P, S, Cl, Se, Br, I };

inline constexpr std::size_t kElementCount = 13;

struct ElementInfo {
  Element element;
  std::string_view symbol;
  int atomic_number;
  double atomic_weight;
  std::array<int, 3> valences;
  int valence_count;
  /// Written without brackets when neutral and hydrogen count matches.
  bool organic_subset;
  /// Allowed to be written lowercase (aromatic).
  bool aromatic_allowed;
  /// An aromatic atom of this element donates one electron to the pi system
  /// and so uses one extra valence unit when that still fits its valence.
  /// Chalcogens donate a lone pair instead and use none.
  bool pi_uses_valence;
};

inline constexpr std::array<ElementInfo, kElementCount> kElements{{
    {Element::H, "H", 1, 1.008, {1, 0, 0}, 1, false, false, false},
    {Element::B, "B", 5, 10.81, {3, 0, 0}, 1, true, true, true},
    {Element::C, "C", 6, 12.011, {4, 0, 0}, 1, true, true, true},
    {Element::N, "N", 7, 14.007, {3, 0, 0}, 1, true, true, true},
    {Element::O, "O", 8, 15.999, {2, 0, 0}, 1, true, true, false},
    {Element::F, "F", 9, 18.998, {1, 0, 0}, 1, true, false, false},
    {Element::Si, "Si", 14, 28.085, {4, 0, 0}, 1, false, false, false},
    {Element::P, "P", 15, 30.974, {3, 5, 0}, 2, true, true, true},
    {Element::S, "S", 16, 32.06, {2, 4, 6}, 3, true, true, false},
    {Element::Cl, "Cl", 17, 35.45, {1, 0, 0}, 1, true, false, false},
    {Element::Se, "Se", 34, 78.971, {2, 0, 0}, 1, false, true, false},
    {Element::Br, "Br", 35, 79.904, {1, 0, 0}, 1, true, false, false},
    {Element::I, "I", 53, 126.90, {1, 0, 0}, 1, true, false, false},
}};

constexpr const ElementInfo& info(Element e) { return kElements[static_cast<std::size_t>(e)]; }

inline std::optional<Element> element_from_symbol(std::string_view symbol) {
  for (const auto& e : kElements)
    if (e.symbol == symbol) return e.element;
  return std::nullopt;
}

constexpr bool is_halogen(Element e) {
  return e == Element::F || e == Element::Cl || e == Element::Br || e == Element::I;
}

/// Valences permitted for an atom of element `e` carrying `charge`.
/// Pnictogens, chalcogens and halogens gain a bond per positive charge and
/// lose one per negative charge; carbon-group atoms lose one per unit of
/// either sign; boron gains one per negative charge.
inline std::vector<int> allowed_valences(Element e, int charge) {
  const ElementInfo& ei = info(e);
  std::vector<int> out;
  for (int k = 0; k < ei.valence_count; ++k) {
    int v = ei.valences[static_cast<std::size_t>(k)];
    switch (e) {
      case Element::C:
      case Element::Si:
      case Element::H:
        v -= charge < 0 ? -charge : charge;
        break;
      case Element::B:
        v -= charge;
        break;
      default:
        v += charge;
        break;
    }
    if (v >= 0) out.push_back(v);
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

/// Every element symbol of the periodic table; used only to tell an
/// unsupported-but-real element apart from garbage.
inline constexpr std::array<std::string_view, 118> kPeriodicSymbols{
    "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",
    "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn",
    "Ga", "Ge", "As", "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh",
    "Pd", "Ag", "Cd", "In", "Sn", "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd",
    "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re",
    "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th",
    "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db",
    "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh", "Fl", "Mc", "Lv", "Ts", "Og"};

inline bool is_periodic_symbol(std::string_view s) {
  return std::find(kPeriodicSymbols.begin(), kPeriodicSymbols.end(), s) != kPeriodicSymbols.end();
}

}  // namespace molda
