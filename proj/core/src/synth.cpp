#include "symadit/synth.hpp"

#include <algorithm>

#include "symadit/error.hpp"

namespace symadit {

namespace {

LatticeParams random_lattice(const LatticeClass& lc, std::mt19937_64& rng, const SynthOptions& o) {
  std::uniform_real_distribution<double> len(o.min_length, o.max_length);
  std::uniform_real_distribution<double> ang(75.0, 105.0);
  LatticeParams p{len(rng), len(rng), len(rng), ang(rng), ang(rng), ang(rng)};
  return symmetrize_lattice(lc, p).value;
}

}  // namespace

CrystalASU random_asu(const SymmetryCatalog& catalog, int group, std::mt19937_64& rng, const SynthOptions& o) {
  const SpaceGroup& g = catalog.group(group);
  std::uniform_int_distribution<int> nsites(o.min_sites, o.max_sites);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> pool = o.elements;
  if (pool.empty())
    for (int z = 1; z <= kMaxElement; ++z) pool.push_back(z);
  std::uniform_int_distribution<std::size_t> pick_el(0, pool.size() - 1);

  for (int attempt = 0; attempt < o.max_attempts; ++attempt) {
    CrystalASU asu;
    asu.group = group;
    asu.lattice = random_lattice(g.lattice, rng, o);
    const int target = nsites(rng);
    int atoms = 0;
    std::vector<char> used_fixed;
    for (int tries = 0; static_cast<int>(asu.sites.size()) < target && tries < 20 * target; ++tries) {
      std::vector<const WyckoffPos*> choices;
      for (const auto& w : g.wyckoff) {
        if (atoms + w.multiplicity > o.max_atoms) continue;
        if (w.dof == 0 && std::find(used_fixed.begin(), used_fixed.end(), w.letter) != used_fixed.end()) continue;
        choices.push_back(&w);
      }
      if (choices.empty()) break;
      const WyckoffPos& w = *choices[std::uniform_int_distribution<std::size_t>(0, choices.size() - 1)(rng)];
      const Vec3 f = symmetrize_site(w, {u(rng), u(rng), u(rng)});
      if (orbit_expand(w, f).degenerate) continue;
      AsuSite site{pool[pick_el(rng)], w.letter, f};
      asu.sites.push_back(site);
      const FullCrystal full = expand_asu(asu, catalog).crystal;
      if (min_pairwise_distance(full) < o.min_distance) {
        asu.sites.pop_back();
        continue;
      }
      atoms += w.multiplicity;
      if (w.dof == 0) used_fixed.push_back(w.letter);
    }
    if (static_cast<int>(asu.sites.size()) >= o.min_sites && asu_is_valid(asu, catalog)) return asu;
  }
  throw Error("random_asu: no valid ASU for group " + std::to_string(group) + " after " +
              std::to_string(o.max_attempts) + " attempts");
}

std::vector<CrystalASU> synthetic_dataset(const SymmetryCatalog& catalog, int count, std::uint64_t seed,
                                          const SynthOptions& o) {
  std::vector<int> groups = o.groups;
  if (groups.empty())
    for (int g = 1; g <= SymmetryCatalog::kGroupCount; ++g) groups.push_back(g);
  std::vector<CrystalASU> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(i)};
    std::mt19937_64 rng(seq);
    const int g = groups[std::uniform_int_distribution<std::size_t>(0, groups.size() - 1)(rng)];
    CrystalASU asu = random_asu(catalog, g, rng, o);
    asu.id = "synth-" + std::to_string(i);
    out.push_back(std::move(asu));
  }
  return out;
}

}  // namespace symadit
