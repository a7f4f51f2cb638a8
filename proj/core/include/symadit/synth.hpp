#pragma once
//
// Random valid asymmetric units drawn directly from the catalog. Used for
// property tests and for the desk-scale synthetic training corpus.
//

#include <cstdint>
#include <random>
#include <vector>

#include "symadit/crystal.hpp"

namespace symadit {

struct SynthOptions {
  int min_sites = 1;
  int max_sites = 4;
  int max_atoms = 48;  // conventional-cell atom budget
  double min_length = 3.0;
  double max_length = 8.0;
  double min_distance = 1.0;  // Angstrom, checked on the expanded cell
  std::vector<int> elements;  // empty: 1..kMaxElement
  std::vector<int> groups;    // empty: all 230
  int max_attempts = 200;
};

// Throws Error if no valid ASU was found within max_attempts.
CrystalASU random_asu(const SymmetryCatalog& catalog, int group, std::mt19937_64& rng, const SynthOptions& options = {});

// `count` ASUs with groups drawn uniformly from options.groups; record i
// comes from its own stream so the corpus is stable under count changes.
std::vector<CrystalASU> synthetic_dataset(const SymmetryCatalog& catalog, int count, std::uint64_t seed,
                                          const SynthOptions& options = {});

}  // namespace symadit
