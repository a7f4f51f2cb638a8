#pragma once
//
// Evaluation of generated crystals: validity, a tolerance-based structure
// matcher for uniqueness and novelty, distribution distances and summary
// statistics, gathered into a report.
//

#include <cstdint>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "symadit/crystal.hpp"

namespace symadit {

struct Histogram {
  std::map<int, double> counts;
  double total = 0;

  void add(int key, double weight = 1.0);
  double probability(int key) const;
};

// Jensen-Shannon divergence, log base 2, over the union support. Throws
// ValidationError when either histogram is empty.
double jsd(const Histogram& p, const Histogram& q);

Histogram group_histogram(const std::vector<CrystalASU>& data);
double jsd_groups(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& ref);

// Per-group JSD of occupied Wyckoff letters (one count per orbit), averaged
// with weights equal to the generated count per group. Groups missing from
// `ref` score 1.
double jsd_wyckoff(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& ref);

// W1 between two empirical integer distributions.
double wasserstein_1(const std::vector<int>& a, const std::vector<int>& b);
// Conventional-cell atom count: sum of orbit multiplicities.
int conventional_atom_count(const CrystalASU& asu, const SymmetryCatalog& catalog);
double wasserstein_atoms(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& ref,
                         const SymmetryCatalog& catalog);

// Element -> count divided by the gcd of all counts.
std::map<int, int> reduced_composition(const FullCrystal& s);

// Composition, then Niggli-reduced sorted cell, then a greedy same-element
// site assignment under anchor translations. Symmetric in a and b.
bool structure_match(const FullCrystal& a, const FullCrystal& b, const MatchParams& params = {});

struct UniquenessNovelty {
  double uniqueness = 0;  // %
  double novelty = 0;     // %
  int unique_count = 0;
  int novel_count = 0;
  std::vector<int> unique_indices;   // into gen, first member of each class
  std::vector<int> novelty_sample;   // into gen
  bool novelty_truncated = false;    // fewer unique structures than requested
};

// `gen` is assumed already filtered to structurally valid structures.
UniquenessNovelty uniqueness_and_novelty(const std::vector<FullCrystal>& gen, const std::vector<FullCrystal>& train,
                                         const MatchParams& params, int n_novelty, std::uint64_t seed);

struct Summary {
  double mean = 0, std = 0, min = 0, max = 0;
};

Summary summarize(const std::vector<double>& values);

bool is_rare_earth(int z);

struct CompositionStats {
  int structures = 0;
  Summary unique_elements;
  int rare_earth_structures = 0;
  double rare_earth_percent = 0;
  double mean_rare_earth_elements = 0;
  Summary orbits;
};

CompositionStats composition_stats(const std::vector<CrystalASU>& data);
double p1_rate(const std::vector<CrystalASU>& data);

struct RejectionCounters {
  int requested = 0;
  int rejected_wyckoff = 0;
  int rejected_cell = 0;
  int lattice_clamped = 0;
};

struct GenerationReport {
  int n_generated = 0;
  int n_valid = 0;
  double structural_validity_rate = 0;
  double uniqueness = 0;
  double novelty = 0;
  int novelty_sample = 0;
  bool novelty_truncated = false;
  double un_rate = 0;  // valid fraction times U times N
  double jsd_G = 0;
  double jsd_Wy = 0;
  double w_A = 0;
  double p1_rate = 0;
  CompositionStats composition;
  std::optional<RejectionCounters> rejections;
};

void to_json(nlohmann::json& j, const GenerationReport& r);
std::string report_table(const GenerationReport& r);

struct EvalOptions {
  MatchParams match;
  int max_generated = 10000;
  int n_novelty = 1000;
  std::uint64_t seed = 0;
};

// Validity on every sample, then uniqueness among the valid ones, novelty on
// a subsample of the unique ones; distribution metrics use the valid set and
// composition statistics the novelty subsample. Throws ValidationError when
// `gen` is empty or nothing is valid.
GenerationReport evaluate_generation(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& train,
                                     const SymmetryCatalog& catalog, const EvalOptions& options = {});

}  // namespace symadit
