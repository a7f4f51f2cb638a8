#pragma once
//
// Dataset plumbing for ingestion: structure records, split and summary
// statistics.
//

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "symadit/crystal.hpp"

namespace symadit {

// A full structure with its space-group label, one JSON object per line:
//   {"id": ..., "sg": 225, "lat": [a, b, c, alpha, beta, gamma] | "matrix": [[...], [...], [...]],
//    "atoms": [{"el": 11 | "Na", "f": [x, y, z]}, ...]}
// "sg" is optional (0 when absent).
struct LabeledStructure {
  FullCrystal structure;
  int group = 0;
};

LabeledStructure structure_from_json(std::string_view line);
std::string structure_to_json(const FullCrystal& s, int group);

struct Split {
  std::vector<CrystalASU> train, test;
};

// Records are bucketed by space group; each bucket is shuffled and its first
// round(fraction * size) members go to train, so both sides keep roughly the
// same group distribution. Deterministic in seed.
Split stratified_split(const std::vector<CrystalASU>& data, double train_fraction, std::uint64_t seed);

struct DatasetStats {
  int records = 0;
  double mean_tokens = 0;  // orbits per record
  double mean_atoms = 0;   // conventional cell
  double p1_percent = 0;
  int groups = 0;          // distinct
};

DatasetStats dataset_stats(const std::vector<CrystalASU>& data, const SymmetryCatalog& catalog);

}  // namespace symadit
