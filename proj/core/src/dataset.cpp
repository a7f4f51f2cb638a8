#include "symadit/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <random>
#include <set>

#include "symadit/error.hpp"

namespace symadit {

LabeledStructure structure_from_json(std::string_view line) {
  LabeledStructure out;
  auto& s = out.structure;
  try {
    const auto j = nlohmann::json::parse(line);
    out.group = j.value("sg", 0);
    if (j.contains("matrix")) {
      const auto& m = j["matrix"];
      if (m.size() != 3) throw ParseError("'matrix' must be 3x3", 0);
      for (int r = 0; r < 3; ++r) {
        if (m[r].size() != 3) throw ParseError("'matrix' must be 3x3", 0);
        for (int c = 0; c < 3; ++c) s.lattice(r, c) = m[r][c].get<double>();
      }
    } else {
      const auto& lat = j.at("lat");
      if (lat.size() != 6) throw ParseError("'lat' must have 6 entries", 0);
      LatticeParams p;
      for (int k = 0; k < 6; ++k) p[k] = lat[k].get<double>();
      s.lattice = lattice_matrix(p);
    }
    for (const auto& a : j.at("atoms")) {
      Atom atom;
      const auto& el = a.at("el");
      atom.element = el.is_string() ? element_number(el.get<std::string>()) : el.get<int>();
      if (atom.element < 1 || atom.element > kMaxElement) throw ParseError("unknown element " + el.dump(), 0);
      const auto& f = a.at("f");
      if (f.size() != 3) throw ParseError("atom 'f' must have 3 entries", 0);
      for (int k = 0; k < 3; ++k) atom.frac[k] = f[k].get<double>();
      s.atoms.push_back(atom);
    }
    if (j.contains("id")) s.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("structure record: ") + e.what(), 0);
  }
  return out;
}

std::string structure_to_json(const FullCrystal& s, int group) {
  nlohmann::ordered_json j;
  if (!s.id.empty()) j["id"] = s.id;
  j["sg"] = group;
  j["matrix"] = {{s.lattice(0, 0), s.lattice(0, 1), s.lattice(0, 2)},
                 {s.lattice(1, 0), s.lattice(1, 1), s.lattice(1, 2)},
                 {s.lattice(2, 0), s.lattice(2, 1), s.lattice(2, 2)}};
  auto& atoms = j["atoms"] = nlohmann::ordered_json::array();
  for (const auto& a : s.atoms) atoms.push_back({{"el", a.element}, {"f", a.frac}});
  return j.dump();
}

Split stratified_split(const std::vector<CrystalASU>& data, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction >= 0 && train_fraction <= 1)) throw ValidationError("split fraction must lie in [0, 1]");
  std::map<int, std::vector<std::size_t>> buckets;
  for (std::size_t i = 0; i < data.size(); ++i) buckets[data[i].group].push_back(i);
  std::mt19937_64 rng(seed);
  Split out;
  for (auto& [group, idx] : buckets) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
    for (std::size_t k = 0; k < idx.size(); ++k) (k < n_train ? out.train : out.test).push_back(data[idx[k]]);
  }
  return out;
}

DatasetStats dataset_stats(const std::vector<CrystalASU>& data, const SymmetryCatalog& catalog) {
  DatasetStats st;
  st.records = static_cast<int>(data.size());
  if (data.empty()) return st;
  double tokens = 0, atoms = 0, p1 = 0;
  std::set<int> groups;
  for (const auto& c : data) {
    tokens += c.orbit_count();
    for (const auto& s : c.sites) atoms += catalog.wyckoff(c.group, s.wyckoff).multiplicity;
    p1 += c.group == 1;
    groups.insert(c.group);
  }
  st.mean_tokens = tokens / st.records;
  st.mean_atoms = atoms / st.records;
  st.p1_percent = 100.0 * p1 / st.records;
  st.groups = static_cast<int>(groups.size());
  return st;
}

}  // namespace symadit
