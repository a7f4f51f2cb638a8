#include <doctest.h>

#include <map>

#include "symadit/dataset.hpp"
#include "symadit/error.hpp"
#include "symadit/synth.hpp"

using namespace symadit;

namespace {
const SymmetryCatalog& cat() { return default_catalog(); }
}  // namespace

TEST_CASE("structure records") {
  CrystalASU nacl;
  nacl.group = 225;
  nacl.sites = {{11, 'a', {0, 0, 0}}, {17, 'b', {0.5, 0.5, 0.5}}};
  nacl.lattice = {5.65, 5.65, 5.65, 90, 90, 90};
  FullCrystal s = expand_asu(nacl, cat()).crystal;
  s.id = "x1";

  const LabeledStructure back = structure_from_json(structure_to_json(s, 225));
  CHECK(back.group == 225);
  CHECK(back.structure.id == "x1");
  CHECK(back.structure.atom_count() == 8);
  CHECK((back.structure.lattice - s.lattice).norm() == 0.0);
  CHECK(assign_wyckoff(back.structure, 225, cat()).sites == nacl.sites);

  const auto sym = structure_from_json(R"({"lat":[4,4,4,90,90,90],"atoms":[{"el":"Fe","f":[0,0,0]}]})");
  CHECK(sym.group == 0);
  CHECK(sym.structure.atoms[0].element == 26);
  CHECK_THROWS_AS(structure_from_json(R"({"lat":[4,4,4,90,90,90],"atoms":[{"el":"Qq","f":[0,0,0]}]})"), ParseError);
  CHECK_THROWS_AS(structure_from_json(R"({"lat":[4,4,90,90,90],"atoms":[]})"), ParseError);
  CHECK_THROWS_AS(structure_from_json("nope"), ParseError);
}

TEST_CASE("stratified split") {
  SynthOptions opt;
  opt.groups = {1, 2, 225, 221};
  const auto data = synthetic_dataset(cat(), 200, 7, opt);
  const Split s = stratified_split(data, 0.8, 3);
  CHECK(s.train.size() + s.test.size() == data.size());

  std::map<int, int> all, train;
  for (const auto& c : data) ++all[c.group];
  for (const auto& c : s.train) ++train[c.group];
  for (const auto& [g, n] : all) CHECK(train[g] == static_cast<int>(std::llround(0.8 * n)));

  const Split again = stratified_split(data, 0.8, 3);
  REQUIRE(again.train.size() == s.train.size());
  for (std::size_t i = 0; i < s.train.size(); ++i) CHECK(again.train[i].id == s.train[i].id);
  CHECK(stratified_split(data, 1.0, 0).test.empty());
  CHECK_THROWS_AS(stratified_split(data, 1.5, 0), ValidationError);
}

TEST_CASE("dataset stats") {
  CrystalASU p1;
  p1.group = 1;
  p1.sites = {{6, 'a', {0.1, 0.2, 0.3}}};
  p1.lattice = {4, 4, 4, 90, 90, 90};
  CrystalASU nacl;
  nacl.group = 225;
  nacl.sites = {{11, 'a', {0, 0, 0}}, {17, 'b', {0.5, 0.5, 0.5}}};
  nacl.lattice = {5.65, 5.65, 5.65, 90, 90, 90};
  const auto st = dataset_stats({p1, nacl, nacl, nacl}, cat());
  CHECK(st.records == 4);
  CHECK(st.mean_tokens == doctest::Approx(7.0 / 4));
  CHECK(st.mean_atoms == doctest::Approx(25.0 / 4));
  CHECK(st.p1_percent == 25.0);
  CHECK(st.groups == 2);
}
