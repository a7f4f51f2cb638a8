#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "symadit/error.hpp"
#include "symadit/evalx.hpp"
#include "symadit/synth.hpp"
#include "transport_oracle.hpp"

using namespace symadit;

namespace {

const SymmetryCatalog& cat() { return default_catalog(); }

CrystalASU nacl(double a = 5.65) {
  CrystalASU asu;
  asu.group = 225;
  asu.sites = {{11, 'a', {0, 0, 0}}, {17, 'b', {0.5, 0.5, 0.5}}};
  asu.lattice = {a, a, a, 90, 90, 90};
  return asu;
}

CrystalASU labels(int group, std::string letters) {
  CrystalASU c;
  c.group = group;
  for (char l : letters) c.sites.push_back({6, l, {0, 0, 0}});
  return c;
}

Histogram hist(std::vector<double> w) {
  Histogram h;
  for (std::size_t i = 0; i < w.size(); ++i) h.add(static_cast<int>(i), w[i]);
  return h;
}

// JSD = H(M) - (H(P) + H(Q)) / 2, on probability vectors of equal length.
double jsd_entropy(std::vector<double> p, std::vector<double> q) {
  auto norm = [](std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    for (double& x : v) x /= s;
  };
  norm(p);
  norm(q);
  auto H = [](const std::vector<double>& v) {
    double h = 0;
    for (double x : v)
      if (x > 0) h -= x * std::log2(x);
    return h;
  };
  std::vector<double> m(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) m[i] = 0.5 * (p[i] + q[i]);
  return H(m) - 0.5 * (H(p) + H(q));
}

FullCrystal shifted(FullCrystal s, Vec3 t) {
  for (auto& a : s.atoms)
    for (int k = 0; k < 3; ++k) a.frac[k] = wrap01(a.frac[k] + t[k]);
  return s;
}

FullCrystal shuffled(FullCrystal s, std::mt19937_64& rng) {
  std::shuffle(s.atoms.begin(), s.atoms.end(), rng);
  return s;
}

std::vector<FullCrystal> corpus(int n, std::uint64_t seed) {
  SynthOptions opt;
  opt.max_atoms = 24;
  std::vector<FullCrystal> out;
  for (const auto& asu : synthetic_dataset(cat(), n, seed, opt)) out.push_back(expand_asu(asu, cat()).crystal);
  return out;
}

}  // namespace

TEST_CASE("jsd examples") {
  CHECK(jsd(hist({1, 2, 3}), hist({1, 2, 3})) == 0.0);
  Histogram a, b;
  a.add(1, 3);
  b.add(2, 5);
  CHECK(jsd(a, b) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(jsd(hist({1, 0}), hist({0.5, 0.5})) == doctest::Approx(0.31128).epsilon(1e-4));
  CHECK(jsd(hist({1, 0}), hist({0.5, 0.5})) == doctest::Approx(jsd_entropy({1, 0}, {0.5, 0.5})).epsilon(1e-12));
  CHECK_THROWS_AS(jsd(Histogram{}, hist({1})), ValidationError);
}

TEST_CASE("property: jsd symmetric, bounded, matches entropy form") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 1 + trial % 7;
    std::vector<double> p(k), q(k);
    for (int i = 0; i < k; ++i) {
      p[i] = u(rng) < 0.3 ? 0 : u(rng);
      q[i] = u(rng) < 0.3 ? 0 : u(rng);
    }
    p[0] += 0.1;
    q[k - 1] += 0.1;
    const double d = jsd(hist(p), hist(q));
    CHECK(d == jsd(hist(q), hist(p)));
    CHECK(d >= 0);
    CHECK(d <= 1);
    CHECK(d == doctest::Approx(jsd_entropy(p, q)).epsilon(1e-10));
    CHECK(jsd(hist(p), hist(p)) == doctest::Approx(0).epsilon(1e-15));
  }
}

TEST_CASE("jsd_groups and jsd_wyckoff") {
  std::vector<CrystalASU> data = {nacl(), labels(221, "ab"), labels(1, "aaa")};
  CHECK(jsd_groups(data, data) == 0.0);
  CHECK(jsd_wyckoff(data, data) == 0.0);

  SUBCASE("labels only") {
    auto moved = data;
    moved[0].sites[0].frac = {0.3, 0.1, 0.2};
    moved[0].lattice = {9, 9, 9, 90, 90, 90};
    CHECK(jsd_wyckoff(moved, data) == 0.0);
  }
  SUBCASE("two groups by hand") {
    // 225: gen a:2 b:1, ref a:1 b:1; 221: gen only, scores 1.
    std::vector<CrystalASU> gen = {labels(225, "ab"), labels(225, "a"), labels(221, "a")};
    std::vector<CrystalASU> ref = {labels(225, "ab"), labels(1, "a")};
    const double want = (2 * jsd_entropy({2, 1}, {1, 1}) + 1 * 1.0) / 3;
    CHECK(jsd_wyckoff(gen, ref) == doctest::Approx(want).epsilon(1e-12));
  }
  SUBCASE("weights are generated counts") {
    std::vector<CrystalASU> gen = {labels(225, "a"), labels(225, "a"), labels(225, "a"), labels(221, "b")};
    std::vector<CrystalASU> ref = {labels(225, "a"), labels(221, "a")};
    CHECK(jsd_wyckoff(gen, ref) == doctest::Approx(0.25).epsilon(1e-12));
  }
  CHECK_THROWS_AS(jsd_wyckoff({}, data), ValidationError);
}

TEST_CASE("wasserstein examples") {
  CHECK(wasserstein_1({3, 5, 5}, {5, 3, 5}) == 0.0);
  CHECK(wasserstein_1({8}, {12}) == 4.0);
  CHECK(wasserstein_1({8, 8}, {12}) == 4.0);
  CHECK(wasserstein_1({0, 2}, {1}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(wasserstein_1({}, {1}), ValidationError);
  CHECK(conventional_atom_count(nacl(), cat()) == 8);
  CHECK(wasserstein_atoms({nacl()}, {labels(221, "ab")}, cat()) == 6.0);
}

TEST_CASE("property: wasserstein equals LP transport cost") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> size(1, 10), value(1, 40);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> a(size(rng)), b(size(rng));
    for (int& v : a) v = value(rng);
    for (int& v : b) v = value(rng);
    CHECK(wasserstein_1(a, b) == doctest::Approx(oracle::transport_cost(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("property: wasserstein triangle inequality and shift") {
  std::mt19937_64 rng(12);
  std::uniform_int_distribution<int> size(1, 12), value(0, 60);
  auto draw = [&] {
    std::vector<int> v(size(rng));
    for (int& x : v) x = value(rng);
    return v;
  };
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = draw(), b = draw(), c = draw();
    CHECK(wasserstein_1(a, c) <= wasserstein_1(a, b) + wasserstein_1(b, c) + 1e-12);
    auto moved = a;
    const int k = trial % 9;
    for (int& x : moved) x += k;
    CHECK(wasserstein_1(a, moved) == doctest::Approx(k));
  }
}

TEST_CASE("structure_match examples") {
  const FullCrystal s = expand_asu(nacl(), cat()).crystal;
  CHECK(structure_match(s, s));
  CHECK(structure_match(s, shifted(s, {0.25, 0.1, 0.6})));
  CHECK_FALSE(structure_match(s, expand_asu(nacl(7.50), cat()).crystal));
  CHECK(structure_match(s, expand_asu(nacl(5.9), cat()).crystal));

  SUBCASE("composition") {
    auto kcl = s;
    for (auto& a : kcl.atoms)
      if (a.element == 11) a.element = 19;
    CHECK_FALSE(structure_match(s, kcl));
  }
  SUBCASE("site tolerance") {
    // stol 0.3 of (V/8)^(1/3) = 0.3 * 2.825 = 0.8475 Angstrom.
    auto near = s, far = s;
    near.atoms[0].frac[0] += 0.8 / 5.65;
    far.atoms[0].frac[0] += 0.9 / 5.65;
    CHECK(structure_match(s, near));
    CHECK_FALSE(structure_match(s, far));
  }
  SUBCASE("angle tolerance") {
    FullCrystal a = s, b = s;
    b.lattice = lattice_matrix({5.65, 5.65, 5.65, 90, 90, 98});
    CHECK(structure_match(a, b));
    b.lattice = lattice_matrix({5.65, 5.65, 5.65, 90, 90, 103});
    CHECK_FALSE(structure_match(a, b));
  }
  SUBCASE("supercell does not match") {
    FullCrystal big;
    big.lattice = s.lattice;
    big.lattice.row(0) *= 2;
    for (const auto& a : s.atoms) {
      big.atoms.push_back({a.element, {a.frac[0] / 2, a.frac[1], a.frac[2]}});
      big.atoms.push_back({a.element, {a.frac[0] / 2 + 0.5, a.frac[1], a.frac[2]}});
    }
    CHECK_FALSE(structure_match(s, big));
  }
}

TEST_CASE("property: matcher on a randomized corpus") {
  const auto structures = corpus(100, 77);
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (const auto& s : structures) {
    CHECK(structure_match(s, s));
    CHECK(structure_match(s, shifted(s, {u(rng), u(rng), u(rng)})));
    CHECK(structure_match(s, shuffled(s, rng)));
    CHECK(structure_match(shuffled(s, rng), shifted(s, {0.25, 0.1, 0.6})));
  }
  int matches = 0;
  for (std::size_t i = 0; i < 40; ++i)
    for (std::size_t j = i + 1; j < 40; ++j) {
      const bool ab = structure_match(structures[i], structures[j]);
      CHECK(ab == structure_match(structures[j], structures[i]));
      matches += ab;
    }
  CHECK(matches < 5);
}

TEST_CASE("uniqueness and novelty") {
  const FullCrystal s = expand_asu(nacl(), cat()).crystal;
  SUBCASE("k identical") {
    std::vector<FullCrystal> gen(4, s);
    const auto r = uniqueness_and_novelty(gen, {s}, {}, 1000, 1);
    CHECK(r.uniqueness == doctest::Approx(25.0));
    CHECK(r.unique_count == 1);
    CHECK(r.novelty == 0.0);
    CHECK(r.novelty_truncated);
  }
  SUBCASE("disjoint compositions are novel") {
    const auto gen = corpus(20, 5);
    const auto r = uniqueness_and_novelty(gen, {s}, {}, 1000, 1);
    CHECK(r.novelty == doctest::Approx(100.0));
  }
  SUBCASE("train subset is not novel") {
    const auto train = corpus(30, 6);
    const std::vector<FullCrystal> gen(train.begin() + 5, train.begin() + 15);
    const auto r = uniqueness_and_novelty(gen, train, {}, 1000, 1);
    CHECK(r.novelty == 0.0);
  }
  SUBCASE("subsample") {
    const auto gen = corpus(20, 8);
    const auto r = uniqueness_and_novelty(gen, {}, {}, 5, 9);
    CHECK(r.novelty_sample.size() == 5);
    CHECK_FALSE(r.novelty_truncated);
    CHECK(r.novelty_sample == uniqueness_and_novelty(gen, {}, {}, 5, 9).novelty_sample);
  }
}

TEST_CASE("property: unique count invariant under permutation") {
  const auto base = corpus(25, 21);
  std::mt19937_64 rng(4);
  std::vector<FullCrystal> gen;
  for (std::size_t i = 0; i < base.size(); ++i) {
    gen.push_back(base[i]);
    for (std::size_t c = 0; c < i % 3; ++c) gen.push_back(shifted(shuffled(base[i], rng), {0.1 * c, 0.3, 0.7}));
  }
  const int count = uniqueness_and_novelty(gen, {}, {}, 0, 0).unique_count;
  CHECK(count <= 25);
  CHECK(count >= 20);
  for (int trial = 0; trial < 5; ++trial) {
    std::shuffle(gen.begin(), gen.end(), rng);
    CHECK(uniqueness_and_novelty(gen, {}, {}, 0, 0).unique_count == count);
  }
}

TEST_CASE("composition stats and p1") {
  const std::vector<CrystalASU> salts(5, nacl());
  const auto st = composition_stats(salts);
  CHECK(st.unique_elements.mean == 2.0);
  CHECK(st.unique_elements.std == 0.0);
  CHECK(st.orbits.mean == 2.0);
  CHECK(st.rare_earth_structures == 0);

  auto la = nacl();
  la.sites[0].element = 57;
  CHECK(is_rare_earth(57));
  CHECK(is_rare_earth(21));
  CHECK(is_rare_earth(39));
  CHECK(is_rare_earth(71));
  CHECK_FALSE(is_rare_earth(72));
  CHECK_FALSE(is_rare_earth(56));
  const auto mixed = composition_stats({la, nacl()});
  CHECK(mixed.rare_earth_structures == 1);
  CHECK(mixed.rare_earth_percent == 50.0);
  CHECK(mixed.mean_rare_earth_elements == 0.5);
  CHECK_THROWS_AS(composition_stats({}), ValidationError);

  CHECK(p1_rate(salts) == 0.0);
  CHECK(p1_rate({labels(1, "a"), labels(1, "a")}) == 100.0);
  CHECK(p1_rate({labels(1, "a"), nacl(), nacl(), nacl()}) == 25.0);
}

TEST_CASE("evaluate pipeline") {
  SynthOptions opt;
  opt.max_atoms = 24;
  const auto train = synthetic_dataset(cat(), 40, 31, opt);

  SUBCASE("generated subset of train") {
    const std::vector<CrystalASU> gen(train.begin(), train.begin() + 20);
    const auto r = evaluate_generation(gen, train, cat());
    CHECK(r.n_generated == 20);
    CHECK(r.structural_validity_rate == 100.0);
    CHECK(r.novelty == 0.0);
    CHECK(r.un_rate == 0.0);
    nlohmann::json j = r;
    CHECK(j["n_generated"] == 20);
    CHECK(report_table(r).find("JSD_Wy") != std::string::npos);
  }
  SUBCASE("generated equals train") {
    const auto r = evaluate_generation(train, train, cat());
    CHECK(r.jsd_G == 0.0);
    CHECK(r.jsd_Wy == 0.0);
    CHECK(r.w_A == 0.0);
  }
  SUBCASE("two-group hand oracle") {
    // gen: two NaCl and one CsCl-like 221 (a+b); train: one NaCl.
    CrystalASU cscl;
    cscl.group = 221;
    cscl.sites = {{55, 'a', {0, 0, 0}}, {17, 'b', {0.5, 0.5, 0.5}}};
    cscl.lattice = {4.1, 4.1, 4.1, 90, 90, 90};
    const std::vector<CrystalASU> gen = {nacl(), nacl(), cscl};
    const auto r = evaluate_generation(gen, {nacl()}, cat());
    CHECK(r.n_valid == 3);
    CHECK(r.uniqueness == doctest::Approx(200.0 / 3));
    CHECK(r.novelty == doctest::Approx(50.0));
    CHECK(r.jsd_G == doctest::Approx(jsd_entropy({2, 1}, {1, 0})).epsilon(1e-12));
    CHECK(r.jsd_Wy == doctest::Approx(1.0 / 3));
    CHECK(r.w_A == doctest::Approx(2.0));
    CHECK(r.p1_rate == 0.0);
  }
  SUBCASE("all invalid") {
    CrystalASU bad;
    bad.group = 1;
    bad.sites = {{6, 'a', {0, 0, 0}}, {6, 'a', {0.01, 0, 0}}};
    bad.lattice = {5, 5, 5, 90, 90, 90};
    CHECK_THROWS_AS(evaluate_generation({bad}, train, cat()), ValidationError);
    CHECK_THROWS_AS(evaluate_generation({}, train, cat()), ValidationError);
  }
}
