#include "symadit/evalx.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "symadit/error.hpp"

namespace symadit {

void Histogram::add(int key, double weight) {
  if (!(weight >= 0)) throw ValidationError("Histogram::add: negative weight");
  counts[key] += weight;
  total += weight;
}

double Histogram::probability(int key) const {
  auto it = counts.find(key);
  return it == counts.end() || total <= 0 ? 0.0 : it->second / total;
}

double jsd(const Histogram& p, const Histogram& q) {
  if (!(p.total > 0) || !(q.total > 0)) throw ValidationError("jsd: empty histogram");
  std::set<int> keys;
  for (const auto& [k, _] : p.counts) keys.insert(k);
  for (const auto& [k, _] : q.counts) keys.insert(k);
  auto term = [](double x, double m) { return x > 0 ? x * std::log2(x / m) : 0.0; };
  double sum = 0;
  for (int k : keys) {
    const double pk = p.probability(k), qk = q.probability(k);
    const double m = 0.5 * (pk + qk);
    if (m <= 0) continue;
    sum += 0.5 * term(pk, m) + 0.5 * term(qk, m);
  }
  return std::clamp(sum, 0.0, 1.0);
}

Histogram group_histogram(const std::vector<CrystalASU>& data) {
  Histogram h;
  for (const auto& c : data) h.add(c.group);
  return h;
}

double jsd_groups(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& ref) {
  return jsd(group_histogram(gen), group_histogram(ref));
}

double jsd_wyckoff(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& ref) {
  if (gen.empty() || ref.empty()) throw ValidationError("jsd_wyckoff: empty input");
  auto per_group = [](const std::vector<CrystalASU>& data) {
    std::map<int, Histogram> out;
    for (const auto& c : data) {
      auto& h = out[c.group];
      for (const auto& s : c.sites) h.add(static_cast<unsigned char>(s.wyckoff));
    }
    return out;
  };
  const auto g = per_group(gen), r = per_group(ref);
  std::map<int, int> weight;
  for (const auto& c : gen) ++weight[c.group];

  double num = 0, den = 0;
  for (const auto& [group, w] : weight) {
    const auto gi = g.find(group);
    const auto ri = r.find(group);
    double d = 1.0;
    if (ri != r.end() && ri->second.total > 0 && gi->second.total > 0) d = jsd(gi->second, ri->second);
    num += w * d;
    den += w;
  }
  return num / den;
}

double wasserstein_1(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() || b.empty()) throw ValidationError("wasserstein_1: empty distribution");
  // Masses in units of 1 / (|a| |b|) keep the CDF exact.
  const long long na = static_cast<long long>(a.size()), nb = static_cast<long long>(b.size());
  std::map<int, long long> diff;
  for (int v : a) diff[v] += nb;
  for (int v : b) diff[v] -= na;
  long long cdf = 0, cost = 0;
  for (auto it = diff.begin(); it != diff.end(); ++it) {
    cdf += it->second;
    auto next = std::next(it);
    if (next == diff.end()) break;
    cost += std::llabs(cdf) * (static_cast<long long>(next->first) - it->first);
  }
  return static_cast<double>(cost) / static_cast<double>(na * nb);
}

int conventional_atom_count(const CrystalASU& asu, const SymmetryCatalog& catalog) {
  int n = 0;
  for (const auto& s : asu.sites) n += catalog.wyckoff(asu.group, s.wyckoff).multiplicity;
  return n;
}

double wasserstein_atoms(const std::vector<CrystalASU>& gen, const std::vector<CrystalASU>& ref,
                         const SymmetryCatalog& catalog) {
  auto counts = [&](const std::vector<CrystalASU>& data) {
    std::vector<int> out;
    out.reserve(data.size());
    for (const auto& c : data) out.push_back(conventional_atom_count(c, catalog));
    return out;
  };
  return wasserstein_1(counts(gen), counts(ref));
}

std::map<int, int> reduced_composition(const FullCrystal& s) {
  std::map<int, int> comp;
  for (const auto& a : s.atoms) ++comp[a.element];
  int g = 0;
  for (const auto& [_, n] : comp) g = std::gcd(g, n);
  if (g > 1)
    for (auto& [_, n] : comp) n /= g;
  return comp;
}

// ---------------------------------------------------------------------------
// Matcher

namespace {

struct Prepared {
  Eigen::Matrix3d lattice;  // reduced, rows sorted by length
  std::array<double, 3> lengths{};
  std::array<double, 3> angles{};  // angles[i] between the two axes other than i
  std::vector<Atom> atoms;         // fractional coordinates in `lattice`
  std::map<int, int> composition;
  double volume = 0;
};

Prepared prepare(const FullCrystal& s) {
  Prepared p;
  Eigen::Matrix3d reduced = s.lattice;
  try {
    reduced = niggli_reduce(s.lattice).lattice;
  } catch (const Error&) {
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(),
                   [&](int i, int j) { return reduced.row(i).norm() < reduced.row(j).norm(); });
  for (int i = 0; i < 3; ++i) p.lattice.row(i) = reduced.row(order[i]);

  const LatticeParams lp = lattice_parameters(p.lattice);
  p.lengths = {lp[0], lp[1], lp[2]};
  p.angles = {lp[3], lp[4], lp[5]};
  p.volume = std::abs(p.lattice.determinant());

  const Eigen::Matrix3d to_frac = p.lattice.inverse();
  p.atoms.reserve(s.atoms.size());
  for (const auto& a : s.atoms) {
    const Eigen::RowVector3d cart = Eigen::RowVector3d(a.frac[0], a.frac[1], a.frac[2]) * s.lattice;
    const Eigen::RowVector3d f = cart * to_frac;
    p.atoms.push_back({a.element, wrap01(Vec3{f[0], f[1], f[2]})});
  }
  p.composition = reduced_composition(s);
  return p;
}

double image_distance(const Eigen::Matrix3d& lattice, const Vec3& a, const Vec3& b) {
  Vec3 d;
  for (int k = 0; k < 3; ++k) d[k] = a[k] - b[k] - std::round(a[k] - b[k]);
  double best = std::numeric_limits<double>::infinity();
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = -1; k <= 1; ++k) {
        const Eigen::RowVector3d dv(d[0] + i, d[1] + j, d[2] + k);
        best = std::min(best, (dv * lattice).norm());
      }
  return best;
}

bool sites_match(const Prepared& a, const std::vector<Atom>& b, double threshold) {
  std::map<int, int> count;
  for (const auto& x : a.atoms) ++count[x.element];
  int anchor_element = 0, fewest = std::numeric_limits<int>::max();
  for (const auto& [z, n] : count)
    if (n < fewest) fewest = n, anchor_element = z;
  const auto anchor = std::find_if(a.atoms.begin(), a.atoms.end(), [&](const Atom& x) { return x.element == anchor_element; });

  std::vector<char> used(b.size());
  for (const auto& target : b) {
    if (target.element != anchor_element) continue;
    const Vec3 shift{target.frac[0] - anchor->frac[0], target.frac[1] - anchor->frac[1],
                     target.frac[2] - anchor->frac[2]};
    std::fill(used.begin(), used.end(), 0);
    bool ok = true;
    for (const auto& x : a.atoms) {
      const Vec3 moved{x.frac[0] + shift[0], x.frac[1] + shift[1], x.frac[2] + shift[2]};
      int pick = -1;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < b.size(); ++j) {
        if (used[j] || b[j].element != x.element) continue;
        const double d = image_distance(a.lattice, moved, b[j].frac);
        if (d < best) best = d, pick = static_cast<int>(j);
      }
      if (pick < 0 || best > threshold) {
        ok = false;
        break;
      }
      used[pick] = 1;
    }
    if (ok) return true;
  }
  return false;
}

bool match_one_way(const Prepared& a, const Prepared& b, const MatchParams& params) {
  if (a.atoms.size() != b.atoms.size() || a.atoms.empty()) return false;
  const double threshold = params.stol * std::cbrt(a.volume / static_cast<double>(a.atoms.size()));
  std::array<int, 3> perm{0, 1, 2};
  do {
    bool cell_ok = true;
    for (int i = 0; i < 3 && cell_ok; ++i) {
      cell_ok = std::abs(a.lengths[i] - b.lengths[perm[i]]) <= params.ltol * a.lengths[i] &&
                std::abs(a.angles[i] - b.angles[perm[i]]) <= params.angle_tol;
    }
    if (!cell_ok) continue;
    std::vector<Atom> permuted(b.atoms);
    for (auto& x : permuted) {
      const Vec3 f = x.frac;
      for (int i = 0; i < 3; ++i) x.frac[i] = f[perm[i]];
    }
    if (sites_match(a, permuted, threshold)) return true;
  } while (std::next_permutation(perm.begin(), perm.end()));
  return false;
}

bool match_prepared(const Prepared& a, const Prepared& b, const MatchParams& params) {
  if (a.composition != b.composition) return false;
  return match_one_way(a, b, params) && match_one_way(b, a, params);
}

}  // namespace

bool structure_match(const FullCrystal& a, const FullCrystal& b, const MatchParams& params) {
  return match_prepared(prepare(a), prepare(b), params);
}

UniquenessNovelty uniqueness_and_novelty(const std::vector<FullCrystal>& gen, const std::vector<FullCrystal>& train,
                                         const MatchParams& params, int n_novelty, std::uint64_t seed) {
  UniquenessNovelty out;
  if (gen.empty()) return out;

  std::vector<Prepared> g;
  g.reserve(gen.size());
  for (const auto& s : gen) g.push_back(prepare(s));

  std::map<std::map<int, int>, std::vector<int>> seen;
  for (int i = 0; i < static_cast<int>(g.size()); ++i) {
    auto& bucket = seen[g[i].composition];
    const bool dup = std::any_of(bucket.begin(), bucket.end(), [&](int j) { return match_prepared(g[j], g[i], params); });
    bucket.push_back(i);
    if (!dup) out.unique_indices.push_back(i);
  }
  out.unique_count = static_cast<int>(out.unique_indices.size());
  out.uniqueness = 100.0 * out.unique_count / static_cast<double>(g.size());

  out.novelty_sample = out.unique_indices;
  if (n_novelty < out.unique_count) {
    std::mt19937_64 rng(seed);
    std::shuffle(out.novelty_sample.begin(), out.novelty_sample.end(), rng);
    out.novelty_sample.resize(std::max(0, n_novelty));
  } else {
    out.novelty_truncated = n_novelty > out.unique_count;
  }
  if (out.novelty_sample.empty()) return out;

  std::set<std::map<int, int>> wanted;
  for (int i : out.novelty_sample) wanted.insert(g[i].composition);
  std::map<std::map<int, int>, std::vector<Prepared>> reference;
  for (const auto& s : train) {
    auto comp = reduced_composition(s);
    if (wanted.count(comp)) reference[comp].push_back(prepare(s));
  }
  for (int i : out.novelty_sample) {
    const auto it = reference.find(g[i].composition);
    const bool known = it != reference.end() &&
                       std::any_of(it->second.begin(), it->second.end(),
                                   [&](const Prepared& r) { return match_prepared(g[i], r, params); });
    if (!known) ++out.novel_count;
  }
  out.novelty = 100.0 * out.novel_count / static_cast<double>(out.novelty_sample.size());
  return out;
}

// ---------------------------------------------------------------------------
// Statistics

Summary summarize(const std::vector<double>& values) {
  Summary s;
  if (values.empty()) return s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double var = 0;
  for (double v : values) var += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(var / n);
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  s.min = *lo;
  s.max = *hi;
  return s;
}

bool is_rare_earth(int z) { return z == 21 || z == 39 || (z >= 57 && z <= 71); }

CompositionStats composition_stats(const std::vector<CrystalASU>& data) {
  if (data.empty()) throw ValidationError("composition_stats: empty input");
  CompositionStats out;
  out.structures = static_cast<int>(data.size());
  std::vector<double> unique, orbits;
  double rare_total = 0;
  for (const auto& c : data) {
    std::set<int> elements;
    for (const auto& s : c.sites) elements.insert(s.element);
    const auto rare = std::count_if(elements.begin(), elements.end(), is_rare_earth);
    unique.push_back(static_cast<double>(elements.size()));
    orbits.push_back(c.orbit_count());
    rare_total += static_cast<double>(rare);
    if (rare > 0) ++out.rare_earth_structures;
  }
  out.unique_elements = summarize(unique);
  out.orbits = summarize(orbits);
  out.rare_earth_percent = 100.0 * out.rare_earth_structures / out.structures;
  out.mean_rare_earth_elements = rare_total / out.structures;
  return out;
}

double p1_rate(const std::vector<CrystalASU>& data) {
  if (data.empty()) return 0;
  const auto n = std::count_if(data.begin(), data.end(), [](const CrystalASU& c) { return c.group == 1; });
  return 100.0 * static_cast<double>(n) / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Report

namespace {

nlohmann::json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"min", s.min}, {"max", s.max}};
}

}  // namespace

void to_json(nlohmann::json& j, const GenerationReport& r) {
  j = {{"n_generated", r.n_generated},
       {"n_valid", r.n_valid},
       {"structural_validity_rate", r.structural_validity_rate},
       {"uniqueness", r.uniqueness},
       {"novelty", r.novelty},
       {"novelty_sample", r.novelty_sample},
       {"novelty_truncated", r.novelty_truncated},
       {"un_rate", r.un_rate},
       {"jsd_G", r.jsd_G},
       {"jsd_Wy", r.jsd_Wy},
       {"w_A", r.w_A},
       {"p1_rate", r.p1_rate},
       {"composition",
        {{"structures", r.composition.structures},
         {"unique_elements", summary_json(r.composition.unique_elements)},
         {"rare_earth_structures", r.composition.rare_earth_structures},
         {"rare_earth_percent", r.composition.rare_earth_percent},
         {"mean_rare_earth_elements", r.composition.mean_rare_earth_elements},
         {"orbits", summary_json(r.composition.orbits)}}}};
  if (r.rejections) {
    j["rejections"] = {{"requested", r.rejections->requested},
                       {"rejected_wyckoff", r.rejections->rejected_wyckoff},
                       {"rejected_cell", r.rejections->rejected_cell},
                       {"lattice_clamped", r.rejections->lattice_clamped}};
  }
}

std::string report_table(const GenerationReport& r) {
  char row[256];
  std::ostringstream out;
  out << "| Struct. % | Comp. % | JSD_G  | JSD_Wy | W_A    | % P1   | % U|N  |\n"
      << "|-----------|---------|--------|--------|--------|--------|--------|\n";
  std::snprintf(row, sizeof row, "| %9.2f | %7s | %6.4f | %6.4f | %6.3f | %6.2f | %6.2f |\n",
                r.structural_validity_rate, "n/a", r.jsd_G, r.jsd_Wy, r.w_A, r.p1_rate, r.un_rate);
  out << row << '\n';
  std::snprintf(row, sizeof row, "generated %d, valid %d, uniqueness %.2f%%, novelty %.2f%% of %d%s\n",
                r.n_generated, r.n_valid, r.uniqueness, r.novelty, r.novelty_sample,
                r.novelty_truncated ? " (fewer unique than requested)" : "");
  out << row;
  const auto& c = r.composition;
  std::snprintf(row, sizeof row, "unique elements %.3f +- %.3f [%g, %g], orbits %.3f +- %.3f [%g, %g]\n",
                c.unique_elements.mean, c.unique_elements.std, c.unique_elements.min, c.unique_elements.max,
                c.orbits.mean, c.orbits.std, c.orbits.min, c.orbits.max);
  out << row;
  std::snprintf(row, sizeof row, "rare earth: %d structures (%.2f%%), %.3f elements per structure\n",
                c.rare_earth_structures, c.rare_earth_percent, c.mean_rare_earth_elements);
  out << row;
  if (r.rejections) {
    std::snprintf(row, sizeof row, "rejections: wyckoff %d, cell %d, lattice clamped %d (of %d requested)\n",
                  r.rejections->rejected_wyckoff, r.rejections->rejected_cell, r.rejections->lattice_clamped,
                  r.rejections->requested);
    out << row;
  }
  return out.str();
}

GenerationReport evaluate_generation(const std::vector<CrystalASU>& gen_all, const std::vector<CrystalASU>& train,
                                     const SymmetryCatalog& catalog, const EvalOptions& options) {
  if (gen_all.empty()) throw ValidationError("evaluate: no generated structures");
  if (train.empty()) throw ValidationError("evaluate: empty training set");
  const std::size_t n = std::min<std::size_t>(gen_all.size(), static_cast<std::size_t>(std::max(1, options.max_generated)));
  const std::vector<CrystalASU> gen(gen_all.begin(), gen_all.begin() + static_cast<std::ptrdiff_t>(n));

  GenerationReport r;
  r.n_generated = static_cast<int>(n);
  r.p1_rate = p1_rate(gen);

  std::vector<CrystalASU> valid_asu;
  std::vector<FullCrystal> valid;
  for (const auto& c : gen) {
    try {
      auto full = expand_asu(c, catalog).crystal;
      if (!structural_validity(full)) continue;
      valid_asu.push_back(c);
      valid.push_back(std::move(full));
    } catch (const Error&) {
    }
  }
  r.n_valid = static_cast<int>(valid.size());
  r.structural_validity_rate = 100.0 * r.n_valid / r.n_generated;
  if (valid.empty()) throw ValidationError("evaluate: none of the " + std::to_string(n) + " generated structures is structurally valid");

  std::vector<FullCrystal> train_full;
  train_full.reserve(train.size());
  for (const auto& c : train) train_full.push_back(expand_asu(c, catalog).crystal);

  const auto un = uniqueness_and_novelty(valid, train_full, options.match, options.n_novelty, options.seed);
  r.uniqueness = un.uniqueness;
  r.novelty = un.novelty;
  r.novelty_sample = static_cast<int>(un.novelty_sample.size());
  r.novelty_truncated = un.novelty_truncated;
  r.un_rate = r.structural_validity_rate * un.uniqueness * un.novelty / 1e4;

  r.jsd_G = jsd_groups(valid_asu, train);
  r.jsd_Wy = jsd_wyckoff(valid_asu, train);
  r.w_A = wasserstein_atoms(valid_asu, train, catalog);

  std::vector<CrystalASU> sample;
  for (int i : un.novelty_sample) sample.push_back(valid_asu[i]);
  r.composition = composition_stats(sample);
  return r;
}

}  // namespace symadit
