#include "symadit/crystal.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>

#include "symadit/error.hpp"

namespace symadit {

namespace {

constexpr std::array<std::string_view, kMaxElement + 1> kElements = {
    "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na", "Mg", "Al", "Si", "P",  "S",
    "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",  "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y",  "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In", "Sn",
    "Sb", "Te", "I",  "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb", "Dy", "Ho",
    "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W",  "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl", "Pb", "Bi", "Po",
    "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U",  "Np", "Pu", "Am", "Cm", "Bk", "Cf", "Es", "Fm"};

// cos of an angle in degrees, exact for the angles lattice classes fix.
double cos_deg(double deg) {
  if (deg == 90.0) return 0.0;
  if (deg == 120.0) return -0.5;
  if (deg == 60.0) return 0.5;
  return std::cos(deg * M_PI / 180.0);
}

double sin_deg(double deg) {
  if (deg == 90.0) return 1.0;
  return std::sin(deg * M_PI / 180.0);
}

double angle_between(const Eigen::Vector3d& u, const Eigen::Vector3d& v) {
  const double c = std::clamp(u.dot(v) / (u.norm() * v.norm()), -1.0, 1.0);
  if (c == 0.0) return 90.0;
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace

std::string_view element_symbol(int z) {
  if (z < 1 || z > kMaxElement) return kElements[0];
  return kElements[static_cast<std::size_t>(z)];
}

int element_number(std::string_view symbol) {
  std::string s;
  for (char c : symbol) {
    if (!std::isalpha(static_cast<unsigned char>(c))) break;
    s += s.empty() ? static_cast<char>(std::toupper(static_cast<unsigned char>(c)))
                   : static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  for (int z = 1; z <= kMaxElement; ++z)
    if (kElements[static_cast<std::size_t>(z)] == s) return z;
  return 0;
}

// ---------------------------------------------------------------------------
// ASU invariants

void check_asu(const CrystalASU& asu, const SymmetryCatalog& catalog, double tol) {
  if (!catalog.has_group(asu.group)) throw ValidationError("space group " + std::to_string(asu.group) + " out of range");
  if (asu.sites.empty()) throw ValidationError("ASU has no sites");
  std::vector<char> zero_dof;
  for (std::size_t i = 0; i < asu.sites.size(); ++i) {
    const auto& s = asu.sites[i];
    const std::string where = "site " + std::to_string(i) + ": ";
    if (s.element < 1 || s.element > kMaxElement)
      throw ValidationError(where + "element " + std::to_string(s.element) + " outside 1..100");
    const WyckoffPos* w = catalog.find_wyckoff(asu.group, s.wyckoff);
    if (!w) throw ValidationError(where + "unknown Wyckoff position '" + std::string(1, s.wyckoff) + "'");
    for (double c : s.frac)
      if (!(c >= 0.0 && c < 1.0)) throw ValidationError(where + "fractional coordinate outside [0,1)");
    if (periodic_distance(symmetrize_site(*w, s.frac), s.frac) > tol)
      throw ValidationError(where + "coordinates do not satisfy " + w->label());
    if (w->dof == 0) {
      if (std::find(zero_dof.begin(), zero_dof.end(), s.wyckoff) != zero_dof.end())
        throw ValidationError(where + "0-DOF position " + w->label() + " used twice");
      zero_dof.push_back(s.wyckoff);
    }
  }
  const LatticeClass& lc = catalog.group(asu.group).lattice;
  const LatticeProjection proj = symmetrize_lattice(lc, asu.lattice);
  for (int i = 0; i < 6; ++i)
    if (std::abs(proj.value[i] - asu.lattice[i]) > tol * std::max(1.0, std::abs(asu.lattice[i])))
      throw ValidationError("lattice parameters violate the " + std::string(to_string(lc.family)) + " constraints");
}

bool asu_is_valid(const CrystalASU& asu, const SymmetryCatalog& catalog, double tol) {
  try {
    check_asu(asu, catalog, tol);
    return true;
  } catch (const ValidationError&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Lattice geometry

Eigen::Matrix3d lattice_matrix(const LatticeParams& p) {
  const double a = p[0], b = p[1], c = p[2];
  if (!(a > 0 && b > 0 && c > 0)) throw ValidationError("lattice lengths must be positive");
  for (int i = 3; i < 6; ++i)
    if (!(p[i] > 0 && p[i] < 180)) throw ValidationError("lattice angles must lie in (0, 180)");
  const double ca = cos_deg(p[3]), cb = cos_deg(p[4]), cg = cos_deg(p[5]), sg = sin_deg(p[5]);
  const double cy = (ca - cb * cg) / sg;
  const double cz2 = 1.0 - cb * cb - cy * cy;
  if (!(cz2 > 0)) throw ValidationError("lattice angles do not form a cell with positive volume");
  Eigen::Matrix3d m;
  m << a, 0, 0,  //
      b * cg, b * sg, 0,  //
      c * cb, c * cy, c * std::sqrt(cz2);
  return m;
}

double cell_volume(const LatticeParams& params) { return lattice_matrix(params).determinant(); }

LatticeParams lattice_parameters(const Eigen::Matrix3d& m) {
  const Eigen::Vector3d a = m.row(0), b = m.row(1), c = m.row(2);
  return {a.norm(), b.norm(), c.norm(), angle_between(b, c), angle_between(a, c), angle_between(a, b)};
}

namespace {

struct Metric {
  double A, B, C, xi, eta, zeta;  // a.a b.b c.c 2b.c 2a.c 2a.b
  explicit Metric(const Eigen::Matrix3d& L) {
    const Eigen::Matrix3d G = L * L.transpose();
    A = G(0, 0), B = G(1, 1), C = G(2, 2);
    xi = 2 * G(1, 2), eta = 2 * G(0, 2), zeta = 2 * G(0, 1);
  }
};

int sgn(double v) { return v > 0 ? 1 : (v < 0 ? -1 : 0); }

}  // namespace

NiggliResult niggli_reduce(const Eigen::Matrix3d& lattice, double tol, int max_iterations) {
  const double vol = lattice.determinant();
  if (!(vol > 0)) throw ValidationError("niggli_reduce: lattice determinant must be positive");
  const double e = tol * std::pow(vol, 2.0 / 3.0);
  Eigen::Matrix3i T = Eigen::Matrix3i::Identity();

  // Each step is new_basis = M^T * basis with M taken from Krivy & Gruber.
  auto apply = [&](const Eigen::Matrix3i& M) { T = M.transpose() * T; };
  auto basis = [&]() -> Eigen::Matrix3d { return T.cast<double>() * lattice; };

  int it = 0;
  for (; it < max_iterations; ++it) {
    Metric g(basis());
    if (g.B + e < g.A || (std::abs(g.A - g.B) < e && std::abs(g.xi) > std::abs(g.eta) + e)) {  // N1
      Eigen::Matrix3i M;
      M << 0, -1, 0, -1, 0, 0, 0, 0, -1;
      apply(M);
      g = Metric(basis());
    }
    if (g.C + e < g.B || (std::abs(g.B - g.C) < e && std::abs(g.eta) > std::abs(g.zeta) + e)) {  // N2
      Eigen::Matrix3i M;
      M << -1, 0, 0, 0, 0, -1, 0, -1, 0;
      apply(M);
      continue;
    }
    const int l = std::abs(g.xi) < e ? 0 : sgn(g.xi);
    const int m = std::abs(g.eta) < e ? 0 : sgn(g.eta);
    const int n = std::abs(g.zeta) < e ? 0 : sgn(g.zeta);
    if (l * m * n == 1) {  // N3
      Eigen::Matrix3i M = Eigen::Matrix3i::Zero();
      M(0, 0) = l == -1 ? -1 : 1;
      M(1, 1) = m == -1 ? -1 : 1;
      M(2, 2) = n == -1 ? -1 : 1;
      apply(M);
    } else {  // N4
      int i = l == 1 ? -1 : 1, j = m == 1 ? -1 : 1, k = n == 1 ? -1 : 1;
      if (i * j * k == -1) {
        if (n == 0)
          k = -1;
        else if (m == 0)
          j = -1;
        else if (l == 0)
          i = -1;
      }
      Eigen::Matrix3i M = Eigen::Matrix3i::Zero();
      M(0, 0) = i, M(1, 1) = j, M(2, 2) = k;
      apply(M);
    }
    g = Metric(basis());

    if (std::abs(g.xi) > g.B + e || (std::abs(g.xi - g.B) < e && 2 * g.eta < g.zeta - e) ||
        (std::abs(g.xi + g.B) < e && g.zeta < -e)) {  // step 5
      Eigen::Matrix3i M = Eigen::Matrix3i::Identity();
      M(1, 2) = -sgn(g.xi);
      apply(M);
      continue;
    }
    if (std::abs(g.eta) > g.A + e || (std::abs(g.eta - g.A) < e && 2 * g.xi < g.zeta - e) ||
        (std::abs(g.eta + g.A) < e && g.zeta < -e)) {  // step 6
      Eigen::Matrix3i M = Eigen::Matrix3i::Identity();
      M(0, 2) = -sgn(g.eta);
      apply(M);
      continue;
    }
    if (std::abs(g.zeta) > g.A + e || (std::abs(g.zeta - g.A) < e && 2 * g.xi < g.eta - e) ||
        (std::abs(g.zeta + g.A) < e && g.eta < -e)) {  // step 7
      Eigen::Matrix3i M = Eigen::Matrix3i::Identity();
      M(0, 1) = -sgn(g.zeta);
      apply(M);
      continue;
    }
    const double s = g.xi + g.eta + g.zeta + g.A + g.B;
    if (s < -e || (std::abs(s) < e && 2 * (g.A + g.eta) + g.zeta > e)) {  // step 8
      Eigen::Matrix3i M = Eigen::Matrix3i::Identity();
      M(0, 2) = 1, M(1, 2) = 1;
      apply(M);
      continue;
    }
    return {basis(), T, it + 1};
  }
  throw Error("niggli_reduce did not converge in " + std::to_string(max_iterations) + " iterations (lattice " +
              std::to_string(lattice(0, 0)) + ", ... volume " + std::to_string(vol) + ")");
}

bool is_niggli_reduced(const Eigen::Matrix3d& lattice, double tol) {
  const double vol = std::abs(lattice.determinant());
  const double e = tol * std::pow(vol, 2.0 / 3.0);
  const Metric g(lattice);
  auto eq = [&](double x, double y) { return std::abs(x - y) < e; };
  if (g.A > g.B + e || g.B > g.C + e) return false;
  if (eq(g.A, g.B) && std::abs(g.xi) > std::abs(g.eta) + e) return false;
  if (eq(g.B, g.C) && std::abs(g.eta) > std::abs(g.zeta) + e) return false;
  const bool all_pos = g.xi > e && g.eta > e && g.zeta > e;
  const bool all_nonpos = g.xi <= e && g.eta <= e && g.zeta <= e;
  if (!all_pos && !all_nonpos) return false;
  if (std::abs(g.xi) > g.B + e || std::abs(g.eta) > g.A + e || std::abs(g.zeta) > g.A + e) return false;
  if (g.A + g.B + g.xi + g.eta + g.zeta < -e) return false;
  if (all_pos) {
    if (eq(g.xi, g.B) && g.zeta > 2 * g.eta + e) return false;
    if (eq(g.eta, g.A) && g.zeta > 2 * g.xi + e) return false;
    if (eq(g.zeta, g.A) && g.eta > 2 * g.xi + e) return false;
  } else {
    if (eq(g.xi, -g.B) && std::abs(g.zeta) > e) return false;
    if (eq(g.eta, -g.A) && std::abs(g.zeta) > e) return false;
    if (eq(g.zeta, -g.A) && std::abs(g.eta) > e) return false;
    if (eq(g.A + g.B + g.xi + g.eta + g.zeta, 0) && 2 * (g.A + g.eta) + g.zeta > e) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Expansion and ingestion

Expansion expand_asu(const CrystalASU& asu, const SymmetryCatalog& catalog) {
  Expansion out;
  out.crystal.lattice = lattice_matrix(asu.lattice);
  out.crystal.id = asu.id;
  Provenance prov;
  prov.group = asu.group;
  for (std::size_t i = 0; i < asu.sites.size(); ++i) {
    const auto& s = asu.sites[i];
    const WyckoffPos& w = catalog.wyckoff(asu.group, s.wyckoff);
    const Orbit orbit = orbit_expand(w, s.frac);
    if (orbit.degenerate) out.degenerate_sites.push_back(static_cast<int>(i));
    for (const auto& p : orbit.points) {
      out.crystal.atoms.push_back({s.element, p});
      prov.orbit.push_back(static_cast<int>(i));
    }
  }
  out.crystal.provenance = std::move(prov);
  return out;
}

namespace {

struct DisjointSet {
  std::vector<int> parent;
  explicit DisjointSet(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[x] != x) {
      parent[x] = parent[parent[x]];
      x = parent[x];
    }
    return x;
  }
  // The smaller index stays root so orbits are keyed by their first atom.
  void unite(int a, int b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  }
};

}  // namespace

CrystalASU assign_wyckoff(const FullCrystal& structure, int group, const SymmetryCatalog& catalog,
                          AssignOptions options) {
  const double tol = options.tol;
  const SpaceGroup& sg = catalog.group(group);
  const int n = structure.atom_count();
  if (n == 0) throw ValidationError("structure has no atoms");

  std::vector<Vec3> f(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) f[static_cast<std::size_t>(i)] = wrap01(structure.atoms[static_cast<std::size_t>(i)].frac);

  DisjointSet ds(n);
  for (int i = 0; i < n; ++i) {
    for (const auto& op : sg.operations) {
      const Vec3 q = wrap01(op.apply(f[static_cast<std::size_t>(i)]));
      int best = -1;
      double best_d = tol;
      for (int j = 0; j < n; ++j) {
        const double d = periodic_distance(q, f[static_cast<std::size_t>(j)]);
        if (d < best_d) best_d = d, best = j;
      }
      if (best < 0)
        throw ValidationError("structure is not invariant under space group " + std::to_string(group) + ": atom " +
                              std::to_string(i) + " has no image under " + format_triplet(op));
      ds.unite(i, best);
    }
  }

  std::map<int, std::vector<int>> orbits;  // root (smallest index) -> members
  for (int i = 0; i < n; ++i) orbits[ds.find(i)].push_back(i);

  CrystalASU asu;
  asu.group = group;
  asu.id = structure.id;
  for (const auto& [root, members] : orbits) {
    const int element = structure.atoms[static_cast<std::size_t>(root)].element;
    for (int m : members)
      if (structure.atoms[static_cast<std::size_t>(m)].element != element)
        throw ValidationError("orbit of atom " + std::to_string(root) + " mixes elements " +
                              std::string(element_symbol(element)) + " and " +
                              std::string(element_symbol(structure.atoms[static_cast<std::size_t>(m)].element)));
    const int size = static_cast<int>(members.size());

    std::vector<Vec3> pts;
    for (int m : members) pts.push_back(f[static_cast<std::size_t>(m)]);
    auto bucket = [&](const Vec3& p) {
      return std::array<long long, 3>{std::llround(p[0] / tol), std::llround(p[1] / tol), std::llround(p[2] / tol)};
    };
    std::sort(pts.begin(), pts.end(), [&](const Vec3& a, const Vec3& b) { return bucket(a) < bucket(b); });

    bool any_mult = false;
    bool placed = false;
    for (const auto& w : sg.wyckoff) {
      if (w.multiplicity != size) continue;
      any_mult = true;
      for (const auto& p : pts) {
        const Vec3 s = symmetrize_site(w, p);
        if (periodic_distance(s, p) >= tol) continue;
        const Orbit orbit = orbit_expand(w, s);
        const bool covers = !orbit.degenerate && std::all_of(orbit.points.begin(), orbit.points.end(), [&](const Vec3& q) {
          return std::any_of(pts.begin(), pts.end(), [&](const Vec3& r) { return periodic_distance(q, r) < tol; });
        });
        if (!covers) continue;
        asu.sites.push_back({element, w.letter, s});
        placed = true;
        break;
      }
      if (placed) break;
    }
    if (!any_mult)
      throw ValidationError("orbit of atom " + std::to_string(root) + " has size " + std::to_string(size) +
                            ", which matches no Wyckoff multiplicity of group " + std::to_string(group));
    if (!placed)
      throw ValidationError("no Wyckoff parametric form of group " + std::to_string(group) + " fits the orbit of atom " +
                            std::to_string(root));
  }

  const LatticeParams raw = lattice_parameters(structure.lattice);
  const LatticeProjection proj = symmetrize_lattice(sg.lattice, raw);
  for (int i = 0; i < 6; ++i)
    if (std::abs(proj.value[i] - raw[i]) > 1e-3 * std::max(1.0, std::abs(raw[i])))
      throw ValidationError("lattice parameters are inconsistent with the " + std::string(to_string(sg.lattice.family)) +
                            " class of group " + std::to_string(group));
  asu.lattice = proj.value;
  return asu;
}

// ---------------------------------------------------------------------------
// Distances

double min_pairwise_distance(const FullCrystal& s) {
  const Eigen::Matrix3d& L = s.lattice;
  double best = std::numeric_limits<double>::infinity();
  if (s.atoms.empty()) return best;
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = -1; k <= 1; ++k) {
        if (i == 0 && j == 0 && k == 0) continue;
        const Eigen::RowVector3d v = Eigen::RowVector3d(i, j, k) * L;
        best = std::min(best, v.norm());
      }
  const std::size_t n = s.atoms.size();
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t b = a + 1; b < n; ++b) {
      Eigen::RowVector3d d;
      for (int c = 0; c < 3; ++c) {
        double x = s.atoms[b].frac[c] - s.atoms[a].frac[c];
        d[c] = x - std::round(x);
      }
      for (int i = -1; i <= 1; ++i)
        for (int j = -1; j <= 1; ++j)
          for (int k = -1; k <= 1; ++k) {
            const Eigen::RowVector3d v = (d + Eigen::RowVector3d(i, j, k)) * L;
            best = std::min(best, v.norm());
          }
    }
  return best;
}

bool structural_validity(const FullCrystal& s) {
  if (s.atoms.empty()) return false;
  return s.volume() >= kMinCellVolume && min_pairwise_distance(s) >= kMinInteratomicDistance;
}

}  // namespace symadit
