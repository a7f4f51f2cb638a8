#include "symadit/symcat.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include "symadit/error.hpp"

#ifndef SYMADIT_CATALOG_PATH
#define SYMADIT_CATALOG_PATH "sgcatalog.txt"
#endif

namespace symadit {

// ---------------------------------------------------------------------------
// AffineForm

AffineForm AffineForm::identity() {
  AffineForm f;
  for (int i = 0; i < 3; ++i) f.matrix[i][i] = 1;
  return f;
}

Vec3 AffineForm::apply(const Vec3& v) const {
  Vec3 out{};
  for (int i = 0; i < 3; ++i) {
    double s = translation[i].to_double();
    for (int j = 0; j < 3; ++j)
      if (!matrix[i][j].is_zero()) s += matrix[i][j].to_double() * v[j];
    out[i] = s;
  }
  return out;
}

AffineForm AffineForm::compose(const AffineForm& inner) const {
  AffineForm r;
  for (int i = 0; i < 3; ++i) {
    Rational t = translation[i];
    for (int k = 0; k < 3; ++k) t += matrix[i][k] * inner.translation[k];
    r.translation[i] = t.mod1();
    for (int j = 0; j < 3; ++j) {
      Rational s;
      for (int k = 0; k < 3; ++k) s += matrix[i][k] * inner.matrix[k][j];
      r.matrix[i][j] = s;
    }
  }
  return r;
}

int AffineForm::rank() const {
  // Gaussian elimination over the rationals.
  auto m = matrix;
  int rank = 0;
  for (int col = 0; col < 3 && rank < 3; ++col) {
    int pivot = -1;
    for (int r = rank; r < 3; ++r)
      if (!m[r][col].is_zero()) {
        pivot = r;
        break;
      }
    if (pivot < 0) continue;
    std::swap(m[rank], m[pivot]);
    for (int r = 0; r < 3; ++r) {
      if (r == rank || m[r][col].is_zero()) continue;
      Rational f = m[r][col] / m[rank][col];
      for (int c = 0; c < 3; ++c) m[r][c] -= f * m[rank][c];
    }
    ++rank;
  }
  return rank;
}

// ---------------------------------------------------------------------------
// Triplet parser

namespace {

class ComponentParser {
 public:
  ComponentParser(std::string_view text, std::size_t base) : s_(text), base_(base) {}

  // Parses one comma-free component into coefficients + constant.
  void parse(std::array<Rational, 3>& coeff, Rational& constant) {
    skip_ws();
    if (at_end()) fail("empty component");
    expr(coeff, constant, 1, 0);
    skip_ws();
    if (!at_end()) {
      if (peek() == ')') fail("unbalanced ')'");
      fail(std::string("unexpected character '") + peek() + "'");
    }
  }

 private:
  void expr(std::array<Rational, 3>& coeff, Rational& constant, Rational sign, int depth) {
    bool first = true;
    for (;;) {
      skip_ws();
      Rational s = sign;
      if (!at_end() && (peek() == '+' || peek() == '-')) {
        if (peek() == '-') s = -s;
        ++pos_;
        skip_ws();
      } else if (!first) {
        return;
      }
      if (at_end()) fail("expected term");
      term(coeff, constant, s, depth);
      first = false;
      skip_ws();
      if (at_end() || peek() == ')') return;
      if (peek() != '+' && peek() != '-') fail(std::string("unexpected character '") + peek() + "'");
    }
  }

  void term(std::array<Rational, 3>& coeff, Rational& constant, Rational sign, int depth) {
    const char c = peek();
    if (c == '(') {
      if (depth >= 1) fail("nested parentheses are not supported");
      ++pos_;
      expr(coeff, constant, sign, depth + 1);
      skip_ws();
      if (at_end() || peek() != ')') fail("missing ')'");
      ++pos_;
      return;
    }
    if (is_var(c)) {
      coeff[var_index(c)] += sign;
      ++pos_;
      return;
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      Rational value = number();
      skip_ws();
      if (!at_end() && peek() == '/') {
        ++pos_;
        skip_ws();
        Rational den = number();
        if (den.is_zero()) fail("zero denominator");
        value = value / den;
        skip_ws();
      }
      if (!at_end() && peek() == '*') {
        ++pos_;
        skip_ws();
        if (at_end() || !is_var(peek())) fail("expected variable after '*'");
      }
      if (!at_end() && is_var(peek())) {
        coeff[var_index(peek())] += sign * value;
        ++pos_;
      } else {
        constant += sign * value;
      }
      return;
    }
    fail(std::string("unknown token '") + c + "'");
  }

  Rational number() {
    const std::size_t start = pos_;
    std::int64_t v = 0;
    while (!at_end() && std::isdigit(static_cast<unsigned char>(peek()))) {
      v = v * 10 + (peek() - '0');
      if (v > 1'000'000) fail("number out of range");
      ++pos_;
    }
    if (!at_end() && peek() == '.') {
      // Decimal constants are accepted only when they are exact twelfths
      // (e.g. 0.25, 0.5).
      ++pos_;
      std::int64_t frac = 0, scale = 1;
      while (!at_end() && std::isdigit(static_cast<unsigned char>(peek()))) {
        frac = frac * 10 + (peek() - '0');
        scale *= 10;
        if (scale > 1'000'000) fail("too many decimals");
        ++pos_;
      }
      if (pos_ == start + 1) fail("malformed number");
      return Rational(v * scale + frac, scale);
    }
    if (pos_ == start) fail("expected number");
    return Rational(v);
  }

  static bool is_var(char c) {
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return c == 'x' || c == 'y' || c == 'z';
  }
  static int var_index(char c) { return std::tolower(static_cast<unsigned char>(c)) - 'x'; }

  void skip_ws() {
    while (!at_end() && std::isspace(static_cast<unsigned char>(peek()))) ++pos_;
  }
  bool at_end() const { return pos_ >= s_.size(); }
  char peek() const { return s_[pos_]; }
  [[noreturn]] void fail(const std::string& msg) const {
    throw ParseError("triplet parse error at position " + std::to_string(base_ + pos_) + ": " + msg,
                     base_ + pos_);
  }

  std::string_view s_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

}  // namespace

AffineForm parse_triplet(std::string_view text, TripletKind kind) {
  AffineForm form;
  std::size_t start = 0;
  int component = 0;
  for (;;) {
    const std::size_t comma = text.find(',', start);
    const std::string_view part = text.substr(start, comma == std::string_view::npos ? text.npos : comma - start);
    if (component >= 3) throw ParseError("triplet has more than three components", start);
    Rational constant;
    ComponentParser(part, start).parse(form.matrix[component], constant);
    form.translation[component] = constant;
    ++component;
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (component != 3) throw ParseError("triplet has " + std::to_string(component) + " components, expected 3", text.size());

  const std::int64_t max_coeff = kind == TripletKind::Operation ? 1 : 2;
  // Site forms include special points such as 1/8,1/8,1/8; operations stay on the 1/12 grid.
  const std::int64_t max_den = kind == TripletKind::Operation ? 12 : 24;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const Rational& m = form.matrix[i][j];
      if (!m.is_integer() || m.num() > max_coeff || m.num() < -max_coeff)
        throw ValidationError("non-crystallographic coefficient " + m.str() + " in '" + std::string(text) + "'");
    }
    form.translation[i] = form.translation[i].mod1();
    if (max_den % form.translation[i].den() != 0)
      throw ValidationError("translation " + form.translation[i].str() + " in '" + std::string(text) +
                            "' is not a multiple of 1/" + std::to_string(max_den));
  }
  return form;
}

std::string format_triplet(const AffineForm& form) {
  static constexpr char kVars[3] = {'x', 'y', 'z'};
  std::string out;
  for (int i = 0; i < 3; ++i) {
    if (i) out += ',';
    std::string row;
    for (int j = 0; j < 3; ++j) {
      const Rational& c = form.matrix[i][j];
      if (c.is_zero()) continue;
      if (c.num() < 0)
        row += '-';
      else if (!row.empty())
        row += '+';
      const Rational mag = c.num() < 0 ? -c : c;
      if (mag != Rational(1)) row += mag.str();
      row += kVars[j];
    }
    const Rational& t = form.translation[i];
    if (!t.is_zero()) {
      if (!row.empty()) row += '+';
      row += t.str();
    }
    out += row.empty() ? std::string("0") : row;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Lattice classes

std::string_view to_string(LatticeFamily family) {
  switch (family) {
    case LatticeFamily::Triclinic: return "triclinic";
    case LatticeFamily::Monoclinic: return "monoclinic";
    case LatticeFamily::Orthorhombic: return "orthorhombic";
    case LatticeFamily::Tetragonal: return "tetragonal";
    case LatticeFamily::TrigonalHexagonal: return "trigonal-hexagonal";
    case LatticeFamily::Rhombohedral: return "rhombohedral";
    case LatticeFamily::Cubic: return "cubic";
  }
  return "?";
}

LatticeFamily parse_lattice_family(std::string_view name) {
  for (auto f : {LatticeFamily::Triclinic, LatticeFamily::Monoclinic, LatticeFamily::Orthorhombic,
                 LatticeFamily::Tetragonal, LatticeFamily::TrigonalHexagonal, LatticeFamily::Rhombohedral,
                 LatticeFamily::Cubic})
    if (to_string(f) == name) return f;
  throw ValidationError("unknown lattice family '" + std::string(name) + "'");
}

LatticeClass LatticeClass::for_family(LatticeFamily family) {
  enum { A, B, C, AL, BE, GA };
  LatticeClass lc;
  lc.family = family;
  auto fix = [&](int slot, double v) { lc.tie_rules.push_back({slot, -1, v}); };
  auto tie = [&](int slot, int src) { lc.tie_rules.push_back({slot, src, 0.0}); };
  switch (family) {
    case LatticeFamily::Triclinic:
      break;
    case LatticeFamily::Monoclinic:  // unique axis b
      fix(AL, 90);
      fix(GA, 90);
      break;
    case LatticeFamily::Orthorhombic:
      fix(AL, 90), fix(BE, 90), fix(GA, 90);
      break;
    case LatticeFamily::Tetragonal:
      tie(B, A);
      fix(AL, 90), fix(BE, 90), fix(GA, 90);
      break;
    case LatticeFamily::TrigonalHexagonal:
      tie(B, A);
      fix(AL, 90), fix(BE, 90), fix(GA, 120);
      break;
    case LatticeFamily::Rhombohedral:
      tie(B, A), tie(C, A);
      tie(BE, AL), tie(GA, AL);
      break;
    case LatticeFamily::Cubic:
      tie(B, A), tie(C, A);
      fix(AL, 90), fix(BE, 90), fix(GA, 90);
      break;
  }
  lc.free_mask.fill(true);
  for (const auto& r : lc.tie_rules) lc.free_mask[r.target] = false;
  return lc;
}

int LatticeClass::free_count() const {
  return static_cast<int>(std::count(free_mask.begin(), free_mask.end(), true));
}

// ---------------------------------------------------------------------------
// Catalog

std::string WyckoffPos::label() const {
  return std::to_string(group_number) + "_" + std::to_string(multiplicity) + letter;
}

const WyckoffPos* SpaceGroup::find(char letter) const {
  for (const auto& w : wyckoff)
    if (w.letter == letter) return &w;
  return nullptr;
}

SymmetryCatalog::SymmetryCatalog(std::vector<SpaceGroup> groups) : groups_(std::move(groups)) {
  int global = 0;
  for (std::size_t g = 0; g < groups_.size(); ++g)
    for (std::size_t k = 0; k < groups_[g].wyckoff.size(); ++k) {
      groups_[g].wyckoff[k].global_index = global++;
      index_.emplace_back(static_cast<int>(g), static_cast<int>(k));
    }
}

const SpaceGroup& SymmetryCatalog::group(int number) const {
  if (!has_group(number)) throw ValidationError("space group " + std::to_string(number) + " not in catalog");
  return groups_[static_cast<std::size_t>(number - 1)];
}

const WyckoffPos& SymmetryCatalog::wyckoff(int global_index) const {
  if (global_index < 0 || global_index >= wyckoff_count())
    throw ValidationError("Wyckoff index " + std::to_string(global_index) + " out of range");
  const auto [g, k] = index_[static_cast<std::size_t>(global_index)];
  return groups_[static_cast<std::size_t>(g)].wyckoff[static_cast<std::size_t>(k)];
}

const WyckoffPos* SymmetryCatalog::find_wyckoff(int group_number, char letter) const {
  if (!has_group(group_number)) return nullptr;
  return group(group_number).find(letter);
}

const WyckoffPos& SymmetryCatalog::wyckoff(int group_number, char letter) const {
  const WyckoffPos* w = find_wyckoff(group_number, letter);
  if (!w)
    throw ValidationError("no Wyckoff position '" + std::string(1, letter) + "' in space group " +
                          std::to_string(group_number));
  return *w;
}

std::vector<bool> SymmetryCatalog::wyckoff_mask(int group_number) const {
  std::vector<bool> mask(static_cast<std::size_t>(wyckoff_count()), false);
  for (const auto& w : group(group_number).wyckoff) mask[static_cast<std::size_t>(w.global_index)] = true;
  return mask;
}

namespace {

// A deliberately irregular assignment so no generic orbit lands on a
// special position.
constexpr Vec3 kGenericParams = {0.1372913, 0.3617251, 0.5893467};

std::vector<Vec3> dedupe(const std::vector<Vec3>& pts, double tol) {
  std::vector<Vec3> out;
  for (const auto& p : pts) {
    bool dup = false;
    for (const auto& q : out)
      if (periodic_distance(p, q) < tol) {
        dup = true;
        break;
      }
    if (!dup) out.push_back(p);
  }
  return out;
}

// Fills dof, dof_mask and binding from the site form; rejects forms the
// first-occurrence binding cannot invert.
void derive_dof(WyckoffPos& w) {
  const auto& m = w.site_form.matrix;
  w.binding = {-1, -1, -1};
  w.dof_mask = {false, false, false};
  for (int slot = 0; slot < 3; ++slot) {
    int fresh = -1;
    for (int var = 0; var < 3; ++var) {
      if (m[slot][var].is_zero() || w.binding[var] >= 0) continue;
      if (fresh >= 0)
        throw ValidationError("site form '" + format_triplet(w.site_form) + "' binds two variables in one slot");
      fresh = var;
    }
    if (fresh < 0) continue;
    for (int var = 0; var < 3; ++var)
      if (var != fresh && !m[slot][var].is_zero())
        throw ValidationError("site form '" + format_triplet(w.site_form) + "' mixes variables in a binding slot");
    const Rational c = m[slot][fresh];
    if (c != Rational(1) && c != Rational(-1))
      throw ValidationError("site form '" + format_triplet(w.site_form) + "' has non-unit binding coefficient");
    w.binding[fresh] = slot;
    w.dof_mask[slot] = true;
  }
  w.dof = w.site_form.rank();
}

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

SymmetryCatalog parse_catalog(std::istream& in) {
  std::string line;
  std::size_t lineno = 0;
  int expect_groups = -1, expect_wyckoff = -1;
  std::uint64_t hash = 1469598103934665603ULL;

  auto fail = [&](const std::string& msg) -> void {
    throw ParseError("catalog line " + std::to_string(lineno) + ": " + msg, lineno);
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    hash = fnv1a(line + "\n", hash);
    std::istringstream hs(line);
    std::string magic, version, g, w;
    hs >> magic >> version >> g >> w;
    if (magic != "SGCATALOG" || version != "v1" || g.rfind("groups=", 0) != 0 || w.rfind("wyckoff=", 0) != 0)
      fail("missing 'SGCATALOG v1 groups=<n> wyckoff=<n>' header");
    try {
      expect_groups = std::stoi(g.substr(7));
      expect_wyckoff = std::stoi(w.substr(8));
    } catch (const std::exception&) {
      fail("malformed header counts");
    }
    break;
  }
  if (expect_groups < 0) throw ParseError("catalog is empty", lineno);

  std::vector<SpaceGroup> groups;
  int total_wyckoff = 0;
  std::set<std::pair<int, char>> seen;

  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    hash = fnv1a(line + "\n", hash);
    try {
      if (line.rfind("G ", 0) == 0) {
        std::istringstream ls(line.substr(2));
        SpaceGroup sg;
        std::string family;
        if (!(ls >> sg.number >> sg.symbol >> family)) fail("malformed group line");
        if (sg.number != static_cast<int>(groups.size()) + 1)
          fail("group " + std::to_string(sg.number) + " out of sequence");
        sg.lattice = LatticeClass::for_family(parse_lattice_family(family));
        groups.push_back(std::move(sg));
      } else if (line.rfind("OP ", 0) == 0) {
        if (groups.empty()) fail("OP before any group");
        groups.back().operations.push_back(parse_triplet(line.substr(3), TripletKind::Operation));
      } else if (line.rfind("WY ", 0) == 0) {
        if (groups.empty()) fail("WY before any group");
        SpaceGroup& sg = groups.back();
        const auto bar = line.find('|');
        if (bar == std::string::npos) fail("WY line missing '|'");
        std::istringstream ls(line.substr(3, bar - 3));
        WyckoffPos wp;
        std::string letter, site;
        if (!(ls >> letter >> wp.multiplicity >> site) || letter.size() != 1) fail("malformed WY line");
        std::string rest;
        if (ls >> rest) fail("unexpected text before '|'");
        wp.group_number = sg.number;
        wp.letter = letter[0];
        if (!seen.emplace(sg.number, wp.letter).second)
          fail("duplicate Wyckoff key " + std::to_string(sg.number) + letter);
        wp.site_form = parse_triplet(site, TripletKind::SiteForm);
        std::string gens = line.substr(bar + 1);
        std::size_t start = 0;
        for (;;) {
          const auto semi = gens.find(';', start);
          wp.orbit_generators.push_back(
              parse_triplet(gens.substr(start, semi == std::string::npos ? std::string::npos : semi - start),
                            TripletKind::SiteForm));
          if (semi == std::string::npos) break;
          start = semi + 1;
        }
        derive_dof(wp);
        if (static_cast<int>(wp.orbit_generators.size()) != wp.multiplicity)
          fail("multiplicity " + std::to_string(wp.multiplicity) + " but " +
               std::to_string(wp.orbit_generators.size()) + " generators");
        if (wp.orbit_generators.front() != wp.site_form) fail("first generator differs from the site form");
        sg.wyckoff.push_back(std::move(wp));
        ++total_wyckoff;
      } else {
        fail("unrecognised record '" + line.substr(0, line.find(' ')) + "'");
      }
    } catch (const ParseError& e) {
      if (std::string_view(e.what()).rfind("catalog line", 0) == 0) throw;
      throw ParseError("catalog line " + std::to_string(lineno) + ": " + e.what(), lineno);
    } catch (const ValidationError& e) {
      throw ParseError("catalog line " + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }

  if (static_cast<int>(groups.size()) != expect_groups || total_wyckoff != expect_wyckoff)
    throw ValidationError("catalog count mismatch: header says " + std::to_string(expect_groups) + " groups / " +
                          std::to_string(expect_wyckoff) + " positions, file has " + std::to_string(groups.size()) +
                          " / " + std::to_string(total_wyckoff));
  if (expect_groups != SymmetryCatalog::kGroupCount || expect_wyckoff != SymmetryCatalog::kWyckoffCount)
    throw ValidationError("catalog must hold " + std::to_string(SymmetryCatalog::kGroupCount) + " groups and " +
                          std::to_string(SymmetryCatalog::kWyckoffCount) + " Wyckoff positions");

  for (const auto& sg : groups) {
    if (sg.operations.empty() || sg.operations.front() != AffineForm::identity())
      throw ValidationError("group " + std::to_string(sg.number) + ": first operation must be x,y,z");
    if (sg.wyckoff.empty()) throw ValidationError("group " + std::to_string(sg.number) + " has no Wyckoff positions");
    const WyckoffPos& general = sg.general_position();
    if (general.dof != 3 || general.multiplicity != static_cast<int>(sg.operations.size()))
      throw ValidationError("group " + std::to_string(sg.number) + ": last position is not the general position");
    for (const auto& wp : sg.wyckoff) {
      const Orbit orbit = orbit_expand(wp, symmetrize_site(wp, kGenericParams));
      if (static_cast<int>(orbit.points.size()) != wp.multiplicity)
        throw ValidationError("group " + std::to_string(sg.number) + " position " + wp.letter + ": generic orbit has " +
                              std::to_string(orbit.points.size()) + " points, multiplicity " +
                              std::to_string(wp.multiplicity));
    }
  }
  const SpaceGroup& p1 = groups.front();
  if (p1.wyckoff.size() != 1 || p1.wyckoff[0].dof != 3 || p1.wyckoff[0].multiplicity != 1)
    throw ValidationError("group 1 must have a single general position of multiplicity 1");

  SymmetryCatalog catalog(std::move(groups));
  catalog.set_fingerprint(hash);
  return catalog;
}

SymmetryCatalog load_catalog(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open catalog '" + path.string() + "'");
  return parse_catalog(in);
}

std::filesystem::path default_catalog_path() {
  if (const char* env = std::getenv("SYMADIT_CATALOG"); env && *env) return env;
  return SYMADIT_CATALOG_PATH;
}

const SymmetryCatalog& default_catalog() {
  static const SymmetryCatalog catalog = load_catalog(default_catalog_path());
  return catalog;
}

// ---------------------------------------------------------------------------
// Symmetrizers and orbits

double wrap01(double v) {
  double r = v - std::floor(v);
  if (r >= 1.0 - 1e-12) r = 0.0;
  return r;
}

Vec3 wrap01(const Vec3& v) { return {wrap01(v[0]), wrap01(v[1]), wrap01(v[2])}; }

double periodic_distance(const Vec3& a, const Vec3& b) {
  double s = 0;
  for (int i = 0; i < 3; ++i) {
    double d = a[i] - b[i];
    d -= std::round(d);
    s += d * d;
  }
  return std::sqrt(s);
}

DofInfo dof_info(const WyckoffPos& w) { return {w.dof, w.dof_mask, w.binding}; }

Vec3 free_parameters(const WyckoffPos& w, const Vec3& coords) {
  Vec3 v{0, 0, 0};
  for (int var = 0; var < 3; ++var) {
    const int slot = w.binding[var];
    if (slot < 0) continue;
    const double c = w.site_form.matrix[slot][var].to_double();
    v[var] = (coords[slot] - w.site_form.translation[slot].to_double()) / c;
  }
  return v;
}

Vec3 symmetrize_site(const WyckoffPos& w, const Vec3& f_pred) {
  return wrap01(w.site_form.apply(free_parameters(w, f_pred)));
}

LatticeProjection symmetrize_lattice(const LatticeClass& lattice, const LatticeParams& pred) {
  LatticeProjection out{pred, 0};
  for (int i = 0; i < 6; ++i) {
    if (!lattice.free_mask[i]) continue;
    double& v = out.value[i];
    if (i < 3) {
      if (!(v >= kMinLength)) {
        v = kMinLength;
        ++out.clamped;
      }
    } else if (!(v >= kMinAngle && v <= kMaxAngle)) {
      v = std::isnan(v) ? 90.0 : std::clamp(v, kMinAngle, kMaxAngle);
      ++out.clamped;
    }
  }
  for (const auto& r : lattice.tie_rules)
    out.value[r.target] = r.source >= 0 ? out.value[r.source] : r.constant;
  return out;
}

LatticeProjection symmetrize_lattice(const SymmetryCatalog& catalog, int group, const LatticeParams& pred) {
  return symmetrize_lattice(catalog.group(group).lattice, pred);
}

Orbit orbit_expand(const WyckoffPos& w, const Vec3& f_free) {
  const Vec3 vars = free_parameters(w, f_free);
  std::vector<Vec3> pts;
  pts.reserve(w.orbit_generators.size());
  for (const auto& g : w.orbit_generators) pts.push_back(wrap01(g.apply(vars)));
  Orbit orbit;
  orbit.points = dedupe(pts, kOrbitTolerance);
  orbit.degenerate = static_cast<int>(orbit.points.size()) != w.multiplicity;
  return orbit;
}

std::vector<Vec3> orbit_by_operations(const SpaceGroup& group, const Vec3& point, double tol) {
  std::vector<Vec3> pts;
  pts.reserve(group.operations.size());
  for (const auto& op : group.operations) pts.push_back(wrap01(op.apply(point)));
  return dedupe(pts, tol);
}

CatalogReport validate_catalog(const SymmetryCatalog& catalog) {
  CatalogReport rep;
  rep.groups = static_cast<int>(catalog.groups().size());
  rep.positions = catalog.wyckoff_count();
  auto fail = [&](const std::string& s) { rep.failures.push_back(s); };
  if (rep.groups != SymmetryCatalog::kGroupCount) fail("group count " + std::to_string(rep.groups));
  if (rep.positions != SymmetryCatalog::kWyckoffCount) fail("Wyckoff count " + std::to_string(rep.positions));

  for (const auto& sg : catalog.groups()) {
    const std::string gname = "group " + std::to_string(sg.number);
    // Closure on the operation list.
    std::set<std::string> ops;
    for (const auto& op : sg.operations) ops.insert(format_triplet(op));
    if (ops.size() != sg.operations.size()) fail(gname + ": duplicate operations");
    for (const auto& a : sg.operations)
      for (const auto& b : sg.operations)
        if (!ops.count(format_triplet(a.compose(b)))) {
          fail(gname + ": not closed under composition");
          goto closure_done;
        }
  closure_done:
    for (const auto& op : sg.operations) {
      const std::string t = format_triplet(op);
      if (format_triplet(parse_triplet(t)) != t) fail(gname + ": triplet round trip failed for " + t);
    }
    for (const auto& w : sg.wyckoff) {
      const std::string wname = gname + " position " + w.letter;
      const std::string t = format_triplet(w.site_form);
      if (format_triplet(parse_triplet(t, TripletKind::SiteForm)) != t) fail(wname + ": site triplet round trip");
      if (w.dof != w.site_form.rank()) fail(wname + ": dof != rank");
      const int pop = static_cast<int>(std::count(w.dof_mask.begin(), w.dof_mask.end(), true));
      if (w.dof > pop) fail(wname + ": dof exceeds free-slot count");
      const Vec3 site = symmetrize_site(w, kGenericParams);
      const Orbit orbit = orbit_expand(w, site);
      if (static_cast<int>(orbit.points.size()) != w.multiplicity) fail(wname + ": generator orbit size");
      const auto by_ops = orbit_by_operations(sg, site);
      if (static_cast<int>(by_ops.size()) != w.multiplicity) fail(wname + ": operation orbit size");
      // Orbit invariance: every operation maps the orbit onto itself.
      for (const auto& op : sg.operations) {
        for (const auto& p : orbit.points) {
          const Vec3 q = wrap01(op.apply(p));
          const bool found = std::any_of(orbit.points.begin(), orbit.points.end(),
                                         [&](const Vec3& r) { return periodic_distance(q, r) < kOrbitTolerance; });
          if (!found) {
            fail(wname + ": orbit not invariant under " + format_triplet(op));
            goto next_position;
          }
        }
      }
    next_position:;
    }
  }
  return rep;
}

}  // namespace symadit
