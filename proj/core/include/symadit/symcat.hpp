#pragma once
//
// Space-group symmetry catalog: coordinate-triplet parsing, the 230 groups
// with their operations and Wyckoff positions, lattice constraint classes,
// and the site/lattice symmetrizers used by the decoder.
//

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "symadit/rational.hpp"

namespace symadit {

using Vec3 = std::array<double, 3>;
// (a, b, c) in Angstrom followed by (alpha, beta, gamma) in degrees.
using LatticeParams = std::array<double, 6>;

// Affine map v -> matrix * v + translation with exact rational entries.
// The translation is kept reduced into [0, 1).
struct AffineForm {
  std::array<std::array<Rational, 3>, 3> matrix{};
  std::array<Rational, 3> translation{};

  static AffineForm identity();

  Vec3 apply(const Vec3& v) const;
  // (*this) o inner, translation reduced mod 1.
  AffineForm compose(const AffineForm& inner) const;
  int rank() const;

  friend bool operator==(const AffineForm&, const AffineForm&) = default;
};

// Operation: rotation part restricted to entries in {-1, 0, 1}.
// SiteForm: Wyckoff parametric forms, where coefficients up to 2 occur
// (e.g. "x,2x,z" in hexagonal groups).
enum class TripletKind { Operation, SiteForm };

AffineForm parse_triplet(std::string_view text, TripletKind kind = TripletKind::Operation);
std::string format_triplet(const AffineForm& form);

enum class LatticeFamily {
  Triclinic,
  Monoclinic,
  Orthorhombic,
  Tetragonal,
  TrigonalHexagonal,
  Rhombohedral,
  Cubic,
};

std::string_view to_string(LatticeFamily family);
LatticeFamily parse_lattice_family(std::string_view name);

// target <- value of slot `source`, or <- `constant` when source < 0.
struct TieRule {
  int target;
  int source;
  double constant;
};

struct LatticeClass {
  LatticeFamily family = LatticeFamily::Triclinic;
  std::array<bool, 6> free_mask{};
  std::vector<TieRule> tie_rules;

  static LatticeClass for_family(LatticeFamily family);
  int free_count() const;
};

struct WyckoffPos {
  int group_number = 0;
  char letter = '?';
  int multiplicity = 0;
  AffineForm site_form;
  int dof = 0;
  // Stored coordinate slots that carry a free parameter (first occurrence
  // of each variable).
  std::array<bool, 3> dof_mask{};
  // binding[v] = coordinate slot variable v (x, y, z) is read from, or -1.
  std::array<int, 3> binding{-1, -1, -1};
  std::vector<AffineForm> orbit_generators;
  int global_index = -1;

  // Display label in the "225_4a" style.
  std::string label() const;
};

struct SpaceGroup {
  int number = 0;
  std::string symbol;
  LatticeClass lattice;
  std::vector<AffineForm> operations;
  std::vector<WyckoffPos> wyckoff;  // letter order: a, b, c, ...

  const WyckoffPos* find(char letter) const;
  const WyckoffPos& general_position() const { return wyckoff.back(); }
};

// Immutable after construction; safe to share between threads.
class SymmetryCatalog {
 public:
  static constexpr int kGroupCount = 230;
  static constexpr int kWyckoffCount = 1731;

  explicit SymmetryCatalog(std::vector<SpaceGroup> groups);

  const std::vector<SpaceGroup>& groups() const { return groups_; }
  const SpaceGroup& group(int number) const;
  bool has_group(int number) const { return number >= 1 && number <= static_cast<int>(groups_.size()); }

  int wyckoff_count() const { return static_cast<int>(index_.size()); }
  const WyckoffPos& wyckoff(int global_index) const;
  const WyckoffPos& wyckoff(int group, char letter) const;
  const WyckoffPos* find_wyckoff(int group, char letter) const;

  // true exactly at the global indices of the group's Wyckoff positions.
  std::vector<bool> wyckoff_mask(int group) const;

  // FNV-1a over the catalog text content; identifies the table a model was
  // trained against.
  std::uint64_t fingerprint() const { return fingerprint_; }
  void set_fingerprint(std::uint64_t f) { fingerprint_ = f; }

 private:
  std::vector<SpaceGroup> groups_;
  std::vector<std::pair<int, int>> index_;  // global -> (group, position)
  std::uint64_t fingerprint_ = 0;
};

// Reads and fully validates a catalog file.
SymmetryCatalog load_catalog(const std::filesystem::path& path);
SymmetryCatalog parse_catalog(std::istream& in);

// $SYMADIT_CATALOG if set, otherwise the catalog shipped with the build.
std::filesystem::path default_catalog_path();
// Process-wide catalog loaded from default_catalog_path() on first use.
const SymmetryCatalog& default_catalog();

struct DofInfo {
  int dof = 0;
  std::array<bool, 3> mask{};
  std::array<int, 3> binding{-1, -1, -1};
};
DofInfo dof_info(const WyckoffPos& w);

// Values of the free variables (x, y, z) read from a coordinate triple at
// their binding slots. Unused variables are 0.
Vec3 free_parameters(const WyckoffPos& w, const Vec3& coords);

// S_w: projects a predicted coordinate triple onto w's parametric form.
Vec3 symmetrize_site(const WyckoffPos& w, const Vec3& f_pred);

struct LatticeProjection {
  LatticeParams value{};
  int clamped = 0;  // number of free slots pulled back into range
};
inline constexpr double kMinLength = 0.1;
inline constexpr double kMinAngle = 1.0;
inline constexpr double kMaxAngle = 179.0;

// S_G: free slots copied (after range clamping), tied slots overwritten.
LatticeProjection symmetrize_lattice(const LatticeClass& lattice, const LatticeParams& pred);
LatticeProjection symmetrize_lattice(const SymmetryCatalog& catalog, int group, const LatticeParams& pred);

struct Orbit {
  std::vector<Vec3> points;
  bool degenerate = false;  // fewer distinct points than the multiplicity
};

inline constexpr double kOrbitTolerance = 1e-6;

// Orbit of an already-symmetrized site, deduplicated mod 1.
Orbit orbit_expand(const WyckoffPos& w, const Vec3& f_free);

// Orbit of a point under the group's operations (independent of the
// Wyckoff generator lists).
std::vector<Vec3> orbit_by_operations(const SpaceGroup& group, const Vec3& point, double tol = kOrbitTolerance);

double wrap01(double v);
Vec3 wrap01(const Vec3& v);
// Euclidean norm of the minimum-image fractional difference.
double periodic_distance(const Vec3& a, const Vec3& b);

struct CatalogReport {
  int groups = 0;
  int positions = 0;
  std::vector<std::string> failures;
  bool ok() const { return failures.empty(); }
};

// Checks every catalog invariant: counts, triplet round trips, group
// closure, multiplicities (by generators and by operations), orbit
// invariance, DOF consistency.
CatalogReport validate_catalog(const SymmetryCatalog& catalog);

}  // namespace symadit
