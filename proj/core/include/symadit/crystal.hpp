#pragma once
//
// Crystal data model: asymmetric-unit tuples, expansion to the conventional
// cell, lattice geometry, Niggli reduction, periodic distances, CIF and
// dataset JSONL I/O, and Wyckoff assignment for ingestion.
//

#include <Eigen/Dense>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "symadit/symcat.hpp"

namespace symadit {

inline constexpr int kMaxElement = 100;

// Element symbol for atomic numbers 1..100 ("X" otherwise).
std::string_view element_symbol(int z);
// Atomic number for a symbol (case-insensitive, trailing charge or digits
// ignored); 0 when unknown.
int element_number(std::string_view symbol);

struct AsuSite {
  int element = 0;   // atomic number 1..100
  char wyckoff = 0;  // Wyckoff letter within the crystal's group
  Vec3 frac{};

  friend bool operator==(const AsuSite&, const AsuSite&) = default;
};

struct CrystalASU {
  int group = 1;
  std::vector<AsuSite> sites;
  LatticeParams lattice{};
  std::string id;

  int orbit_count() const { return static_cast<int>(sites.size()); }
};

// Throws ValidationError describing the first violated ASU invariant.
void check_asu(const CrystalASU& asu, const SymmetryCatalog& catalog, double tol = 1e-9);
bool asu_is_valid(const CrystalASU& asu, const SymmetryCatalog& catalog, double tol = 1e-9);

struct Atom {
  int element = 0;
  Vec3 frac{};
};

struct Provenance {
  int group = 1;
  std::vector<int> orbit;  // orbit index per atom
};

struct FullCrystal {
  Eigen::Matrix3d lattice = Eigen::Matrix3d::Identity();  // rows are basis vectors (Angstrom)
  std::vector<Atom> atoms;
  std::optional<Provenance> provenance;
  std::string id;

  double volume() const { return lattice.determinant(); }
  int atom_count() const { return static_cast<int>(atoms.size()); }
};

struct MatchParams {
  double ltol = 0.2;
  double stol = 0.3;
  double angle_tol = 10.0;
};

// ---------------------------------------------------------------------------
// Lattice geometry

// Standard construction: a along x, b in the xy plane.
Eigen::Matrix3d lattice_matrix(const LatticeParams& params);
double cell_volume(const LatticeParams& params);
LatticeParams lattice_parameters(const Eigen::Matrix3d& lattice);

struct NiggliResult {
  Eigen::Matrix3d lattice;    // reduced basis (rows)
  Eigen::Matrix3i transform;  // reduced = transform * input
  int iterations = 0;
};

// Krivy-Gruber reduction with the basis tracked through every step.
NiggliResult niggli_reduce(const Eigen::Matrix3d& lattice, double tol = 1e-5, int max_iterations = 100);
// Niggli conditions on the metric of `lattice`, relative tolerance `tol`.
bool is_niggli_reduced(const Eigen::Matrix3d& lattice, double tol = 1e-5);

// ---------------------------------------------------------------------------
// Expansion and ingestion

struct Expansion {
  FullCrystal crystal;
  std::vector<int> degenerate_sites;  // ASU site indices whose orbit collapsed
};

Expansion expand_asu(const CrystalASU& asu, const SymmetryCatalog& catalog);

struct AssignOptions {
  double tol = 1e-3;
};

// Recovers the ASU of a structure given in `group`'s conventional setting.
// Throws ValidationError with a diagnostic when no consistent assignment
// exists.
CrystalASU assign_wyckoff(const FullCrystal& structure, int group, const SymmetryCatalog& catalog,
                          AssignOptions options = {});

// ---------------------------------------------------------------------------
// Distances and validity

inline constexpr double kMinInteratomicDistance = 0.5;  // Angstrom
inline constexpr double kMinCellVolume = 0.1;           // Angstrom^3

// Shortest distance between any two atoms or any atom and one of its own
// periodic images, via a 3x3x3 image sweep.
double min_pairwise_distance(const FullCrystal& structure);
bool structural_validity(const FullCrystal& structure);

// ---------------------------------------------------------------------------
// I/O

std::string write_cif(const FullCrystal& structure, std::string_view data_name = "");
FullCrystal read_cif(std::istream& in);
FullCrystal read_cif_file(const std::string& path);

// One dataset record: keys sg, sites, lat, id (in that order).
std::string asu_to_json(const CrystalASU& asu);
CrystalASU asu_from_json(std::string_view line);
std::vector<CrystalASU> read_jsonl(const std::string& path);
void write_jsonl(const std::string& path, const std::vector<CrystalASU>& asus);

}  // namespace symadit
