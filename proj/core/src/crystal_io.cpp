#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "symadit/crystal.hpp"
#include "symadit/error.hpp"

namespace symadit {

// ---------------------------------------------------------------------------
// CIF

namespace {

std::string fmt(double v, int prec = 8) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

struct CifToken {
  std::string text;
  std::size_t line;
  bool quoted;
};

// Splits CIF text into tokens, dropping comments and semicolon text blocks.
std::vector<CifToken> tokenize_cif(std::istream& in) {
  std::vector<CifToken> out;
  std::string line;
  std::size_t lineno = 0;
  bool in_text = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty() && line[0] == ';') {
      in_text = !in_text;
      if (!in_text) out.push_back({"", lineno, true});
      continue;
    }
    if (in_text) continue;
    std::size_t i = 0;
    while (i < line.size()) {
      const char c = line[i];
      if (std::isspace(static_cast<unsigned char>(c))) {
        ++i;
        continue;
      }
      if (c == '#') break;
      if (c == '\'' || c == '"') {
        std::size_t j = i + 1;
        // A closing quote must be followed by whitespace or end of line.
        while (j < line.size() && !(line[j] == c && (j + 1 == line.size() || std::isspace(static_cast<unsigned char>(line[j + 1])))))
          ++j;
        if (j >= line.size()) throw ParseError("CIF line " + std::to_string(lineno) + ": unterminated quoted string", lineno);
        out.push_back({line.substr(i + 1, j - i - 1), lineno, true});
        i = j + 1;
        continue;
      }
      std::size_t j = i;
      while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
      out.push_back({line.substr(i, j - i), lineno, false});
      i = j;
    }
  }
  if (in_text) throw ParseError("CIF: unterminated text field", lineno);
  return out;
}

bool is_keyword(const CifToken& t, std::string_view kw) {
  if (t.quoted || t.text.size() < kw.size()) return false;
  for (std::size_t i = 0; i < kw.size(); ++i)
    if (std::tolower(static_cast<unsigned char>(t.text[i])) != kw[i]) return false;
  return true;
}

double cif_number(const CifToken& t) {
  std::string s = t.text;
  if (auto p = s.find('('); p != std::string::npos) s.resize(p);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError("CIF line " + std::to_string(t.line) + ": expected a number, got '" + t.text + "'", t.line);
  }
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::string write_cif(const FullCrystal& s, std::string_view data_name) {
  if (s.atoms.empty()) throw ValidationError("write_cif: structure has no atoms");
  const LatticeParams p = lattice_parameters(s.lattice);
  std::ostringstream o;
  std::string name(data_name.empty() ? (s.id.empty() ? "symadit" : s.id) : data_name);
  for (auto& c : name)
    if (std::isspace(static_cast<unsigned char>(c))) c = '_';
  o << "data_" << name << "\n";
  if (s.provenance) {
    o << "_symmetry_space_group_name_H-M   '" << default_catalog().group(s.provenance->group).symbol << "'\n";
    o << "_symmetry_Int_Tables_number   " << s.provenance->group << "\n";
  }
  o << "_cell_length_a   " << fmt(p[0]) << "\n";
  o << "_cell_length_b   " << fmt(p[1]) << "\n";
  o << "_cell_length_c   " << fmt(p[2]) << "\n";
  o << "_cell_angle_alpha   " << fmt(p[3]) << "\n";
  o << "_cell_angle_beta   " << fmt(p[4]) << "\n";
  o << "_cell_angle_gamma   " << fmt(p[5]) << "\n";
  o << "_cell_volume   " << fmt(s.volume()) << "\n";
  o << "loop_\n _symmetry_equiv_pos_site_id\n _symmetry_equiv_pos_as_xyz\n  1  'x, y, z'\n";
  o << "loop_\n _atom_site_type_symbol\n _atom_site_label\n _atom_site_symmetry_multiplicity\n"
       " _atom_site_fract_x\n _atom_site_fract_y\n _atom_site_fract_z\n _atom_site_occupancy\n";
  std::map<int, int> counters;
  for (const auto& a : s.atoms) {
    const std::string sym(element_symbol(a.element));
    o << "  " << sym << "  " << sym << counters[a.element]++ << "  1  " << fmt(a.frac[0]) << "  " << fmt(a.frac[1])
      << "  " << fmt(a.frac[2]) << "  1\n";
  }
  return o.str();
}

FullCrystal read_cif(std::istream& in) {
  const std::vector<CifToken> toks = tokenize_cif(in);
  std::map<std::string, CifToken> tags;
  struct Loop {
    std::vector<std::string> names;
    std::vector<CifToken> values;
    std::size_t line;
  };
  std::vector<Loop> loops;
  std::string data_name;

  std::size_t i = 0;
  while (i < toks.size()) {
    const CifToken& t = toks[i];
    if (is_keyword(t, "data_")) {
      if (!data_name.empty()) break;  // first data block only
      data_name = t.text.substr(5);
      ++i;
    } else if (is_keyword(t, "loop_")) {
      Loop loop;
      loop.line = t.line;
      ++i;
      while (i < toks.size() && !toks[i].quoted && toks[i].text[0] == '_') loop.names.push_back(lower(toks[i++].text));
      if (loop.names.empty()) throw ParseError("CIF line " + std::to_string(t.line) + ": loop_ without tags", t.line);
      while (i < toks.size() && (toks[i].quoted || (toks[i].text[0] != '_' && !is_keyword(toks[i], "loop_") &&
                                                    !is_keyword(toks[i], "data_"))))
        loop.values.push_back(toks[i++]);
      if (loop.values.size() % loop.names.size() != 0)
        throw ParseError("CIF line " + std::to_string(t.line) + ": loop value count " +
                             std::to_string(loop.values.size()) + " is not a multiple of " +
                             std::to_string(loop.names.size()) + " tags",
                         t.line);
      loops.push_back(std::move(loop));
    } else if (!t.quoted && t.text[0] == '_') {
      if (i + 1 >= toks.size()) throw ParseError("CIF line " + std::to_string(t.line) + ": tag without value", t.line);
      tags[lower(t.text)] = toks[i + 1];
      i += 2;
    } else {
      throw ParseError("CIF line " + std::to_string(t.line) + ": unexpected token '" + t.text + "'", t.line);
    }
  }

  auto need = [&](const char* tag) -> double {
    auto it = tags.find(tag);
    if (it == tags.end()) throw ParseError(std::string("CIF: missing required tag ") + tag, 0);
    return cif_number(it->second);
  };
  FullCrystal s;
  s.id = data_name;
  const LatticeParams p = {need("_cell_length_a"),   need("_cell_length_b"),  need("_cell_length_c"),
                           need("_cell_angle_alpha"), need("_cell_angle_beta"), need("_cell_angle_gamma")};
  s.lattice = lattice_matrix(p);

  for (const char* tag : {"_symmetry_int_tables_number", "_space_group_it_number"}) {
    if (auto it = tags.find(tag); it != tags.end()) {
      const int g = static_cast<int>(cif_number(it->second));
      if (g >= 1 && g <= SymmetryCatalog::kGroupCount) s.provenance = Provenance{g, {}};
    }
  }

  std::vector<AffineForm> ops;
  for (const auto& loop : loops) {
    for (std::size_t c = 0; c < loop.names.size(); ++c) {
      if (loop.names[c] != "_symmetry_equiv_pos_as_xyz" && loop.names[c] != "_space_group_symop_operation_xyz") continue;
      for (std::size_t r = c; r < loop.values.size(); r += loop.names.size()) {
        try {
          ops.push_back(parse_triplet(loop.values[r].text));
        } catch (const Error& e) {
          throw ParseError("CIF line " + std::to_string(loop.values[r].line) + ": " + e.what(), loop.values[r].line);
        }
      }
    }
  }
  if (ops.empty()) ops.push_back(AffineForm::identity());

  const Loop* atoms = nullptr;
  for (const auto& loop : loops)
    if (std::find(loop.names.begin(), loop.names.end(), "_atom_site_fract_x") != loop.names.end()) atoms = &loop;
  if (!atoms) throw ParseError("CIF: missing _atom_site_fract_x/y/z loop", 0);
  auto col = [&](const char* name) -> int {
    auto it = std::find(atoms->names.begin(), atoms->names.end(), name);
    return it == atoms->names.end() ? -1 : static_cast<int>(it - atoms->names.begin());
  };
  const int cx = col("_atom_site_fract_x"), cy = col("_atom_site_fract_y"), cz = col("_atom_site_fract_z");
  const int ctype = col("_atom_site_type_symbol"), clabel = col("_atom_site_label");
  if (cy < 0 || cz < 0) throw ParseError("CIF line " + std::to_string(atoms->line) + ": incomplete fract loop", atoms->line);
  if (ctype < 0 && clabel < 0)
    throw ParseError("CIF line " + std::to_string(atoms->line) + ": atom loop has no type symbol or label", atoms->line);
  const std::size_t width = atoms->names.size();
  for (std::size_t r = 0; r + width <= atoms->values.size(); r += width) {
    const CifToken& el = atoms->values[r + static_cast<std::size_t>(ctype >= 0 ? ctype : clabel)];
    const int z = element_number(el.text);
    if (z == 0) throw ParseError("CIF line " + std::to_string(el.line) + ": unknown element '" + el.text + "'", el.line);
    const Vec3 f = {cif_number(atoms->values[r + static_cast<std::size_t>(cx)]),
                    cif_number(atoms->values[r + static_cast<std::size_t>(cy)]),
                    cif_number(atoms->values[r + static_cast<std::size_t>(cz)])};
    for (const auto& op : ops) {
      const Vec3 q = wrap01(op.apply(f));
      bool dup = false;
      for (const auto& a : s.atoms)
        if (a.element == z && periodic_distance(a.frac, q) < 1e-4) {
          dup = true;
          break;
        }
      if (!dup) s.atoms.push_back({z, q});
    }
  }
  if (s.atoms.empty()) throw ParseError("CIF: atom_site loop is empty", atoms->line);
  return s;
}

FullCrystal read_cif_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open CIF '" + path + "'");
  FullCrystal s = read_cif(in);
  if (s.id.empty()) s.id = path;
  return s;
}

// ---------------------------------------------------------------------------
// Dataset JSONL

std::string asu_to_json(const CrystalASU& asu) {
  nlohmann::ordered_json j;
  j["sg"] = asu.group;
  auto sites = nlohmann::ordered_json::array();
  for (const auto& s : asu.sites) {
    nlohmann::ordered_json o;
    o["el"] = s.element;
    o["wy"] = std::string(1, s.wyckoff);
    o["f"] = {s.frac[0], s.frac[1], s.frac[2]};
    sites.push_back(std::move(o));
  }
  j["sites"] = std::move(sites);
  j["lat"] = asu.lattice;
  if (!asu.id.empty()) j["id"] = asu.id;
  return j.dump();
}

CrystalASU asu_from_json(std::string_view line) {
  CrystalASU asu;
  try {
    const auto j = nlohmann::json::parse(line);
    asu.group = j.at("sg").get<int>();
    for (const auto& s : j.at("sites")) {
      AsuSite site;
      site.element = s.at("el").get<int>();
      const std::string wy = s.at("wy").get<std::string>();
      if (wy.size() != 1) throw ParseError("Wyckoff label must be a single letter, got '" + wy + "'", 0);
      site.wyckoff = wy[0];
      const auto& f = s.at("f");
      if (f.size() != 3) throw ParseError("site 'f' must have 3 entries", 0);
      for (int k = 0; k < 3; ++k) site.frac[k] = f[k].get<double>();
      asu.sites.push_back(site);
    }
    const auto& lat = j.at("lat");
    if (lat.size() != 6) throw ParseError("'lat' must have 6 entries", 0);
    for (int k = 0; k < 6; ++k) asu.lattice[k] = lat[k].get<double>();
    if (j.contains("id")) asu.id = j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("dataset record: ") + e.what(), 0);
  }
  return asu;
}

std::vector<CrystalASU> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  std::vector<CrystalASU> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(asu_from_json(line));
    } catch (const ParseError& e) {
      throw ParseError(path + ":" + std::to_string(lineno) + ": " + e.what(), lineno);
    }
  }
  return out;
}

void write_jsonl(const std::string& path, const std::vector<CrystalASU>& asus) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  for (const auto& a : asus) out << asu_to_json(a) << "\n";
}

}  // namespace symadit
