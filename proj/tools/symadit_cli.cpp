#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "symadit/autoencoder.hpp"
#include "symadit/dataset.hpp"
#include "symadit/error.hpp"
#include "symadit/evalx.hpp"
#include "symadit/flowmatch.hpp"
#include "symadit/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace symadit;

namespace {

enum Exit { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

std::string g_catalog_path;

const SymmetryCatalog& catalog() {
  static std::unique_ptr<SymmetryCatalog> loaded;
  if (g_catalog_path.empty()) return default_catalog();
  if (!loaded) loaded = std::make_unique<SymmetryCatalog>(load_catalog(g_catalog_path));
  return *loaded;
}

std::string catalog_location() { return g_catalog_path.empty() ? default_catalog_path().string() : g_catalog_path; }

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(2) << "\n";
}

void require_file(const fs::path& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw ValidationError(what + " '" + path.string() + "' does not exist");
}

// Manifest: everything that determines a command's output, nothing else.
void write_manifest(const fs::path& path, const std::string& command, std::uint64_t seed, const json& config,
                    json extra = json::object()) {
  json m;
  m["command"] = command;
  m["version"] = SYMADIT_TOOL_VERSION;
  m["seed"] = seed;
  m["config_hash"] = hex(fnv1a(config.dump()));
  m["config"] = config;
  m["catalog_fingerprint"] = hex(catalog().fingerprint());
  for (auto& [k, v] : extra.items()) m[k] = v;
  write_json(path, m);
}

fs::path sidecar(const fs::path& ckpt) { return fs::path(ckpt.string() + ".json"); }

void check_known_keys(const json& base, const json& patch, const std::string& prefix = "") {
  for (auto& [k, v] : patch.items()) {
    if (!base.contains(k)) throw ValidationError("unknown config key '" + prefix + k + "'");
    if (v.is_object() && base[k].is_object()) check_known_keys(base[k], v, prefix + k + ".");
  }
}

// Builds "profile defaults, then file, then flag" configs through JSON so
// partial config files only override what they name.
template <class Config>
Config layered_config(Config base, const std::string& file, const std::function<void(json&)>& flags) {
  json j = base;
  if (!file.empty()) {
    const json patch = read_json(file);
    if (!patch.is_object()) throw ValidationError("config '" + file + "' must be a JSON object");
    check_known_keys(j, patch);
    j.merge_patch(patch);
  }
  flags(j);
  Config c = j.get<Config>();
  c.validate();
  return c;
}

std::unique_ptr<Autoencoder> load_autoencoder(const fs::path& ckpt) {
  require_file(ckpt, "autoencoder checkpoint");
  require_file(sidecar(ckpt), "autoencoder manifest");
  const json meta = read_json(sidecar(ckpt));
  if (meta.value("kind", "") != "autoencoder") throw ValidationError("'" + ckpt.string() + "' is not an autoencoder checkpoint");
  if (meta.value("catalog_fingerprint", "") != hex(catalog().fingerprint()))
    throw ValidationError("autoencoder was trained against a different symmetry catalog");
  auto model = std::make_unique<Autoencoder>(meta.at("config").get<AEConfig>(), catalog());
  nn::load_checkpoint_into(model->store(), ckpt);
  return model;
}

std::unique_ptr<FlowModel> load_flow(const fs::path& ckpt) {
  require_file(ckpt, "flow checkpoint");
  require_file(sidecar(ckpt), "flow manifest");
  const json meta = read_json(sidecar(ckpt));
  if (meta.value("kind", "") != "flow") throw ValidationError("'" + ckpt.string() + "' is not a flow checkpoint");
  auto model = std::make_unique<FlowModel>(meta.at("config").get<FMConfig>());
  nn::load_checkpoint_into(model->store(), ckpt);
  return model;
}

void save_with_sidecar(const nn::ParameterStore& store, const fs::path& ckpt, const std::string& kind, const json& config,
                       std::uint64_t seed, json extra = json::object()) {
  nn::save_checkpoint(store, ckpt);
  json meta = {{"kind", kind},
               {"config", config},
               {"seed", seed},
               {"step", store.step},
               {"version", SYMADIT_TOOL_VERSION},
               {"catalog_fingerprint", hex(catalog().fingerprint())},
               {"fingerprint", hex(store.fingerprint())}};
  for (auto& [k, v] : extra.items()) meta[k] = v;
  write_json(sidecar(ckpt), meta);
}

// Keeps the header and rows with step < keep_below, so a resumed run
// appends exactly where the checkpoint left off.
std::ofstream open_loss_log(const fs::path& path, const std::string& header, std::int64_t keep_below) {
  std::vector<std::string> kept;
  if (keep_below > 0 && fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (std::stoll(line.substr(0, line.find(','))) < keep_below) kept.push_back(line);
    }
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << header << "\n";
  for (const auto& l : kept) out << l << "\n";
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_catalog(const std::string& path_flag) {
  const fs::path path = path_flag.empty() ? fs::path(catalog_location()) : fs::path(path_flag);
  const SymmetryCatalog cat = load_catalog(path);
  const CatalogReport report = validate_catalog(cat);
  if (!report.ok()) {
    for (const auto& f : report.failures) std::cerr << "catalog: " << f << "\n";
    std::cout << report.groups << " groups, " << report.positions << " positions, " << report.failures.size()
              << " failures\n";
    return kValidation;
  }
  std::cout << report.groups << " groups, " << report.positions << " positions, OK\n";
  return kOk;
}

struct IngestArgs {
  std::string input, out, sg_table, test_out;
  int sg = 0;
  double tol = 1e-3;
  double split = 1.0;
  std::uint64_t seed = 0;
};

std::map<std::string, int> read_sg_table(const std::string& path) {
  std::map<std::string, int> table;
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open space-group table '" + path + "'");
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'id,sg'", lineno);
    try {
      table[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
    } catch (const std::exception&) {
      if (lineno == 1) continue;  // header
      throw ParseError(path + ":" + std::to_string(lineno) + ": bad space-group number", lineno);
    }
  }
  return table;
}

int cmd_ingest(const IngestArgs& a) {
  const auto& cat = catalog();
  const auto table = a.sg_table.empty() ? std::map<std::string, int>{} : read_sg_table(a.sg_table);

  struct Item {
    std::string id;
    std::function<LabeledStructure()> load;
  };
  std::vector<Item> items;
  const fs::path input(a.input);
  auto add_cif = [&](const fs::path& p) {
    items.push_back({p.stem().string(), [p] {
                       LabeledStructure ls{read_cif_file(p.string()), 0};
                       if (ls.structure.provenance) ls.group = ls.structure.provenance->group;
                       if (ls.structure.id.empty()) ls.structure.id = p.stem().string();
                       return ls;
                     }});
  };
  if (fs::is_directory(input)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(input))
      if (e.path().extension() == ".cif") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) add_cif(f);
  } else if (input.extension() == ".cif") {
    require_file(input, "input");
    add_cif(input);
  } else {
    require_file(input, "input");
    std::ifstream in(input);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      items.push_back({"line " + std::to_string(lineno), [line] { return structure_from_json(line); }});
    }
  }

  std::vector<CrystalASU> records;
  std::map<std::string, int> skip_counts;
  json skipped = json::array();
  for (const auto& item : items) {
    std::string id = item.id;
    try {
      LabeledStructure ls = item.load();
      if (!ls.structure.id.empty()) id = ls.structure.id;
      int group = ls.group;
      if (auto it = table.find(id); it != table.end()) group = it->second;
      if (group == 0) group = a.sg;
      if (!cat.has_group(group)) throw ValidationError("no space group");
      CrystalASU asu = assign_wyckoff(ls.structure, group, cat, AssignOptions{a.tol});
      asu.id = id;
      records.push_back(std::move(asu));
    } catch (const Error& e) {
      const std::string reason = e.what();
      const std::string kind = dynamic_cast<const ParseError*>(&e)     ? "parse error"
                               : reason == "no space group"            ? "no space group"
                                                                        : "no consistent Wyckoff assignment";
      ++skip_counts[kind];
      skipped.push_back({{"id", id}, {"reason", reason}});
    }
  }

  Split split{records, {}};
  if (a.split < 1.0) split = stratified_split(records, a.split, a.seed);
  write_jsonl(a.out, split.train);
  if (!a.test_out.empty()) write_jsonl(a.test_out, split.test);

  const DatasetStats st = dataset_stats(split.train, cat);
  std::printf("ingested %zu of %zu structures (%zu train, %zu test)\n", records.size(), items.size(),
              split.train.size(), split.test.size());
  for (const auto& [kind, n] : skip_counts) std::printf("  skipped %d: %s\n", n, kind.c_str());
  std::printf("mean tokens per sample %.4f, mean atoms %.3f, P1 %.2f%%, %d groups\n", st.mean_tokens, st.mean_atoms,
              st.p1_percent, st.groups);

  const json config = {{"input", a.input}, {"sg", a.sg},       {"sg_table", a.sg_table}, {"tol", a.tol},
                       {"split", a.split}, {"test_out", a.test_out}};
  write_manifest(a.out + ".manifest.json", "ingest", a.seed, config,
                 {{"records", records.size()},
                  {"train", split.train.size()},
                  {"test", split.test.size()},
                  {"mean_tokens", st.mean_tokens},
                  {"skipped", skipped}});
  return kOk;
}

int cmd_synth(int count, std::uint64_t seed, int max_sites, int max_atoms, const std::string& out) {
  SynthOptions opt;
  opt.max_sites = max_sites;
  opt.max_atoms = max_atoms;
  const auto data = synthetic_dataset(catalog(), count, seed, opt);
  write_jsonl(out, data);
  const DatasetStats st = dataset_stats(data, catalog());
  std::printf("wrote %d crystals, mean tokens %.3f, %d groups\n", st.records, st.mean_tokens, st.groups);
  write_manifest(out + ".manifest.json", "synth", seed,
                 {{"count", count}, {"max_sites", max_sites}, {"max_atoms", max_atoms}});
  return kOk;
}

struct TrainArgs {
  std::string data, out, config, profile = "desk", ae;
  std::optional<int> steps, batch_size, checkpoint_every;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  bool resume = false;
};

void apply_common_flags(json& j, const TrainArgs& a) {
  if (a.steps) j["steps"] = *a.steps;
  if (a.batch_size) j["batch_size"] = *a.batch_size;
  if (a.checkpoint_every) j["checkpoint_every"] = *a.checkpoint_every;
  if (a.seed) j["seed"] = *a.seed;
  if (a.lr) j["optimizer"]["lr"] = *a.lr;
}

int cmd_train_ae(const TrainArgs& a) {
  require_file(a.data, "dataset");
  if (a.profile != "desk" && a.profile != "paper") throw ValidationError("unknown profile '" + a.profile + "'");
  const auto data = read_jsonl(a.data);
  for (const auto& c : data) check_asu(c, catalog());

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const fs::path ckpt = dir / "ae.ckpt";

  AEConfig cfg;
  if (a.resume && fs::exists(sidecar(ckpt))) {
    cfg = read_json(sidecar(ckpt)).at("config").get<AEConfig>();
    cfg = layered_config(cfg, "", [&](json& j) {
      if (a.steps) j["steps"] = *a.steps;
    });
  } else {
    cfg = layered_config(a.profile == "paper" ? AEConfig::paper() : AEConfig::desk(), a.config,
                         [&](json& j) { apply_common_flags(j, a); });
  }
  Autoencoder model(cfg, catalog());
  if (a.resume && fs::exists(ckpt)) {
    nn::load_checkpoint_into(model.store(), ckpt);
    std::printf("resuming at step %lld\n", static_cast<long long>(model.store().step));
  }
  const json cfg_json = cfg;
  write_json(dir / "config.json", cfg_json);

  auto log = open_loss_log(dir / "loss.csv", "step,lr,total,atom,wyckoff,frac,lattice", model.store().step);
  const int every = std::max(1, cfg.checkpoint_every);
  train_autoencoder(model, data, cfg.steps, [&](const AETrainRow& r) {
    log << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss.total) << ',' << fmt(r.loss.atom) << ','
        << fmt(r.loss.wyckoff) << ',' << fmt(r.loss.frac) << ',' << fmt(r.loss.lattice) << '\n';
    if (model.store().step % every == 0) {
      log.flush();
      save_with_sidecar(model.store(), ckpt, "autoencoder", cfg_json, cfg.seed, {{"data", a.data}});
    }
    if (r.step % 100 == 0) std::printf("step %lld loss %.6f\n", static_cast<long long>(r.step), r.loss.total);
    return true;
  });
  log.close();
  save_with_sidecar(model.store(), ckpt, "autoencoder", cfg_json, cfg.seed, {{"data", a.data}});

  const auto m = model.evaluate(data);
  std::printf("atom accuracy %.4f, wyckoff accuracy %.4f, circular error %.5f, lattice error %.5f\n", m.atom_accuracy,
              m.wyckoff_accuracy, m.frac_circular_error, m.lattice_rel_error);
  write_manifest(dir / "manifest.json", "train-ae", cfg.seed, cfg_json,
                 {{"data", a.data},
                  {"steps_done", model.store().step},
                  {"checkpoint_fingerprint", hex(model.store().fingerprint())},
                  {"metrics",
                   {{"atom_accuracy", m.atom_accuracy},
                    {"wyckoff_accuracy", m.wyckoff_accuracy},
                    {"frac_circular_error", m.frac_circular_error},
                    {"lattice_rel_error", m.lattice_rel_error}}}});
  return kOk;
}

int cmd_train_fm(const TrainArgs& a) {
  require_file(a.data, "dataset");
  if (a.profile != "desk" && a.profile != "paper") throw ValidationError("unknown profile '" + a.profile + "'");
  const auto ae = load_autoencoder(a.ae);
  const auto data = read_jsonl(a.data);
  for (const auto& c : data) check_asu(c, catalog());

  const fs::path dir(a.out);
  fs::create_directories(dir);
  const fs::path ckpt = dir / "fm.ckpt";

  FMConfig cfg;
  if (a.resume && fs::exists(sidecar(ckpt))) {
    cfg = layered_config(read_json(sidecar(ckpt)).at("config").get<FMConfig>(), "", [&](json& j) {
      if (a.steps) j["steps"] = *a.steps;
    });
  } else {
    cfg = layered_config(a.profile == "paper" ? FMConfig::paper() : FMConfig::desk(), a.config, [&](json& j) {
      if (a.config.empty() || !read_json(a.config).contains("latent_dim")) j["latent_dim"] = ae->config().latent_dim;
      apply_common_flags(j, a);
    });
  }
  if (cfg.latent_dim != ae->config().latent_dim)
    throw ValidationError("flow latent width " + std::to_string(cfg.latent_dim) + " does not match the autoencoder's " +
                          std::to_string(ae->config().latent_dim));

  FlowModel model(cfg);
  if (a.resume && fs::exists(ckpt)) {
    nn::load_checkpoint_into(model.store(), ckpt);
    std::printf("resuming at step %lld\n", static_cast<long long>(model.store().step));
  }
  const json cfg_json = cfg;
  write_json(dir / "config.json", cfg_json);
  const EmpiricalPriors priors = fit_priors(data);
  write_json(dir / "priors.json", json(priors));

  const auto latents = encode_dataset(*ae, data);
  const json extra = {{"data", a.data}, {"autoencoder", a.ae}, {"autoencoder_fingerprint", hex(ae->store().fingerprint())}};
  auto log = open_loss_log(dir / "loss.csv", "step,lr,loss,self_conditioned,dropped", model.store().step);
  const int every = std::max(1, cfg.checkpoint_every);
  train_flow(model, *ae, latents, cfg.steps, [&](const FMTrainRow& r) {
    log << r.step << ',' << fmt(r.lr) << ',' << fmt(r.loss) << ',' << r.self_conditioned << ',' << r.dropped << '\n';
    if (model.store().step % every == 0) {
      log.flush();
      save_with_sidecar(model.store(), ckpt, "flow", cfg_json, cfg.seed, extra);
    }
    if (r.step % 100 == 0) std::printf("step %lld loss %.6f\n", static_cast<long long>(r.step), r.loss);
    return true;
  });
  log.close();
  save_with_sidecar(model.store(), ckpt, "flow", cfg_json, cfg.seed, extra);
  json m_extra = extra;
  m_extra["steps_done"] = model.store().step;
  m_extra["checkpoint_fingerprint"] = hex(model.store().fingerprint());
  write_manifest(dir / "manifest.json", "train-fm", cfg.seed, cfg_json, m_extra);
  return kOk;
}

struct GenerateArgs {
  std::string fm, ae, priors, out;
  int count = 10000;
  int batch = 256;
  SamplerConfig sampler;
  bool no_condition = false;
};

int cmd_generate(GenerateArgs a) {
  const auto ae = load_autoencoder(a.ae);
  const auto fm = load_flow(a.fm);
  if (fm->config().latent_dim != ae->config().latent_dim)
    throw ValidationError("flow latent width " + std::to_string(fm->config().latent_dim) +
                          " does not match the autoencoder's " + std::to_string(ae->config().latent_dim));
  if (!fm->has_autoencoder() || fm->autoencoder_fingerprint() != ae->store().fingerprint())
    throw ValidationError("flow checkpoint was not trained on this autoencoder");
  if (a.priors.empty()) a.priors = (fs::path(a.fm).parent_path() / "priors.json").string();
  EmpiricalPriors priors = read_json(a.priors).get<EmpiricalPriors>();
  priors.validate();
  a.sampler.condition = !a.no_condition;
  a.sampler.validate();
  if (a.count < 1) throw ValidationError("--count must be positive");

  const Generation gen = generate(model_denoiser(*fm), *ae, priors, a.sampler, a.count, a.batch);

  const fs::path dir(a.out);
  fs::create_directories(dir / "cif");
  for (const auto& e : fs::directory_iterator(dir / "cif")) fs::remove(e.path());
  write_jsonl((dir / "samples.jsonl").string(), gen.crystals);
  for (const auto& c : gen.crystals) {
    const FullCrystal full = expand_asu(c, catalog()).crystal;
    std::ofstream((dir / "cif" / (c.id + ".cif")).string()) << write_cif(full, c.id);
  }
  const auto& s = gen.stats;
  std::printf("generated %d of %d (%d first try), rejected: wyckoff %d, cell %d; lattice clamped %d\n", s.produced,
              s.requested, s.first_try, s.rejected_wyckoff, s.rejected_cell, s.lattice_clamped);
  const json config = {{"fm", a.fm},
                       {"ae", a.ae},
                       {"priors", a.priors},
                       {"count", a.count},
                       {"steps", a.sampler.steps},
                       {"cfg_scale", a.sampler.cfg_scale},
                       {"condition", a.sampler.condition},
                       {"temperature", a.sampler.temperature},
                       {"max_attempts", a.sampler.max_attempts}};
  write_manifest(dir / "manifest.json", "generate", a.sampler.seed, config,
                 {{"fm_fingerprint", hex(fm->store().fingerprint())},
                  {"ae_fingerprint", hex(ae->store().fingerprint())},
                  {"stats",
                   {{"requested", s.requested},
                    {"produced", s.produced},
                    {"first_try", s.first_try},
                    {"rejected_wyckoff", s.rejected_wyckoff},
                    {"rejected_cell", s.rejected_cell},
                    {"lattice_clamped", s.lattice_clamped}}}});
  return s.produced == s.requested ? kOk : kRuntime;
}

struct EvaluateArgs {
  std::string gen, train, out, manifest;
  EvalOptions options;
};

int cmd_evaluate(EvaluateArgs a) {
  require_file(a.gen, "generated set");
  require_file(a.train, "training set");
  const auto gen = read_jsonl(a.gen);
  const auto train = read_jsonl(a.train);
  GenerationReport r = evaluate_generation(gen, train, catalog(), a.options);

  if (a.manifest.empty()) {
    const fs::path guess = fs::path(a.gen).parent_path() / "manifest.json";
    if (fs::exists(guess)) a.manifest = guess.string();
  }
  if (!a.manifest.empty()) {
    const json m = read_json(a.manifest);
    if (m.contains("stats")) {
      const auto& s = m["stats"];
      r.rejections = RejectionCounters{s.value("requested", 0), s.value("rejected_wyckoff", 0),
                                       s.value("rejected_cell", 0), s.value("lattice_clamped", 0)};
    }
  }
  std::cout << report_table(r);
  json report = r;
  if (!a.out.empty()) {
    write_json(a.out, report);
    const json config = {{"gen", a.gen},
                         {"train", a.train},
                         {"max_generated", a.options.max_generated},
                         {"n_novelty", a.options.n_novelty},
                         {"stol", a.options.match.stol},
                         {"ltol", a.options.match.ltol},
                         {"angle_tol", a.options.match.angle_tol}};
    write_manifest(a.out + ".manifest.json", "evaluate", a.options.seed, config);
  }
  return kOk;
}

int cmd_export_latents(const std::string& ae_path, const std::string& data_path, const std::string& out_path) {
  const auto ae = load_autoencoder(ae_path);
  require_file(data_path, "dataset");
  const auto data = read_jsonl(data_path);
  std::ofstream out(out_path);
  if (!out) throw Error("cannot write '" + out_path + "'");
  const int d = ae->config().latent_dim;
  out << "id,group,orbits";
  for (int k = 0; k < d; ++k) out << ",z" << k;
  out << "\n";
  for (const auto& c : data) {
    const LatentBatch z = ae->encode(c);
    const nn::Tensor pooled = z.z.colwise().mean();
    out << c.id << ',' << c.group << ',' << c.orbit_count();
    for (int k = 0; k < d; ++k) out << ',' << fmt(pooled(0, k));
    out << "\n";
  }
  std::printf("exported %zu rows of %d latent columns\n", data.size(), d);
  write_manifest(out_path + ".manifest.json", "export-latents", ae->config().seed,
                 {{"ae", ae_path}, {"data", data_path}, {"pooling", "mean"}},
                 {{"ae_fingerprint", hex(ae->store().fingerprint())}, {"rows", data.size()}});
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"symadit: symmetry-aware latent crystal generation"};
  app.require_subcommand(1);
  app.add_option("--catalog", g_catalog_path, "Symmetry catalog file (default: $SYMADIT_CATALOG or built-in path)");

  std::function<int()> run;

  std::string catalog_path;
  auto* c_catalog = app.add_subcommand("catalog", "Load and validate the symmetry catalog");
  c_catalog->add_option("path", catalog_path, "Catalog file");
  c_catalog->callback([&] { run = [&] { return cmd_catalog(catalog_path); }; });

  IngestArgs ingest;
  auto* c_ingest = app.add_subcommand("ingest", "Convert structures to the ASU dataset format");
  c_ingest->add_option("--input", ingest.input, "CIF file, CIF directory or structure JSONL")->required();
  c_ingest->add_option("--out", ingest.out, "Output dataset JSONL (train side when splitting)")->required();
  c_ingest->add_option("--sg", ingest.sg, "Space group for records without one");
  c_ingest->add_option("--sg-table", ingest.sg_table, "CSV of id,sg overriding per-record groups");
  c_ingest->add_option("--tol", ingest.tol, "Fractional tolerance for orbit matching");
  c_ingest->add_option("--split", ingest.split, "Train fraction of a group-stratified split")->check(CLI::Range(0.0, 1.0));
  c_ingest->add_option("--test-out", ingest.test_out, "Output JSONL for the held-out side");
  c_ingest->add_option("--seed", ingest.seed, "Split seed");
  c_ingest->callback([&] { run = [&] { return cmd_ingest(ingest); }; });

  int synth_count = 32, synth_sites = 4, synth_atoms = 48;
  std::uint64_t synth_seed = 2024;
  std::string synth_out;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic dataset of random valid ASUs");
  c_synth->add_option("--count", synth_count)->check(CLI::PositiveNumber);
  c_synth->add_option("--seed", synth_seed);
  c_synth->add_option("--max-sites", synth_sites)->check(CLI::PositiveNumber);
  c_synth->add_option("--max-atoms", synth_atoms)->check(CLI::PositiveNumber);
  c_synth->add_option("--out", synth_out)->required();
  c_synth->callback([&] { run = [&] { return cmd_synth(synth_count, synth_seed, synth_sites, synth_atoms, synth_out); }; });

  TrainArgs ae_args, fm_args;
  auto train_flags = [](CLI::App* c, TrainArgs& t) {
    c->add_option("--data", t.data, "Training dataset JSONL")->required();
    c->add_option("--out", t.out, "Run directory")->required();
    c->add_option("--config", t.config, "JSON config overriding the profile");
    c->add_option("--profile", t.profile, "desk or paper");
    c->add_option("--steps", t.steps, "Total optimizer steps");
    c->add_option("--batch-size", t.batch_size);
    c->add_option("--checkpoint-every", t.checkpoint_every);
    c->add_option("--lr", t.lr);
    c->add_option("--seed", t.seed);
    c->add_flag("--resume", t.resume, "Continue from the run directory's checkpoint");
  };
  auto* c_ae = app.add_subcommand("train-ae", "Train the autoencoder");
  train_flags(c_ae, ae_args);
  c_ae->callback([&] { run = [&] { return cmd_train_ae(ae_args); }; });
  auto* c_fm = app.add_subcommand("train-fm", "Train the latent flow model on a frozen autoencoder");
  train_flags(c_fm, fm_args);
  c_fm->add_option("--ae", fm_args.ae, "Autoencoder checkpoint")->required();
  c_fm->callback([&] { run = [&] { return cmd_train_fm(fm_args); }; });

  GenerateArgs gen;
  auto* c_gen = app.add_subcommand("generate", "Sample crystals");
  c_gen->add_option("--fm", gen.fm, "Flow checkpoint")->required();
  c_gen->add_option("--ae", gen.ae, "Autoencoder checkpoint")->required();
  c_gen->add_option("--priors", gen.priors, "Priors JSON (default: next to the flow checkpoint)");
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--count", gen.count)->check(CLI::PositiveNumber);
  c_gen->add_option("--steps", gen.sampler.steps, "Euler steps")->check(CLI::PositiveNumber);
  c_gen->add_option("--cfg-scale", gen.sampler.cfg_scale, "Guidance scale");
  c_gen->add_option("--seed", gen.sampler.seed);
  c_gen->add_option("--temperature", gen.sampler.temperature, "Decoder sampling temperature");
  c_gen->add_option("--max-attempts", gen.sampler.max_attempts)->check(CLI::PositiveNumber);
  c_gen->add_option("--batch", gen.batch, "Crystals per denoiser call")->check(CLI::PositiveNumber);
  c_gen->add_flag("--no-condition", gen.no_condition, "Unconditional velocity (null space-group token)");
  c_gen->callback([&] { run = [&] { return cmd_generate(gen); }; });

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score generated crystals against a training set");
  c_ev->add_option("--gen", ev.gen, "Generated samples JSONL")->required();
  c_ev->add_option("--train", ev.train, "Training dataset JSONL")->required();
  c_ev->add_option("--out", ev.out, "Report JSON");
  c_ev->add_option("--manifest", ev.manifest, "Generation manifest with rejection counters");
  c_ev->add_option("--max-generated", ev.options.max_generated)->check(CLI::PositiveNumber);
  c_ev->add_option("--n-novelty", ev.options.n_novelty)->check(CLI::NonNegativeNumber);
  c_ev->add_option("--seed", ev.options.seed);
  c_ev->add_option("--stol", ev.options.match.stol);
  c_ev->add_option("--ltol", ev.options.match.ltol);
  c_ev->add_option("--angle-tol", ev.options.match.angle_tol);
  c_ev->callback([&] { run = [&] { return cmd_evaluate(ev); }; });

  std::string ex_ae, ex_data, ex_out;
  auto* c_ex = app.add_subcommand("export-latents", "Write mean-pooled latents per crystal as CSV");
  c_ex->add_option("--ae", ex_ae)->required();
  c_ex->add_option("--data", ex_data)->required();
  c_ex->add_option("--out", ex_out)->required();
  c_ex->callback([&] { run = [&] { return cmd_export_latents(ex_ae, ex_data, ex_out); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    return run();
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
