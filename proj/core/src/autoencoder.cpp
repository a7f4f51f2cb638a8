#include "symadit/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "symadit/error.hpp"

namespace symadit {

using nn::Graph;
using nn::Segments;
using nn::Tensor;
using nn::Var;

namespace {

constexpr double kPi = 3.14159265358979323846;
constexpr int kElementRows = kMaxElement;

std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step, std::uint64_t stream) {
  const auto s = static_cast<std::uint64_t>(step);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(s), static_cast<std::uint32_t>(s >> 32),
                    static_cast<std::uint32_t>(stream)};
  return std::mt19937_64(seq);
}

void read_attention(const nlohmann::json& j, nn::AttentionConfig& a) {
  a.model_dim = j.value("model_dim", a.model_dim);
  a.heads = j.value("heads", a.heads);
  a.layers = j.value("layers", a.layers);
  a.ff_mult = j.value("ff_mult", a.ff_mult);
}

nlohmann::json write_attention(const nn::AttentionConfig& a) {
  return {{"model_dim", a.model_dim}, {"heads", a.heads}, {"layers", a.layers}, {"ff_mult", a.ff_mult}};
}

double circular_distance(double a, double b) {
  const double d = a - b;
  return std::abs(d - std::round(d));
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

AEConfig AEConfig::desk() { return AEConfig{}; }

AEConfig AEConfig::paper() {
  AEConfig c;
  c.encoder = {512, 8, 8, 4};
  c.decoder = {512, 8, 8, 4};
  c.latent_dim = 32;
  c.steps = 100000;
  c.checkpoint_every = 5000;
  return c;
}

void AEConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (latent_dim <= 0) throw ValidationError("autoencoder config: latent_dim must be positive");
  if (!(saturation > 0)) throw ValidationError("autoencoder config: saturation bound must be positive");
  for (double w : {weights.atom, weights.wyckoff, weights.frac, weights.lattice})
    if (!(w >= 0)) throw ValidationError("autoencoder config: loss weights must be non-negative");
  for (double s : {augment.frac, augment.length_relative, augment.angle_degrees})
    if (!(s >= 0)) throw ValidationError("autoencoder config: augmentation sigmas must be non-negative");
  if (batch_size <= 0) throw ValidationError("autoencoder config: batch_size must be positive");
  if (steps < 0 || checkpoint_every < 0) throw ValidationError("autoencoder config: negative step counts");
  if (!(optimizer.lr > 0)) throw ValidationError("autoencoder config: learning rate must be positive");
}

void to_json(nlohmann::json& j, const AEConfig& c) {
  j = nlohmann::json{
      {"encoder", write_attention(c.encoder)},
      {"decoder", write_attention(c.decoder)},
      {"latent_dim", c.latent_dim},
      {"saturation", c.saturation},
      {"loss_weights",
       {{"atom", c.weights.atom}, {"wyckoff", c.weights.wyckoff}, {"frac", c.weights.frac},
        {"lattice", c.weights.lattice}}},
      {"augment",
       {{"enabled", c.use_augmentation},
        {"frac", c.augment.frac},
        {"length_relative", c.augment.length_relative},
        {"angle_degrees", c.augment.angle_degrees}}},
      {"optimizer",
       {{"lr", c.optimizer.lr},
        {"beta1", c.optimizer.beta1},
        {"beta2", c.optimizer.beta2},
        {"eps", c.optimizer.eps},
        {"warmup_steps", c.optimizer.warmup_steps},
        {"weight_decay", c.optimizer.weight_decay},
        {"clip_norm", c.optimizer.clip_norm},
        {"decay_steps", c.optimizer.decay_steps},
        {"min_lr_ratio", c.optimizer.min_lr_ratio}}},
      {"batch_size", c.batch_size},
      {"steps", c.steps},
      {"checkpoint_every", c.checkpoint_every},
      {"seed", c.seed},
  };
}

void from_json(const nlohmann::json& j, AEConfig& c) {
  if (!j.is_object()) throw ParseError("autoencoder config: expected a JSON object", 0);
  if (j.contains("encoder")) read_attention(j.at("encoder"), c.encoder);
  if (j.contains("decoder")) read_attention(j.at("decoder"), c.decoder);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.saturation = j.value("saturation", c.saturation);
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.atom = w.value("atom", c.weights.atom);
    c.weights.wyckoff = w.value("wyckoff", c.weights.wyckoff);
    c.weights.frac = w.value("frac", c.weights.frac);
    c.weights.lattice = w.value("lattice", c.weights.lattice);
  }
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    c.use_augmentation = a.value("enabled", c.use_augmentation);
    c.augment.frac = a.value("frac", c.augment.frac);
    c.augment.length_relative = a.value("length_relative", c.augment.length_relative);
    c.augment.angle_degrees = a.value("angle_degrees", c.augment.angle_degrees);
  }
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.warmup_steps = o.value("warmup_steps", c.optimizer.warmup_steps);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
    c.optimizer.decay_steps = o.value("decay_steps", c.optimizer.decay_steps);
    c.optimizer.min_lr_ratio = o.value("min_lr_ratio", c.optimizer.min_lr_ratio);
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.seed = j.value("seed", c.seed);
  c.validate();
}

std::string_view to_string(DecodeStatus s) {
  switch (s) {
    case DecodeStatus::Ok: return "ok";
    case DecodeStatus::WyckoffExhausted: return "wyckoff_exhausted";
    case DecodeStatus::InvalidCell: return "invalid_cell";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Model

Autoencoder::Autoencoder(const AEConfig& config, const SymmetryCatalog& catalog)
    : config_(config), catalog_(&catalog) {
  config_.validate();
  if (catalog.wyckoff_count() != SymmetryCatalog::kWyckoffCount ||
      static_cast<int>(catalog.groups().size()) != SymmetryCatalog::kGroupCount)
    throw ValidationError("autoencoder: catalog must hold 230 groups and 1731 Wyckoff positions");

  std::mt19937_64 rng(config_.seed);
  const int em = config_.encoder.model_dim;
  const int dm = config_.decoder.model_dim;
  const int d = config_.latent_dim;

  Tensor stats(1, 2);
  stats << 0.0, 1.0;
  lattice_stats_ = &store_.create("lattice_stats", stats, false);

  element_emb_ = nn::Embedding(store_, "enc.element", kElementRows, em, rng);
  wyckoff_emb_ = nn::Embedding(store_, "enc.wyckoff", SymmetryCatalog::kWyckoffCount, em, rng);
  group_emb_ = nn::Embedding(store_, "enc.group", SymmetryCatalog::kGroupCount, em, rng);
  frac_mlp_ = nn::Mlp2(store_, "enc.frac", 6, em, em, rng);
  lattice_mlp_ = nn::Mlp2(store_, "enc.lattice", 12, em, em, rng);
  for (int l = 0; l < config_.encoder.layers; ++l)
    enc_blocks_.emplace_back(store_, "enc.block" + std::to_string(l), config_.encoder, rng);
  enc_norm_ = nn::LayerNorm(store_, "enc.norm", em);
  to_latent_ = nn::Linear(store_, "enc.to_latent", em, d, rng);

  from_latent_ = nn::Linear(store_, "dec.from_latent", d, dm, rng);
  for (int l = 0; l < config_.decoder.layers; ++l)
    dec_blocks_.emplace_back(store_, "dec.block" + std::to_string(l), config_.decoder, rng);
  dec_norm_ = nn::LayerNorm(store_, "dec.norm", dm);
  wyckoff_head_ = nn::Linear(store_, "dec.wyckoff", dm, SymmetryCatalog::kWyckoffCount, rng);
  atom_head_ = nn::Linear(store_, "dec.atom", dm, kElementRows, rng);
  frac_head_ = nn::Mlp2(store_, "dec.frac", dm, dm, 3, rng);
  lattice_head_ = nn::Mlp2(store_, "dec.lattice", dm, dm, 6, rng);
  // Start the angle outputs at 90 degrees.
  store_.at("dec.lattice.fc2.b").value.rightCols(3).setConstant(0.5);
}

void Autoencoder::fit_lattice_stats(const std::vector<CrystalASU>& data) {
  double sum = 0, sum2 = 0;
  int n = 0;
  for (const auto& c : data)
    for (int k = 0; k < 3; ++k) {
      if (!(c.lattice[k] > 0)) throw ValidationError("autoencoder: non-positive lattice length in " + c.id);
      const double v = std::log(c.lattice[k]);
      sum += v;
      sum2 += v * v;
      ++n;
    }
  if (n == 0) throw ValidationError("autoencoder: cannot fit lattice statistics on an empty dataset");
  const double mean = sum / n;
  const double var = std::max(0.0, sum2 / n - mean * mean);
  const double sd = std::sqrt(var);
  lattice_stats_->value(0, 0) = mean;
  lattice_stats_->value(0, 1) = sd > 1e-3 ? sd : 1.0;
}

double Autoencoder::length_log_mean() const { return lattice_stats_->value(0, 0); }
double Autoencoder::length_log_std() const { return lattice_stats_->value(0, 1); }

std::array<double, 6> Autoencoder::normalize_lattice(const LatticeParams& l) const {
  std::array<double, 6> v{};
  for (int k = 0; k < 3; ++k) v[k] = (std::log(l[k]) - length_log_mean()) / length_log_std();
  for (int k = 3; k < 6; ++k) v[k] = l[k] / 180.0;
  return v;
}

LatticeParams Autoencoder::denormalize_lattice(const std::array<double, 6>& v) const {
  LatticeParams l{};
  for (int k = 0; k < 3; ++k) l[k] = std::exp(v[k] * length_log_std() + length_log_mean());
  for (int k = 3; k < 6; ++k) l[k] = v[k] * 180.0;
  return l;
}

AsuBatch Autoencoder::make_batch(const std::vector<const CrystalASU*>& crystals) const {
  AsuBatch b;
  std::vector<int> sizes;
  int n = 0;
  for (const auto* c : crystals) {
    if (c->sites.empty()) throw ValidationError("autoencoder: crystal " + c->id + " has no sites");
    sizes.push_back(c->orbit_count());
    n += c->orbit_count();
  }
  b.segments = Segments::from_sizes(sizes);
  b.frac = Tensor::Zero(n, 3);
  b.frac_free = Tensor::Zero(n, 3);
  b.lattice_target = Tensor::Zero(static_cast<Eigen::Index>(crystals.size()), 6);
  b.lattice_free = Tensor::Zero(static_cast<Eigen::Index>(crystals.size()), 6);
  int row = 0;
  for (std::size_t s = 0; s < crystals.size(); ++s) {
    const CrystalASU& c = *crystals[s];
    if (!catalog_->has_group(c.group)) throw ValidationError("autoencoder: unknown space group " + std::to_string(c.group));
    const SpaceGroup& sg = catalog_->group(c.group);
    b.groups.push_back(c.group);
    std::vector<int> columns;
    for (const auto& w : sg.wyckoff) columns.push_back(w.global_index);
    for (const auto& site : c.sites) {
      const WyckoffPos* w = catalog_->find_wyckoff(c.group, site.wyckoff);
      if (!w || w->global_index < 0 || w->global_index >= SymmetryCatalog::kWyckoffCount)
        throw ValidationError("autoencoder: Wyckoff key " + std::to_string(c.group) + std::string(1, site.wyckoff) +
                              " has no embedding row");
      if (site.element < 1 || site.element > kElementRows)
        throw ValidationError("autoencoder: element " + std::to_string(site.element) + " outside 1..100");
      b.elements.push_back(site.element - 1);
      b.wyckoff_global.push_back(w->global_index);
      b.wyckoff_local.push_back(static_cast<int>(w - sg.wyckoff.data()));
      b.wyckoff_columns.push_back(columns);
      for (int k = 0; k < 3; ++k) {
        b.frac(row, k) = site.frac[k];
        b.frac_free(row, k) = w->dof_mask[k] ? 1.0 : 0.0;
      }
      ++row;
    }
    const auto lat = normalize_lattice(c.lattice);
    for (int k = 0; k < 6; ++k) {
      b.lattice_target(static_cast<Eigen::Index>(s), k) = lat[k];
      b.lattice_free(static_cast<Eigen::Index>(s), k) = sg.lattice.free_mask[k] ? 1.0 : 0.0;
    }
  }
  return b;
}

Var Autoencoder::encode(Graph& g, const AsuBatch& batch) const {
  const nn::AttentionMask mask{&batch.segments, nullptr};
  Tensor frac_in(batch.tokens(), 6);
  frac_in << batch.frac, batch.frac_free;
  Tensor lat_in(batch.crystals(), 12);
  lat_in << batch.lattice_target, batch.lattice_free;
  std::vector<int> group_index;
  for (int gnum : batch.groups) group_index.push_back(gnum - 1);

  Var local = add(add(element_emb_(g, batch.elements), wyckoff_emb_(g, batch.wyckoff_global)),
                  frac_mlp_(g, g.constant(std::move(frac_in))));
  Var global = add(group_emb_(g, group_index), lattice_mlp_(g, g.constant(std::move(lat_in))));
  Var h = add(local, gather_rows(global, batch.segments.row_segment()));
  for (const auto& block : enc_blocks_) h = block(g, h, mask);
  return nn::saturate(to_latent_(g, enc_norm_(g, h)), config_.saturation);
}

Autoencoder::HeadVars Autoencoder::decode_heads(Graph& g, Var z, const Segments& segments,
                                                const std::vector<std::vector<int>>& wyckoff_columns) const {
  const nn::AttentionMask mask{&segments, nullptr};
  Var h = from_latent_(g, z);
  for (const auto& block : dec_blocks_) h = block(g, h, mask);
  h = dec_norm_(g, h);
  HeadVars out;
  out.wyckoff = nn::gathered_linear(h, g.param(wyckoff_head_.weight()), g.param(*wyckoff_head_.bias()), wyckoff_columns);
  out.atom = atom_head_(g, h);
  out.frac = frac_head_(g, h);
  out.lattice = lattice_head_(g, segment_sum(h, segments));
  return out;
}

Var Autoencoder::loss(const AsuBatch& batch, const HeadVars& heads, LossBreakdown* breakdown) const {
  const std::vector<double> ones(static_cast<std::size_t>(batch.tokens()), 1.0);
  Var la = nn::cross_entropy(heads.atom, batch.elements, ones);
  Var lw = nn::cross_entropy(heads.wyckoff, batch.wyckoff_local, ones);
  Var lf = nn::periodic_cosine_loss(heads.frac, batch.frac, batch.frac_free);
  Var ll = nn::masked_mse(heads.lattice, batch.lattice_target, batch.lattice_free);
  const LossWeights& w = config_.weights;
  Var total = add(add(scale(la, w.atom), scale(lw, w.wyckoff)), add(scale(lf, w.frac), scale(ll, w.lattice)));
  if (breakdown) {
    breakdown->atom = la.item();
    breakdown->wyckoff = lw.item();
    breakdown->frac = lf.item();
    breakdown->lattice = ll.item();
    breakdown->total = total.item();
  }
  return total;
}

LatentBatch Autoencoder::encode(const CrystalASU& asu) const {
  LatentBatch out;
  out.z = encode_packed({&asu});
  out.group = asu.group;
  out.valid.assign(static_cast<std::size_t>(out.z.rows()), 1);
  return out;
}

Tensor Autoencoder::encode_packed(const std::vector<const CrystalASU*>& crystals) const {
  Graph g;
  const AsuBatch batch = make_batch(crystals);
  return encode(g, batch).value();
}

DecodeResult Autoencoder::decode(const LatentBatch& latents, DecodeMode mode, std::mt19937_64* rng,
                                 double temperature) const {
  if (mode == DecodeMode::Sample && !rng) throw Error("decode: sampling requires a random generator");
  if (!(temperature > 0)) throw Error("decode: temperature must be positive");
  if (!catalog_->has_group(latents.group)) throw ValidationError("decode: unknown space group " + std::to_string(latents.group));
  if (latents.z.cols() != config_.latent_dim)
    throw ValidationError("decode: latent width " + std::to_string(latents.z.cols()) + ", model expects " +
                          std::to_string(config_.latent_dim));
  if (!latents.z.allFinite()) throw ValidationError("decode: latents are not finite");

  // Drop padded rows; N is the number of valid slots.
  std::vector<int> rows;
  for (int i = 0; i < latents.orbit_count(); ++i)
    if (latents.valid.empty() || latents.valid[static_cast<std::size_t>(i)]) rows.push_back(i);
  if (rows.empty()) throw ValidationError("decode: no valid orbit slots");
  Tensor z(static_cast<Eigen::Index>(rows.size()), latents.z.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) z.row(static_cast<Eigen::Index>(i)) = latents.z.row(rows[i]);
  const int n = static_cast<int>(z.rows());

  const SpaceGroup& sg = catalog_->group(latents.group);
  std::vector<int> columns;
  for (const auto& w : sg.wyckoff) columns.push_back(w.global_index);
  Graph g;
  const Segments seg = Segments::single(n);
  const HeadVars heads = decode_heads(g, g.constant(std::move(z)), seg, std::vector<std::vector<int>>(n, columns));

  DecodeResult res;
  res.outputs.wyckoff_logits = Tensor::Constant(n, SymmetryCatalog::kWyckoffCount, nn::kNegInf);
  for (int i = 0; i < n; ++i)
    for (std::size_t c = 0; c < columns.size(); ++c)
      res.outputs.wyckoff_logits(i, columns[c]) = heads.wyckoff.value()(i, static_cast<Eigen::Index>(c));
  res.outputs.atom_logits = heads.atom.value();
  res.outputs.frac_pred = heads.frac.value();
  std::array<double, 6> lat_norm{};
  for (int k = 0; k < 6; ++k) lat_norm[k] = heads.lattice.value()(0, k);
  res.outputs.lattice_pred = denormalize_lattice(lat_norm);

  auto choose = [&](const std::vector<double>& logits) -> int {
    int best = -1;
    for (std::size_t c = 0; c < logits.size(); ++c)
      if (logits[c] != nn::kNegInf && (best < 0 || logits[c] > logits[static_cast<std::size_t>(best)]))
        best = static_cast<int>(c);
    if (best < 0 || mode == DecodeMode::Argmax) return best;
    std::vector<double> p(logits.size(), 0.0);
    const double top = logits[static_cast<std::size_t>(best)];
    for (std::size_t c = 0; c < logits.size(); ++c)
      if (logits[c] != nn::kNegInf) p[c] = std::exp((logits[c] - top) / temperature);
    std::discrete_distribution<int> dist(p.begin(), p.end());
    return dist(*rng);
  };

  res.asu.group = latents.group;
  std::vector<bool> used(sg.wyckoff.size(), false);
  for (int i = 0; i < n; ++i) {
    std::vector<double> logits(sg.wyckoff.size());
    for (std::size_t c = 0; c < sg.wyckoff.size(); ++c)
      logits[c] = used[c] ? nn::kNegInf : heads.wyckoff.value()(i, static_cast<Eigen::Index>(c));
    const int wi = choose(logits);
    if (wi < 0) {
      res.status = DecodeStatus::WyckoffExhausted;
      res.message = "all Wyckoff positions of group " + std::to_string(latents.group) + " exhausted at orbit " +
                    std::to_string(i);
      return res;
    }
    const WyckoffPos& w = sg.wyckoff[static_cast<std::size_t>(wi)];
    if (w.dof == 0) used[static_cast<std::size_t>(wi)] = true;
    std::vector<double> atom(kElementRows);
    for (int e = 0; e < kElementRows; ++e) atom[static_cast<std::size_t>(e)] = res.outputs.atom_logits(i, e);
    AsuSite site;
    site.element = choose(atom) + 1;
    site.wyckoff = w.letter;
    site.frac = symmetrize_site(w, {res.outputs.frac_pred(i, 0), res.outputs.frac_pred(i, 1), res.outputs.frac_pred(i, 2)});
    res.asu.sites.push_back(site);
  }
  const LatticeProjection proj = symmetrize_lattice(sg.lattice, res.outputs.lattice_pred);
  res.asu.lattice = proj.value;
  res.lattice_clamped = proj.clamped;
  double vol = 0;
  try {
    vol = cell_volume(res.asu.lattice);
  } catch (const Error&) {
    vol = 0;
  }
  if (!std::isfinite(vol) || vol < kMinCellVolume) {
    res.status = DecodeStatus::InvalidCell;
    res.message = "decoded cell has no valid metric (volume " + std::to_string(vol) + ")";
  }
  return res;
}

ReconstructionMetrics Autoencoder::evaluate(const std::vector<CrystalASU>& data) const {
  ReconstructionMetrics m;
  int atom_ok = 0, wy_ok = 0, frac_slots = 0, lat_slots = 0;
  double frac_err = 0, lat_err = 0;
  for (const auto& c : data) {
    const DecodeResult r = decode(encode(c));
    const SpaceGroup& sg = catalog_->group(c.group);
    for (int i = 0; i < c.orbit_count(); ++i) {
      const AsuSite& t = c.sites[static_cast<std::size_t>(i)];
      if (r.asu.sites.size() > static_cast<std::size_t>(i)) {
        atom_ok += r.asu.sites[static_cast<std::size_t>(i)].element == t.element;
        wy_ok += r.asu.sites[static_cast<std::size_t>(i)].wyckoff == t.wyckoff;
      }
      const WyckoffPos& w = catalog_->wyckoff(c.group, t.wyckoff);
      for (int k = 0; k < 3; ++k)
        if (w.dof_mask[k]) {
          frac_err += circular_distance(r.outputs.frac_pred(i, k), t.frac[k]);
          ++frac_slots;
        }
    }
    const LatticeProjection p = symmetrize_lattice(sg.lattice, r.outputs.lattice_pred);
    for (int k = 0; k < 6; ++k)
      if (sg.lattice.free_mask[k]) {
        lat_err += std::abs(p.value[k] - c.lattice[k]) / std::abs(c.lattice[k]);
        ++lat_slots;
      }
    m.tokens += c.orbit_count();
    ++m.crystals;
  }
  if (m.tokens > 0) {
    m.atom_accuracy = static_cast<double>(atom_ok) / m.tokens;
    m.wyckoff_accuracy = static_cast<double>(wy_ok) / m.tokens;
  }
  if (frac_slots > 0) m.frac_circular_error = frac_err / frac_slots;
  if (lat_slots > 0) m.lattice_rel_error = lat_err / lat_slots;
  return m;
}

// ---------------------------------------------------------------------------
// Augmentation and gate

CrystalASU augment(const CrystalASU& asu, const AugmentSigmas& sigmas, const SymmetryCatalog& catalog,
                   std::mt19937_64& rng) {
  if (!(sigmas.frac >= 0 && sigmas.length_relative >= 0 && sigmas.angle_degrees >= 0))
    throw ValidationError("augment: sigmas must be non-negative");
  CrystalASU out = asu;
  std::normal_distribution<double> normal(0.0, 1.0);
  if (sigmas.frac > 0) {
    for (auto& site : out.sites) {
      const WyckoffPos& w = catalog.wyckoff(out.group, site.wyckoff);
      if (w.dof == 0) continue;
      Vec3 params = free_parameters(w, site.frac);
      for (int v = 0; v < 3; ++v) {
        bool bound = false;
        for (int k = 0; k < 3; ++k) bound = bound || w.binding[k] == v;
        if (!bound) continue;
        double noise = 0;
        while (noise == 0.0) noise = normal(rng);
        params[v] += sigmas.frac * noise;
      }
      site.frac = symmetrize_site(w, wrap01(w.site_form.apply(params)));
    }
  }
  if (sigmas.length_relative > 0 || sigmas.angle_degrees > 0) {
    const LatticeClass& lc = catalog.group(out.group).lattice;
    LatticeParams l = out.lattice;
    for (int k = 0; k < 6; ++k) {
      if (!lc.free_mask[k]) continue;
      if (k < 3)
        l[k] *= std::exp(sigmas.length_relative * normal(rng));
      else
        l[k] += sigmas.angle_degrees * normal(rng);
    }
    out.lattice = symmetrize_lattice(lc, l).value;
  }
  return out;
}

bool reconstruction_gate(const CrystalASU& asu, const SymmetryCatalog& catalog) {
  try {
    const Expansion e = expand_asu(asu, catalog);
    if (e.crystal.atoms.empty()) return false;
    return min_pairwise_distance(e.crystal) >= kMinInteratomicDistance;
  } catch (const Error&) {
    return false;
  }
}

// ---------------------------------------------------------------------------
// Training

namespace {

std::vector<CrystalASU> step_batch(const Autoencoder& model, const std::vector<CrystalASU>& data, std::int64_t step) {
  const AEConfig& cfg = model.config();
  std::mt19937_64 rng = step_rng(cfg.seed, step, 1);
  std::vector<std::size_t> index(data.size());
  std::iota(index.begin(), index.end(), 0);
  const std::size_t take = std::min(index.size(), static_cast<std::size_t>(cfg.batch_size));
  if (take < index.size())
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, index.size() - 1);
      std::swap(index[i], index[pick(rng)]);
    }
  std::vector<CrystalASU> batch;
  batch.reserve(take);
  for (std::size_t i = 0; i < take; ++i) {
    const CrystalASU& c = data[index[i]];
    batch.push_back(cfg.use_augmentation ? augment(c, cfg.augment, model.catalog(), rng) : c);
  }
  return batch;
}

}  // namespace

LossBreakdown autoencoder_step_loss(const Autoencoder& model, const std::vector<CrystalASU>& data, std::int64_t step) {
  if (data.empty()) throw ValidationError("autoencoder training: empty dataset");
  const auto crystals = step_batch(model, data, step);
  std::vector<const CrystalASU*> ptrs;
  for (const auto& c : crystals) ptrs.push_back(&c);
  Graph g;
  const AsuBatch batch = model.make_batch(ptrs);
  LossBreakdown out;
  model.loss(batch, model.decode_heads(g, model.encode(g, batch), batch.segments, batch.wyckoff_columns), &out);
  return out;
}

void train_autoencoder(Autoencoder& model, const std::vector<CrystalASU>& data, std::int64_t until_step,
                       const std::function<bool(const AETrainRow&)>& on_step) {
  if (data.empty()) throw ValidationError("autoencoder training: empty dataset");
  nn::ParameterStore& store = model.store();
  if (store.step == 0) model.fit_lattice_stats(data);
  while (store.step < until_step) {
    const std::int64_t step = store.step;
    const auto crystals = step_batch(model, data, step);
    std::vector<const CrystalASU*> ptrs;
    for (const auto& c : crystals) ptrs.push_back(&c);
    AETrainRow row;
    row.step = step;
    {
      Graph g;
      const AsuBatch batch = model.make_batch(ptrs);
      Var total = model.loss(batch, model.decode_heads(g, model.encode(g, batch), batch.segments, batch.wyckoff_columns),
                             &row.loss);
      if (!std::isfinite(row.loss.total))
        throw Error("autoencoder training: non-finite loss at step " + std::to_string(step));
      store.zero_grad();
      g.backward(total);
    }
    row.lr = nn::adam_step(store, model.config().optimizer);
    if (on_step && !on_step(row)) break;
  }
}

}  // namespace symadit
