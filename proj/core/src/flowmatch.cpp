#include "symadit/flowmatch.hpp"

#include <cmath>
#include <algorithm>
#include <optional>
#include <numeric>

#include "symadit/error.hpp"

namespace symadit {

using nn::Graph;
using nn::Segments;
using nn::Tensor;
using nn::Var;

namespace {

constexpr int kConditionRows = SymmetryCatalog::kGroupCount + 1;

std::mt19937_64 stream(std::initializer_list<std::uint64_t> keys) {
  std::vector<std::uint32_t> words;
  for (std::uint64_t k : keys) {
    words.push_back(static_cast<std::uint32_t>(k));
    words.push_back(static_cast<std::uint32_t>(k >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

int condition_row(int condition) {
  if (condition == kNullCondition) return SymmetryCatalog::kGroupCount;
  if (condition < 1 || condition > SymmetryCatalog::kGroupCount)
    throw ValidationError("flow model: condition " + std::to_string(condition) + " is neither a group nor null");
  return condition - 1;
}

Tensor time_features(const std::vector<double>& t, int width) {
  const int half = width / 2;
  Tensor out(static_cast<Eigen::Index>(t.size()), width);
  for (std::size_t i = 0; i < t.size(); ++i)
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(10000.0) * k / half);
      const double arg = 1000.0 * t[i] * freq;
      out(static_cast<Eigen::Index>(i), k) = std::cos(arg);
      out(static_cast<Eigen::Index>(i), half + k) = std::sin(arg);
    }
  return out;
}

void read_attention(const nlohmann::json& j, nn::AttentionConfig& a) {
  a.model_dim = j.value("model_dim", a.model_dim);
  a.heads = j.value("heads", a.heads);
  a.layers = j.value("layers", a.layers);
  a.ff_mult = j.value("ff_mult", a.ff_mult);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ValidationError(std::string(what) + ": shapes differ (" + std::to_string(a.rows()) + "x" +
                          std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                          std::to_string(b.cols()) + ")");
}

}  // namespace

// ---------------------------------------------------------------------------
// Configs

FMConfig FMConfig::desk() { return FMConfig{}; }

FMConfig FMConfig::paper() {
  FMConfig c;
  c.denoiser = {768, 12, 12, 4};
  c.latent_dim = 32;
  c.time_features = 256;
  c.steps = 200000;
  c.checkpoint_every = 5000;
  return c;
}

void FMConfig::validate() const {
  denoiser.validate();
  if (latent_dim <= 0) throw ValidationError("flow config: latent_dim must be positive");
  if (time_features <= 0 || time_features % 2 != 0)
    throw ValidationError("flow config: time_features must be a positive even number");
  if (!(condition_dropout >= 0 && condition_dropout <= 1)) throw ValidationError("flow config: condition_dropout outside [0,1]");
  if (!(self_condition_prob >= 0 && self_condition_prob <= 1))
    throw ValidationError("flow config: self_condition_prob outside [0,1]");
  if (batch_size <= 0) throw ValidationError("flow config: batch_size must be positive");
  if (steps < 0 || checkpoint_every < 0) throw ValidationError("flow config: negative step counts");
  if (!(optimizer.lr > 0)) throw ValidationError("flow config: learning rate must be positive");
}

void to_json(nlohmann::json& j, const FMConfig& c) {
  j = nlohmann::json{
      {"denoiser",
       {{"model_dim", c.denoiser.model_dim},
        {"heads", c.denoiser.heads},
        {"layers", c.denoiser.layers},
        {"ff_mult", c.denoiser.ff_mult}}},
      {"latent_dim", c.latent_dim},
      {"time_features", c.time_features},
      {"condition_dropout", c.condition_dropout},
      {"self_condition_prob", c.self_condition_prob},
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

void from_json(const nlohmann::json& j, FMConfig& c) {
  if (!j.is_object()) throw ParseError("flow config: expected a JSON object", 0);
  if (j.contains("denoiser")) read_attention(j.at("denoiser"), c.denoiser);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.time_features = j.value("time_features", c.time_features);
  c.condition_dropout = j.value("condition_dropout", c.condition_dropout);
  c.self_condition_prob = j.value("self_condition_prob", c.self_condition_prob);
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

void SamplerConfig::validate() const {
  if (steps < 1) throw ValidationError("sampler: steps must be >= 1");
  if (!std::isfinite(cfg_scale)) throw ValidationError("sampler: cfg scale must be finite");
  if (!(temperature > 0)) throw ValidationError("sampler: temperature must be positive");
  if (max_attempts < 1) throw ValidationError("sampler: max_attempts must be >= 1");
}

// ---------------------------------------------------------------------------
// Path

Tensor interpolate(const Tensor& z0, const Tensor& z1, double t) {
  check_same_shape(z0, z1, "interpolate");
  if (!(t >= 0 && t <= 1)) throw ValidationError("interpolate: t outside [0,1]");
  if (t == 0) return z0;
  if (t == 1) return z1;
  return (1.0 - t) * z0 + t * z1;
}

Tensor target_field(const Tensor& zt, const Tensor& z1, double t) {
  check_same_shape(zt, z1, "target_field");
  if (!(t >= 0 && t < 1)) throw ValidationError("target_field: requires 0 <= t < 1");
  return (z1 - zt) / (1.0 - t);
}

Tensor guided_prediction(const Tensor& uncond, const Tensor& cond, double scale) {
  check_same_shape(uncond, cond, "guidance");
  return (1.0 - scale) * uncond + scale * cond;
}

// ---------------------------------------------------------------------------
// Priors

namespace {

int draw_key(const std::map<int, double>& dist, std::mt19937_64& rng) {
  std::vector<int> keys;
  std::vector<double> weights;
  for (const auto& [k, p] : dist) {
    keys.push_back(k);
    weights.push_back(p);
  }
  std::discrete_distribution<std::size_t> d(weights.begin(), weights.end());
  return keys[d(rng)];
}

}  // namespace

int EmpiricalPriors::sample_group(std::mt19937_64& rng) const {
  if (group.empty()) throw ValidationError("priors: empty group distribution");
  return draw_key(group, rng);
}

int EmpiricalPriors::sample_orbits(int g, std::mt19937_64& rng) const {
  const auto it = orbits.find(g);
  if (it == orbits.end() || it->second.empty())
    throw ValidationError("priors: no orbit-count distribution for group " + std::to_string(g));
  return draw_key(it->second, rng);
}

void EmpiricalPriors::validate() const {
  auto check = [](const std::map<int, double>& d, const std::string& what) {
    if (d.empty()) throw ValidationError("priors: " + what + " is empty");
    double s = 0;
    for (const auto& [_, p] : d) {
      if (!(p >= 0)) throw ValidationError("priors: negative probability in " + what);
      s += p;
    }
    if (std::abs(s - 1.0) > 1e-9) throw ValidationError("priors: " + what + " sums to " + std::to_string(s));
  };
  check(group, "p(G)");
  for (const auto& [g, _] : group) {
    if (g < 1 || g > SymmetryCatalog::kGroupCount) throw ValidationError("priors: invalid group " + std::to_string(g));
    const auto it = orbits.find(g);
    if (it == orbits.end()) throw ValidationError("priors: group " + std::to_string(g) + " has no p(O|G)");
    check(it->second, "p(O|G=" + std::to_string(g) + ")");
    for (const auto& [o, p] : it->second)
      if (o < 1) throw ValidationError("priors: orbit count " + std::to_string(o) + " for group " + std::to_string(g));
  }
}

EmpiricalPriors fit_priors(const std::vector<CrystalASU>& data) {
  if (data.empty()) throw ValidationError("fit_priors: empty dataset");
  std::map<int, int> groups;
  std::map<int, std::map<int, int>> orbits;
  for (const auto& c : data) {
    ++groups[c.group];
    ++orbits[c.group][c.orbit_count()];
  }
  EmpiricalPriors p;
  for (const auto& [g, n] : groups) {
    p.group[g] = static_cast<double>(n) / static_cast<double>(data.size());
    for (const auto& [o, m] : orbits[g]) p.orbits[g][o] = static_cast<double>(m) / n;
  }
  return p;
}

void to_json(nlohmann::json& j, const EmpiricalPriors& p) {
  j = nlohmann::json::object();
  j["G"] = nlohmann::json::object();
  j["O_given_G"] = nlohmann::json::object();
  for (const auto& [g, v] : p.group) j["G"][std::to_string(g)] = v;
  for (const auto& [g, d] : p.orbits) {
    auto& row = j["O_given_G"][std::to_string(g)];
    row = nlohmann::json::object();
    for (const auto& [o, v] : d) row[std::to_string(o)] = v;
  }
}

void from_json(const nlohmann::json& j, EmpiricalPriors& p) {
  auto key = [](const std::string& s) {
    std::size_t pos = 0;
    int v = 0;
    try {
      v = std::stoi(s, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != s.size() || s.empty()) throw ParseError("priors: key '" + s + "' is not an integer", 0);
    return v;
  };
  if (!j.is_object() || !j.contains("G") || !j.contains("O_given_G"))
    throw ParseError("priors: expected an object with G and O_given_G", 0);
  p = {};
  for (const auto& [k, v] : j.at("G").items()) p.group[key(k)] = v.get<double>();
  for (const auto& [k, row] : j.at("O_given_G").items())
    for (const auto& [o, v] : row.items()) p.orbits[key(k)][key(o)] = v.get<double>();
  p.validate();
}

// ---------------------------------------------------------------------------
// Denoiser

FlowModel::FlowModel(const FMConfig& config) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  const int dm = config_.denoiser.model_dim;
  const int d = config_.latent_dim;

  ae_hash_ = &store_.create("ae_fingerprint", Tensor::Zero(1, 3), false);
  input_ = nn::Linear(store_, "fm.input", 2 * d, dm, rng);
  time_mlp_ = nn::Mlp2(store_, "fm.time", config_.time_features, dm, dm, rng);
  group_emb_ = nn::Embedding(store_, "fm.group", kConditionRows, dm, rng);
  for (int l = 0; l < config_.denoiser.layers; ++l)
    blocks_.emplace_back(store_, "fm.block" + std::to_string(l), config_.denoiser, rng);
  final_mod_ = nn::Linear(store_, "fm.final_mod", dm, 2 * dm, rng, true, true);
  output_ = nn::Linear(store_, "fm.output", dm, d, rng, true, true);
}

Var FlowModel::predict(Graph& g, Var zt, Var self_cond, const std::vector<double>& t,
                       const std::vector<int>& condition, const Segments& segments,
                       const std::vector<std::uint8_t>* valid) const {
  const int d = config_.latent_dim;
  if (zt.cols() != d || self_cond.cols() != d || zt.rows() != segments.rows() || self_cond.rows() != zt.rows())
    throw ValidationError("flow model: expected " + std::to_string(segments.rows()) + "x" + std::to_string(d) +
                          " inputs, got " + std::to_string(zt.rows()) + "x" + std::to_string(zt.cols()) + " and " +
                          std::to_string(self_cond.rows()) + "x" + std::to_string(self_cond.cols()));
  if (static_cast<int>(t.size()) != segments.count() || static_cast<int>(condition.size()) != segments.count())
    throw ValidationError("flow model: need one t and one condition per crystal");
  for (double v : t)
    if (!(v >= 0 && v <= 1)) throw ValidationError("flow model: t outside [0,1]");
  std::vector<int> rows;
  for (int c : condition) rows.push_back(condition_row(c));

  const nn::AttentionMask mask{&segments, valid};
  Var cond = add(time_mlp_(g, g.constant(time_features(t, config_.time_features))), group_emb_(g, rows));
  Var h = input_(g, nn::concat_cols({zt, self_cond}));
  for (const auto& block : blocks_) h = block(g, h, cond, mask);
  const int dm = config_.denoiser.model_dim;
  Var mod = gather_rows(final_mod_(g, silu(cond)), segments.row_segment());
  h = adaptive_layer_norm(h, slice_cols(mod, 0, dm), slice_cols(mod, dm, dm));
  return output_(g, h);
}

Tensor FlowModel::predict(const Tensor& zt, const Tensor& self_cond, const std::vector<double>& t,
                          const std::vector<int>& condition, const Segments& segments) const {
  Graph g;
  return predict(g, g.constant(zt), g.constant(self_cond), t, condition, segments).value();
}

bool FlowModel::has_autoencoder() const { return ae_hash_->value(0, 2) != 0.0; }

std::uint64_t FlowModel::autoencoder_fingerprint() const {
  const auto lo = static_cast<std::uint64_t>(ae_hash_->value(0, 0));
  const auto hi = static_cast<std::uint64_t>(ae_hash_->value(0, 1));
  return lo | (hi << 32);
}

void FlowModel::bind_autoencoder(std::uint64_t fingerprint) {
  ae_hash_->value(0, 0) = static_cast<double>(fingerprint & 0xffffffffu);
  ae_hash_->value(0, 1) = static_cast<double>(fingerprint >> 32);
  ae_hash_->value(0, 2) = 1.0;
}

// ---------------------------------------------------------------------------
// Training

std::vector<LatentBatch> encode_dataset(const Autoencoder& ae, const std::vector<CrystalASU>& data) {
  std::vector<LatentBatch> out;
  out.reserve(data.size());
  constexpr std::size_t chunk = 256;
  for (std::size_t start = 0; start < data.size(); start += chunk) {
    std::vector<const CrystalASU*> ptrs;
    for (std::size_t i = start; i < std::min(data.size(), start + chunk); ++i) ptrs.push_back(&data[i]);
    const Tensor z = ae.encode_packed(ptrs);
    int row = 0;
    for (const auto* c : ptrs) {
      LatentBatch b;
      b.z = z.middleRows(row, c->orbit_count());
      b.group = c->group;
      b.valid.assign(static_cast<std::size_t>(c->orbit_count()), 1);
      row += c->orbit_count();
      out.push_back(std::move(b));
    }
  }
  return out;
}

TrainingDraw draw_training(const FMConfig& config, const std::vector<LatentBatch>& data, std::int64_t step) {
  if (data.empty()) throw ValidationError("flow training: empty latent dataset");
  std::mt19937_64 rng = stream({config.seed, static_cast<std::uint64_t>(step), 2});
  TrainingDraw draw;
  draw.records.resize(data.size());
  std::iota(draw.records.begin(), draw.records.end(), 0);
  const std::size_t take = std::min(data.size(), static_cast<std::size_t>(config.batch_size));
  if (take < data.size()) {
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, data.size() - 1);
      std::swap(draw.records[i], draw.records[pick(rng)]);
    }
    draw.records.resize(take);
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  int rows = 0;
  for (std::size_t r : draw.records) rows += data[r].orbit_count();
  draw.noise = Tensor::Zero(rows, config.latent_dim);
  int row = 0;
  for (std::size_t r : draw.records) {
    draw.t.push_back(unit(rng));
    draw.dropped.push_back(unit(rng) < config.condition_dropout);
    const LatentBatch& b = data[r];
    for (int i = 0; i < b.orbit_count(); ++i, ++row) {
      if (!b.valid.empty() && !b.valid[static_cast<std::size_t>(i)]) continue;
      for (int k = 0; k < config.latent_dim; ++k) draw.noise(row, k) = normal(rng);
    }
  }
  draw.self_condition = unit(rng) < config.self_condition_prob;
  return draw;
}

namespace {

struct PackedStep {
  Segments segments;
  Tensor z1, zt;
  std::vector<std::uint8_t> valid;
  std::vector<int> condition;
  Tensor row_mask;  // rows x d
};

PackedStep pack(const FMConfig& cfg, const std::vector<LatentBatch>& data, const TrainingDraw& draw) {
  PackedStep p;
  std::vector<int> sizes;
  for (std::size_t r : draw.records) sizes.push_back(data[r].orbit_count());
  p.segments = Segments::from_sizes(sizes);
  const int n = p.segments.rows();
  if (draw.noise.rows() != n || draw.noise.cols() != cfg.latent_dim)
    throw ValidationError("flow training: noise does not match the batch");
  p.z1 = Tensor::Zero(n, cfg.latent_dim);
  p.zt = Tensor::Zero(n, cfg.latent_dim);
  p.row_mask = Tensor::Zero(n, cfg.latent_dim);
  int row = 0;
  for (std::size_t s = 0; s < draw.records.size(); ++s) {
    const LatentBatch& b = data[draw.records[s]];
    if (b.z.cols() != cfg.latent_dim)
      throw ValidationError("flow training: latent width " + std::to_string(b.z.cols()) + ", model expects " +
                            std::to_string(cfg.latent_dim));
    p.condition.push_back(draw.dropped[s] ? kNullCondition : b.group);
    const double t = draw.t[s];
    for (int i = 0; i < b.orbit_count(); ++i, ++row) {
      const bool ok = b.valid.empty() || b.valid[static_cast<std::size_t>(i)];
      p.valid.push_back(ok ? 1 : 0);
      if (!ok) continue;
      p.z1.row(row) = b.z.row(i);
      p.zt.row(row) = (1.0 - t) * draw.noise.row(row) + t * b.z.row(i);
      p.row_mask.row(row).setOnes();
    }
  }
  return p;
}

// Returns the loss node; the first self-conditioning pass runs on its own
// graph so no gradient reaches it.
Var step_loss(Graph& g, const FlowModel& model, const PackedStep& p, const TrainingDraw& draw) {
  Tensor sc = Tensor::Zero(p.zt.rows(), p.zt.cols());
  if (draw.self_condition) {
    Graph first;
    sc = model.predict(first, first.constant(p.zt), first.constant(sc), draw.t, p.condition, p.segments, &p.valid).value();
    for (Eigen::Index r = 0; r < sc.rows(); ++r)
      if (!p.valid[static_cast<std::size_t>(r)]) sc.row(r).setZero();
  }
  Var pred = model.predict(g, g.constant(p.zt), g.constant(std::move(sc)), draw.t, p.condition, p.segments, &p.valid);
  return nn::masked_mse(pred, p.z1, p.row_mask);
}

}  // namespace

double flow_loss(const FlowModel& model, const std::vector<LatentBatch>& data, const TrainingDraw& draw) {
  const PackedStep p = pack(model.config(), data, draw);
  Graph g;
  return step_loss(g, model, p, draw).item();
}

void train_flow(FlowModel& model, const Autoencoder& frozen, const std::vector<LatentBatch>& data,
                std::int64_t until_step, const std::function<bool(const FMTrainRow&)>& on_step) {
  if (data.empty()) throw ValidationError("flow training: empty latent dataset");
  if (frozen.config().latent_dim != model.config().latent_dim)
    throw ValidationError("flow training: autoencoder latent width " + std::to_string(frozen.config().latent_dim) +
                          " does not match the flow model's " + std::to_string(model.config().latent_dim));
  const std::uint64_t fp = frozen.store().fingerprint();
  if (!model.has_autoencoder())
    model.bind_autoencoder(fp);
  else if (model.autoencoder_fingerprint() != fp)
    throw ValidationError("flow training: autoencoder parameters changed since this flow model started training; "
                          "the stage-1 model must stay frozen");
  nn::ParameterStore& store = model.store();
  while (store.step < until_step) {
    const std::int64_t step = store.step;
    const TrainingDraw draw = draw_training(model.config(), data, step);
    FMTrainRow row;
    row.step = step;
    row.self_conditioned = draw.self_condition;
    row.dropped = static_cast<int>(std::count(draw.dropped.begin(), draw.dropped.end(), true));
    {
      const PackedStep p = pack(model.config(), data, draw);
      Graph g;
      Var loss = step_loss(g, model, p, draw);
      row.loss = loss.item();
      if (!std::isfinite(row.loss)) throw Error("flow training: non-finite loss at step " + std::to_string(step));
      store.zero_grad();
      g.backward(loss);
    }
    row.lr = nn::adam_step(store, model.config().optimizer);
    if (on_step && !on_step(row)) break;
  }
}

// ---------------------------------------------------------------------------
// Sampling

DenoiseFn model_denoiser(const FlowModel& model) {
  return [&model](const Tensor& zt, const Segments& seg, double t, const Tensor& sc, const std::vector<int>& cond) {
    return model.predict(zt, sc, std::vector<double>(static_cast<std::size_t>(seg.count()), t), cond, seg);
  };
}

Tensor euler_sample(const DenoiseFn& denoise, Tensor z, const Segments& segments, const std::vector<int>& groups,
                    const SamplerConfig& config) {
  config.validate();
  if (static_cast<int>(groups.size()) != segments.count() || z.rows() != segments.rows())
    throw ValidationError("euler_sample: groups/segments/latents disagree");
  const std::vector<int> null(groups.size(), kNullCondition);
  const int T = config.steps;
  Tensor self_cond = Tensor::Zero(z.rows(), z.cols());
  for (int k = 0; k < T; ++k) {
    const double t = static_cast<double>(k) / T;
    Tensor pred;
    if (!config.condition || config.cfg_scale == 0.0) {
      pred = denoise(z, segments, t, self_cond, null);
    } else if (config.cfg_scale == 1.0) {
      pred = denoise(z, segments, t, self_cond, groups);
    } else {
      const Tensor uncond = denoise(z, segments, t, self_cond, null);
      const Tensor cond = denoise(z, segments, t, self_cond, groups);
      pred = guided_prediction(uncond, cond, config.cfg_scale);
    }
    // dt / (1 - t) with t = k/T is exactly 1 / (T - k); the last step lands on pred.
    z += (pred - z) / static_cast<double>(T - k);
    self_cond = std::move(pred);
  }
  return z;
}

Generation generate(const DenoiseFn& denoise, const Autoencoder& decoder, const EmpiricalPriors& priors,
                    const SamplerConfig& config, int count, int batch) {
  config.validate();
  priors.validate();
  if (count < 0) throw ValidationError("generate: negative count");
  if (batch < 1) throw ValidationError("generate: batch must be positive");
  const int d = decoder.config().latent_dim;

  Generation out;
  out.stats.requested = count;
  std::vector<std::optional<CrystalASU>> slots(static_cast<std::size_t>(count));
  std::vector<int> attempt(static_cast<std::size_t>(count), 0);
  std::vector<int> pending(static_cast<std::size_t>(count));
  std::iota(pending.begin(), pending.end(), 0);

  while (!pending.empty()) {
    std::vector<int> next;
    for (std::size_t start = 0; start < pending.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t stop = std::min(pending.size(), start + static_cast<std::size_t>(batch));
      std::vector<int> groups, sizes;
      std::vector<Tensor> noise;
      for (std::size_t i = start; i < stop; ++i) {
        const int idx = pending[i];
        std::mt19937_64 rng = stream({config.seed, static_cast<std::uint64_t>(idx),
                                      static_cast<std::uint64_t>(attempt[static_cast<std::size_t>(idx)]), 0});
        const int g = priors.sample_group(rng);
        const int o = priors.sample_orbits(g, rng);
        std::normal_distribution<double> normal(0.0, 1.0);
        Tensor z0(o, d);
        for (Eigen::Index e = 0; e < z0.size(); ++e) z0.data()[e] = normal(rng);
        groups.push_back(g);
        sizes.push_back(o);
        noise.push_back(std::move(z0));
      }
      const Segments seg = Segments::from_sizes(sizes);
      Tensor z0(seg.rows(), d);
      for (std::size_t s = 0; s < noise.size(); ++s) z0.middleRows(seg.offsets[s], sizes[s]) = noise[s];
      const Tensor z1 = euler_sample(denoise, std::move(z0), seg, groups, config);

      for (std::size_t s = 0; s < noise.size(); ++s) {
        const int idx = pending[start + s];
        int& tries = attempt[static_cast<std::size_t>(idx)];
        std::mt19937_64 rng = stream({config.seed, static_cast<std::uint64_t>(idx), static_cast<std::uint64_t>(tries), 1});
        LatentBatch lb;
        lb.z = z1.middleRows(seg.offsets[s], sizes[s]);
        lb.group = groups[s];
        lb.valid.assign(static_cast<std::size_t>(sizes[s]), 1);
        DecodeResult r = decoder.decode(lb, DecodeMode::Sample, &rng, config.temperature);
        if (r.ok()) {
          if (tries == 0) ++out.stats.first_try;
          out.stats.lattice_clamped += r.lattice_clamped > 0;
          r.asu.id = "gen-" + std::to_string(idx);
          slots[static_cast<std::size_t>(idx)] = std::move(r.asu);
          continue;
        }
        if (r.status == DecodeStatus::WyckoffExhausted)
          ++out.stats.rejected_wyckoff;
        else
          ++out.stats.rejected_cell;
        if (++tries >= config.max_attempts)
          throw Error("generate: sample " + std::to_string(idx) + " failed to decode " +
                      std::to_string(config.max_attempts) + " times (last: " + r.message + ")");
        next.push_back(idx);
      }
    }
    pending = std::move(next);
  }
  for (auto& s : slots) out.crystals.push_back(std::move(*s));
  out.stats.produced = static_cast<int>(out.crystals.size());
  return out;
}

}  // namespace symadit
