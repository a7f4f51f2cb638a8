#pragma once
//
// Stage 1: per-orbit latent autoencoder over asymmetric units. The decoder
// output is projected through the symmetrizers, so every decoded ASU obeys
// its space group by construction.
//

#include <nlohmann/json.hpp>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "symadit/crystal.hpp"
#include "symadit/nncore.hpp"

namespace symadit {

struct LossWeights {
  double atom = 1.0;
  double wyckoff = 1.0;
  double frac = 5.0;
  double lattice = 1.0;
};

struct AugmentSigmas {
  double frac = 0.01;           // fractional units, on free parameters
  double length_relative = 0.02;
  double angle_degrees = 1.0;
};

struct AEConfig {
  nn::AttentionConfig encoder{128, 4, 2, 4};
  nn::AttentionConfig decoder{128, 4, 2, 4};
  int latent_dim = 16;
  double saturation = 5.0;
  LossWeights weights;
  AugmentSigmas augment;
  bool use_augmentation = true;
  nn::AdamConfig optimizer;
  int batch_size = 512;
  int steps = 2000;
  int checkpoint_every = 500;
  std::uint64_t seed = 0;

  static AEConfig desk();
  static AEConfig paper();  // d_m 512, 8 heads, 8 layers, d 32
  void validate() const;
};

void to_json(nlohmann::json& j, const AEConfig& c);
void from_json(const nlohmann::json& j, AEConfig& c);

// Per-orbit latents of one crystal.
struct LatentBatch {
  nn::Tensor z;  // N x d
  int group = 1;
  std::vector<std::uint8_t> valid;  // per row; padded rows are zero

  int orbit_count() const { return static_cast<int>(z.rows()); }
};

// Packed training batch: crystals are consecutive row segments.
struct AsuBatch {
  std::vector<int> groups;
  nn::Segments segments;
  std::vector<int> elements;        // atomic number - 1, per token
  std::vector<int> wyckoff_global;  // per token
  std::vector<int> wyckoff_local;   // index within the group's list
  std::vector<std::vector<int>> wyckoff_columns;  // the group's global indices, per token
  nn::Tensor frac;            // n x 3
  nn::Tensor frac_free;       // n x 3, 1 on free coordinate slots
  nn::Tensor lattice_target;  // B x 6, normalized
  nn::Tensor lattice_free;    // B x 6

  int tokens() const { return segments.rows(); }
  int crystals() const { return segments.count(); }
};

struct LossBreakdown {
  double total = 0, atom = 0, wyckoff = 0, frac = 0, lattice = 0;
};

// Raw head outputs for one crystal. Wyckoff logits span all catalog
// positions, with kNegInf outside the crystal's group.
struct AEOutputs {
  nn::Tensor wyckoff_logits;  // N x 1731
  nn::Tensor atom_logits;     // N x 100
  nn::Tensor frac_pred;       // N x 3
  LatticeParams lattice_pred{};  // physical units, before S_G
};

enum class DecodeMode { Argmax, Sample };

enum class DecodeStatus { Ok, WyckoffExhausted, InvalidCell };

struct DecodeResult {
  DecodeStatus status = DecodeStatus::Ok;
  CrystalASU asu;
  AEOutputs outputs;
  int lattice_clamped = 0;
  std::string message;

  bool ok() const { return status == DecodeStatus::Ok; }
};

std::string_view to_string(DecodeStatus s);

struct ReconstructionMetrics {
  double atom_accuracy = 0;     // fraction of orbits
  double wyckoff_accuracy = 0;  // fraction of orbits
  double frac_circular_error = 0;  // mean over true free slots of the wrapped distance
  double lattice_rel_error = 0;    // mean relative error over free lattice slots
  int crystals = 0;
  int tokens = 0;
};

class Autoencoder {
 public:
  Autoencoder(const AEConfig& config, const SymmetryCatalog& catalog);
  Autoencoder(const Autoencoder&) = delete;
  Autoencoder& operator=(const Autoencoder&) = delete;

  const AEConfig& config() const { return config_; }
  const SymmetryCatalog& catalog() const { return *catalog_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  // Log-length statistics used to normalize the lattice, held in a
  // non-trainable buffer so checkpoints carry them.
  void fit_lattice_stats(const std::vector<CrystalASU>& data);
  double length_log_mean() const;
  double length_log_std() const;

  AsuBatch make_batch(const std::vector<const CrystalASU*>& crystals) const;

  nn::Var encode(nn::Graph& g, const AsuBatch& batch) const;  // tokens x d, saturated
  struct HeadVars {
    nn::Var wyckoff;  // tokens x max group size (local columns)
    nn::Var atom;     // tokens x 100
    nn::Var frac;     // tokens x 3
    nn::Var lattice;  // crystals x 6, normalized space
  };
  HeadVars decode_heads(nn::Graph& g, nn::Var z, const nn::Segments& segments,
                        const std::vector<std::vector<int>>& wyckoff_columns) const;
  nn::Var loss(const AsuBatch& batch, const HeadVars& heads, LossBreakdown* breakdown = nullptr) const;

  LatentBatch encode(const CrystalASU& asu) const;
  // Packed latents for several crystals (rows follow the crystals' sites).
  nn::Tensor encode_packed(const std::vector<const CrystalASU*>& crystals) const;

  DecodeResult decode(const LatentBatch& latents, DecodeMode mode = DecodeMode::Argmax,
                      std::mt19937_64* rng = nullptr, double temperature = 1.0) const;

  ReconstructionMetrics evaluate(const std::vector<CrystalASU>& data) const;

  // Lattice parameters <-> normalized head space.
  std::array<double, 6> normalize_lattice(const LatticeParams& l) const;
  LatticeParams denormalize_lattice(const std::array<double, 6>& v) const;

 private:
  AEConfig config_;
  const SymmetryCatalog* catalog_;
  nn::ParameterStore store_;
  nn::Parameter* lattice_stats_ = nullptr;

  // encoder
  nn::Embedding element_emb_, wyckoff_emb_, group_emb_;
  nn::Mlp2 frac_mlp_, lattice_mlp_;
  std::vector<nn::TransformerBlock> enc_blocks_;
  nn::LayerNorm enc_norm_;
  nn::Linear to_latent_;
  // decoder
  nn::Linear from_latent_;
  std::vector<nn::TransformerBlock> dec_blocks_;
  nn::LayerNorm dec_norm_;
  nn::Linear wyckoff_head_, atom_head_;
  nn::Mlp2 frac_head_, lattice_head_;
};

// Gaussian noise on the free fractional parameters and free lattice slots
// only, followed by re-symmetrization. Zero sigmas return the input.
CrystalASU augment(const CrystalASU& asu, const AugmentSigmas& sigmas, const SymmetryCatalog& catalog,
                   std::mt19937_64& rng);

// expand_asu followed by the 0.5 Angstrom distance check.
bool reconstruction_gate(const CrystalASU& asu, const SymmetryCatalog& catalog);

struct AETrainRow {
  std::int64_t step = 0;
  double lr = 0;
  LossBreakdown loss;
};

// Deterministic in (config.seed, step): batch selection and augmentation
// for step s depend only on them, so a resumed run repeats the same losses.
// `on_step` may return false to stop early.
void train_autoencoder(Autoencoder& model, const std::vector<CrystalASU>& data, std::int64_t until_step,
                       const std::function<bool(const AETrainRow&)>& on_step = {});

// Loss of the step-`step` batch with the current parameters, no update.
LossBreakdown autoencoder_step_loss(const Autoencoder& model, const std::vector<CrystalASU>& data, std::int64_t step);

}  // namespace symadit
