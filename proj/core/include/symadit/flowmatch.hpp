#pragma once
//
// Stage 2: flow matching in the latent space of a frozen autoencoder. A
// DiT-style denoiser predicts the clean latents from a straight-line
// interpolant, conditioned on time and (optionally) the space group.
//

#include <functional>
#include <map>
#include <nlohmann/json.hpp>
#include <random>
#include <vector>

#include "symadit/autoencoder.hpp"
#include "symadit/nncore.hpp"

namespace symadit {

// Condition value meaning "no space group" (CFG's unconditional branch).
inline constexpr int kNullCondition = 0;

struct FMConfig {
  nn::AttentionConfig denoiser{128, 4, 2, 4};
  int latent_dim = 16;
  int time_features = 64;  // sinusoidal features of 1000 t
  double condition_dropout = 0.1;
  double self_condition_prob = 0.5;
  nn::AdamConfig optimizer;
  int batch_size = 512;
  int steps = 2000;
  int checkpoint_every = 500;
  std::uint64_t seed = 0;

  static FMConfig desk();
  static FMConfig paper();  // DiT 768 wide, 12 heads, 12 layers, d 32
  void validate() const;
};

void to_json(nlohmann::json& j, const FMConfig& c);
void from_json(const nlohmann::json& j, FMConfig& c);

struct SamplerConfig {
  int steps = 1000;
  double cfg_scale = 2.0;
  std::uint64_t seed = 0;
  bool condition = true;  // false: unconditional velocity; G is still drawn for decoding
  double temperature = 1.0;
  int max_attempts = 100;  // per crystal, before giving up

  void validate() const;
};

// Z_t = (1 - t) Z0 + t Z1.
nn::Tensor interpolate(const nn::Tensor& z0, const nn::Tensor& z1, double t);
// (Z1 - Z_t) / (1 - t); t must be < 1.
nn::Tensor target_field(const nn::Tensor& zt, const nn::Tensor& z1, double t);
// (1 - scale) * uncond + scale * cond.
nn::Tensor guided_prediction(const nn::Tensor& uncond, const nn::Tensor& cond, double scale);

struct EmpiricalPriors {
  std::map<int, double> group;                      // p(G)
  std::map<int, std::map<int, double>> orbits;      // p(O | G)

  int sample_group(std::mt19937_64& rng) const;
  int sample_orbits(int group, std::mt19937_64& rng) const;
  void validate() const;
};

EmpiricalPriors fit_priors(const std::vector<CrystalASU>& data);
void to_json(nlohmann::json& j, const EmpiricalPriors& p);
void from_json(const nlohmann::json& j, EmpiricalPriors& p);

class FlowModel {
 public:
  explicit FlowModel(const FMConfig& config);
  FlowModel(const FlowModel&) = delete;
  FlowModel& operator=(const FlowModel&) = delete;

  const FMConfig& config() const { return config_; }
  nn::ParameterStore& store() { return store_; }
  const nn::ParameterStore& store() const { return store_; }

  // One prediction of the clean latents. `t` and `condition` have one
  // entry per segment; padded rows (valid == 0) are neither attended to nor
  // influenced by anything else.
  nn::Var predict(nn::Graph& g, nn::Var zt, nn::Var self_cond, const std::vector<double>& t,
                  const std::vector<int>& condition, const nn::Segments& segments,
                  const std::vector<std::uint8_t>* valid = nullptr) const;
  nn::Tensor predict(const nn::Tensor& zt, const nn::Tensor& self_cond, const std::vector<double>& t,
                     const std::vector<int>& condition, const nn::Segments& segments) const;

  // Fingerprint of the autoencoder whose latents this model was trained on.
  bool has_autoencoder() const;
  std::uint64_t autoencoder_fingerprint() const;
  void bind_autoencoder(std::uint64_t fingerprint);

 private:
  FMConfig config_;
  nn::ParameterStore store_;
  nn::Parameter* ae_hash_ = nullptr;
  nn::Linear input_;
  nn::Mlp2 time_mlp_;
  nn::Embedding group_emb_;  // 230 groups + the null row
  std::vector<nn::AdaLNBlock> blocks_;
  nn::Linear final_mod_, output_;
};

// Random quantities of one training step.
struct TrainingDraw {
  std::vector<std::size_t> records;  // batch members
  std::vector<double> t;             // per crystal, in [0, 1)
  std::vector<bool> dropped;         // condition replaced by the null token
  bool self_condition = false;
  nn::Tensor noise;                  // Z0, rows follow the packed batch
};

TrainingDraw draw_training(const FMConfig& config, const std::vector<LatentBatch>& data, std::int64_t step);

// Latents of every record under the frozen encoder.
std::vector<LatentBatch> encode_dataset(const Autoencoder& ae, const std::vector<CrystalASU>& data);

struct FMTrainRow {
  std::int64_t step = 0;
  double lr = 0;
  double loss = 0;
  bool self_conditioned = false;
  int dropped = 0;
};

// MSE between predicted and true clean latents over valid rows, for an
// explicit draw.
double flow_loss(const FlowModel& model, const std::vector<LatentBatch>& data, const TrainingDraw& draw);

// Refuses to continue if `frozen`'s parameters differ from those the model
// was first trained against.
void train_flow(FlowModel& model, const Autoencoder& frozen, const std::vector<LatentBatch>& data,
                std::int64_t until_step, const std::function<bool(const FMTrainRow&)>& on_step = {});

// Packed denoiser call: zt rows split by segments, one t for the batch,
// condition per segment (kNullCondition for the unconditional branch).
using DenoiseFn = std::function<nn::Tensor(const nn::Tensor& zt, const nn::Segments& segments, double t,
                                           const nn::Tensor& self_cond, const std::vector<int>& condition)>;

DenoiseFn model_denoiser(const FlowModel& model);

// Euler integration from z0 over t = 0, 1/T, ..., (T-1)/T with guidance and
// self-conditioning on the previous guided prediction.
nn::Tensor euler_sample(const DenoiseFn& denoise, nn::Tensor z0, const nn::Segments& segments,
                        const std::vector<int>& groups, const SamplerConfig& config);

struct SampleStats {
  int requested = 0;
  int produced = 0;
  int first_try = 0;  // decoded without any rejection
  int rejected_wyckoff = 0;
  int rejected_cell = 0;
  int lattice_clamped = 0;

  int rejections() const { return rejected_wyckoff + rejected_cell; }
};

struct Generation {
  std::vector<CrystalASU> crystals;
  SampleStats stats;
};

// Sample i draws from its own stream seeded by (seed, i, attempt), so the
// output does not depend on how samples are batched.
Generation generate(const DenoiseFn& denoise, const Autoencoder& decoder, const EmpiricalPriors& priors,
                    const SamplerConfig& config, int count, int batch = 256);

}  // namespace symadit
