#pragma once
//
// Dense float64 tensors with a tape-based reverse-mode autodiff, the layer
// set used by the autoencoder and the flow-matching denoiser, an Adam
// optimizer, and binary checkpoints.
//

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace symadit::nn {

// Rank-2, row-major. Vectors are 1 x n rows; scalars are 1 x 1.
using Tensor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline constexpr double kLayerNormEps = 1e-8;
inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Parameter {
  Tensor value;
  Tensor grad;
  Tensor m;  // Adam first moment
  Tensor v;  // Adam second moment
  bool trainable = true;
};

// Parameters keyed and iterated by name. References returned by create()
// and at() stay valid for the store's lifetime.
class ParameterStore {
 public:
  Parameter& create(const std::string& name, Tensor init, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::map<std::string, Parameter>& params() { return params_; }
  const std::map<std::string, Parameter>& params() const { return params_; }

  void zero_grad();
  std::size_t scalar_count(bool trainable_only = true) const;
  // FNV-1a over names, shapes and raw values.
  std::uint64_t fingerprint() const;

  std::int64_t step = 0;  // optimizer updates applied

 private:
  std::map<std::string, Parameter> params_;
};

class Graph;

class Var {
 public:
  Var() = default;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  const Tensor& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double item() const;
  Graph* graph() const { return graph_; }
  int id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }

 private:
  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Row ranges of a packed batch: segment s owns rows [offsets[s], offsets[s+1]).
struct Segments {
  std::vector<int> offsets{0};

  static Segments single(int rows) { return Segments{{0, rows}}; }
  static Segments from_sizes(const std::vector<int>& sizes);
  int count() const { return static_cast<int>(offsets.size()) - 1; }
  int rows() const { return offsets.back(); }
  int size(int s) const { return offsets[s + 1] - offsets[s]; }
  std::vector<int> row_segment() const;
};

// One forward pass. Nodes are recorded in execution order; backward()
// replays them in reverse.
class Graph {
 public:
  // Called with the node's own id; reads grad(self) and accumulates into
  // the parents' grads.
  using Backward = std::function<void(Graph&, int self)>;

  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var param(Parameter& p);

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // reachable trainable parameter.
  void backward(Var loss);

  const Tensor& value(int id) const { return *nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  // Gradient buffer of a node, zero-initialized on first access.
  Tensor& grad(int id);
  bool has_grad(int id) const;
  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor value, std::vector<int> parents, Backward backward);

  bool check_finite = false;

 private:
  struct Node {
    Tensor own;
    const Tensor* value = nullptr;
    Tensor own_grad;
    Tensor* grad = nullptr;
    bool needs_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
  bool backward_done_ = false;
};

// Row-order independent product: every output row is computed with the same
// instruction sequence, so permuting rows of `a` permutes the result bitwise.
Tensor matmul_rowstable(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var add_row(Var a, Var row);  // a (n x m) + row (1 x m), broadcast
Var mul_row(Var a, Var row);
Var silu(Var a);
Var layer_norm(Var a, double eps = kLayerNormEps);  // per row, no affine
Var softmax_rows(Var a);
Var gather_rows(Var table, std::vector<int> index);
Var segment_sum(Var a, const Segments& seg);
Var concat_cols(const std::vector<Var>& parts);
Var slice_cols(Var a, int start, int count);
Var detach(Var a);
Var sum(Var a);
Var mean(Var a);
// z / sqrt(1 + (z / bound)^2): odd, monotone, slope 1 at 0, |out| < bound.
Var saturate(Var a, double bound = 5.0);
double saturate(double z, double bound = 5.0);

struct AttentionMask {
  const Segments* segments = nullptr;
  const std::vector<std::uint8_t>* key_valid = nullptr;  // nullptr: all rows valid
};

// Scaled dot-product attention over `heads` column groups, restricted to
// keys in the query's segment. Keys are reduced in a canonical value order,
// so outputs are bitwise equivariant under row permutations within a
// segment. No positional signal of any kind.
Var attention(Var q, Var k, Var v, int heads, const AttentionMask& mask);

// out[i][c] = x[i] . w[:, columns[i][c]] + b[columns[i][c]] for the listed
// columns, kNegInf beyond them (rows padded to the longest list).
Var gathered_linear(Var x, Var w, Var b, std::vector<std::vector<int>> columns);

// Weighted mean over rows of -log softmax(logits)[target]. Entries equal to
// kNegInf carry zero probability. Rows with weight 0 are ignored.
Var cross_entropy(Var logits, std::vector<int> targets, std::vector<double> row_weight);
// mean over mask-selected entries of 1 - cos(2 pi (pred - target)).
Var periodic_cosine_loss(Var pred, const Tensor& target, const Tensor& mask);
// mean over mask-selected entries of (pred - target)^2.
Var masked_mse(Var pred, const Tensor& target, const Tensor& mask);

// ---------------------------------------------------------------------------
// Initialization

Tensor xavier_uniform(int rows, int cols, std::mt19937_64& rng, double gain = 1.0);
Tensor normal_tensor(int rows, int cols, double stddev, std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Layers. Each holds pointers into a ParameterStore; the store must outlive
// the layer and must not be copied out from under it.

struct AttentionConfig {
  int model_dim = 128;
  int heads = 4;
  int layers = 2;
  int ff_mult = 4;

  void validate() const;
};

class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore& store, const std::string& name, int in, int out, std::mt19937_64& rng, bool bias = true,
         bool zero_init = false);
  Var operator()(Graph& g, Var x) const;
  Parameter& weight() const { return *w_; }
  Parameter* bias() const { return b_; }
  int in() const { return in_; }
  int out() const { return out_; }

 private:
  Parameter* w_ = nullptr;
  Parameter* b_ = nullptr;
  int in_ = 0, out_ = 0;
};

// Linear -> SiLU -> Linear.
class Mlp2 {
 public:
  Mlp2() = default;
  Mlp2(ParameterStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng,
       bool zero_last = false);
  Var operator()(Graph& g, Var x) const;

 private:
  Linear first_, second_;
};

class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore& store, const std::string& name, int dim);
  Var operator()(Graph& g, Var x) const;

 private:
  Parameter* gamma_ = nullptr;
  Parameter* beta_ = nullptr;
};

class Embedding {
 public:
  Embedding() = default;
  Embedding(ParameterStore& store, const std::string& name, int count, int dim, std::mt19937_64& rng,
            double stddev = 0.5);
  Var operator()(Graph& g, const std::vector<int>& index) const;
  int count() const { return count_; }

 private:
  Parameter* table_ = nullptr;
  int count_ = 0;
};

class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore& store, const std::string& name, int dim, int heads, std::mt19937_64& rng);
  Var operator()(Graph& g, Var x, const AttentionMask& mask) const;

 private:
  Linear q_, k_, v_, o_;
  int heads_ = 1;
};

// Pre-norm encoder block: x + MHSA(LN(x)), then x + MLP(LN(x)).
class TransformerBlock {
 public:
  TransformerBlock() = default;
  TransformerBlock(ParameterStore& store, const std::string& name, const AttentionConfig& cfg, std::mt19937_64& rng);
  Var operator()(Graph& g, Var x, const AttentionMask& mask) const;

 private:
  LayerNorm ln1_, ln2_;
  MultiHeadAttention attn_;
  Mlp2 ff_;
};

// LN(x) * (1 + scale) + shift with per-row shift/scale.
Var adaptive_layer_norm(Var x, Var shift, Var scale);

// DiT block with adaLN-Zero: per-segment condition vectors produce shift,
// scale and gate for both sublayers; the modulation map starts at zero so
// each block starts as the identity.
class AdaLNBlock {
 public:
  AdaLNBlock() = default;
  AdaLNBlock(ParameterStore& store, const std::string& name, const AttentionConfig& cfg, std::mt19937_64& rng);
  // cond: one row per segment.
  Var operator()(Graph& g, Var x, Var cond, const AttentionMask& mask) const;

 private:
  Linear modulation_;
  MultiHeadAttention attn_;
  Mlp2 ff_;
  int dim_ = 0;
};

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int warmup_steps = 100;
  double weight_decay = 0.0;  // decoupled
  double clip_norm = 0.0;     // 0 disables
  int decay_steps = 0;        // cosine decay to min_lr_ratio * lr; 0 keeps lr constant
  double min_lr_ratio = 0.0;
};

double learning_rate(const AdamConfig& cfg, std::int64_t step);
// Global L2 norm of all trainable gradients.
double grad_norm(const ParameterStore& store);
// One update; returns the learning rate used. Increments store.step.
double adam_step(ParameterStore& store, const AdamConfig& cfg);

// ---------------------------------------------------------------------------
// Checkpoints

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path);
ParameterStore load_checkpoint(const std::filesystem::path& path);
// Copies values and optimizer state into an existing store whose names and
// shapes must match exactly.
void load_checkpoint_into(ParameterStore& store, const std::filesystem::path& path);

}  // namespace symadit::nn
