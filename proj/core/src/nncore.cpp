#include "symadit/nncore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <numbers>

#include "symadit/error.hpp"

namespace symadit::nn {

namespace {

std::string shape(const Tensor& t) { return std::to_string(t.rows()) + "x" + std::to_string(t.cols()); }

Graph& graph_of(Var a) {
  if (!a.valid()) throw Error("operation on an empty Var");
  return *a.graph();
}

Graph& graph_of(Var a, Var b, const char* op) {
  Graph& g = graph_of(a);
  if (b.graph() != &g) throw Error(std::string(op) + ": operands belong to different graphs");
  return g;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw Error(std::string(op) + ": shape mismatch " + shape(a) + " vs " + shape(b));
}

std::uint64_t fnv(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::create(const std::string& name, Tensor init, bool trainable) {
  if (params_.count(name)) throw Error("parameter '" + name + "' already exists");
  Parameter p;
  p.grad = Tensor::Zero(init.rows(), init.cols());
  p.m = Tensor::Zero(init.rows(), init.cols());
  p.v = Tensor::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  p.trainable = trainable;
  return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParameterStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("no parameter named '" + name + "'");
  return it->second;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("no parameter named '" + name + "'");
  return it->second;
}

void ParameterStore::zero_grad() {
  for (auto& [_, p] : params_) p.grad.setZero();
}

std::size_t ParameterStore::scalar_count(bool trainable_only) const {
  std::size_t n = 0;
  for (const auto& [_, p] : params_)
    if (p.trainable || !trainable_only) n += static_cast<std::size_t>(p.value.size());
  return n;
}

std::uint64_t ParameterStore::fingerprint() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, p] : params_) {
    h = fnv(name.data(), name.size(), h);
    const std::int64_t dims[2] = {p.value.rows(), p.value.cols()};
    h = fnv(dims, sizeof dims, h);
    h = fnv(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(double), h);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Graph

const Tensor& Var::value() const {
  if (!graph_) throw Error("value() of an empty Var");
  return graph_->value(id_);
}

double Var::item() const {
  const Tensor& v = value();
  if (v.size() != 1) throw Error("item() on a " + shape(v) + " tensor");
  return v(0, 0);
}

Segments Segments::from_sizes(const std::vector<int>& sizes) {
  Segments s;
  for (int n : sizes) {
    if (n < 0) throw Error("negative segment size");
    s.offsets.push_back(s.offsets.back() + n);
  }
  return s;
}

std::vector<int> Segments::row_segment() const {
  std::vector<int> out(static_cast<std::size_t>(rows()));
  for (int s = 0; s < count(); ++s)
    for (int r = offsets[s]; r < offsets[s + 1]; ++r) out[static_cast<std::size_t>(r)] = s;
  return out;
}

Graph::Graph() {
#ifndef NDEBUG
  check_finite = true;
#endif
}

Var Graph::constant(Tensor value) { return record(std::move(value), {}, nullptr); }

Var Graph::param(Parameter& p) {
  Node& n = nodes_.emplace_back();
  n.value = &p.value;
  n.needs_grad = p.trainable;
  if (p.trainable) {
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols())
      p.grad = Tensor::Zero(p.value.rows(), p.value.cols());
    n.grad = &p.grad;
  }
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Graph::record(Tensor value, std::vector<int> parents, Backward backward) {
  if (check_finite) {
    for (Eigen::Index i = 0; i < value.size(); ++i) {
      const double x = value.data()[i];
      // -inf is the masking value and therefore allowed.
      if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
        throw Error("non-finite value produced at node " + std::to_string(nodes_.size()));
    }
  }
  bool needs = false;
  for (int p : parents) needs = needs || nodes_[static_cast<std::size_t>(p)].needs_grad;
  Node& n = nodes_.emplace_back();
  n.own = std::move(value);
  n.value = &n.own;
  n.needs_grad = needs;
  if (needs) n.backward = std::move(backward);
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor& Graph::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad) {
    n.own_grad = Tensor::Zero(n.value->rows(), n.value->cols());
    n.grad = &n.own_grad;
  }
  return *n.grad;
}

bool Graph::has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad != nullptr; }

void Graph::backward(Var loss) {
  if (nodes_.empty() || loss.graph() != this) throw Error("backward() called before a forward pass");
  if (backward_done_) throw Error("backward() called twice on the same graph");
  const Tensor& v = value(loss.id());
  if (v.size() != 1) throw Error("backward() needs a scalar loss, got " + shape(v));
  backward_done_ = true;
  if (!needs_grad(loss.id())) return;
  grad(loss.id())(0, 0) += 1.0;
  for (int i = loss.id(); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.backward && n.grad) n.backward(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Kernels

Tensor matmul_rowstable(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw Error("matmul: shape mismatch " + shape(a) + " * " + shape(b));
  const Eigen::Index n = a.rows(), k = a.cols(), m = b.cols();
  Tensor c = Tensor::Zero(n, m);
  constexpr Eigen::Index kBlock = 256;
  const double* A = a.data();
  const double* B = b.data();
  for (Eigen::Index j0 = 0; j0 < m; j0 += kBlock) {
    const Eigen::Index jn = std::min(kBlock, m - j0);
    Eigen::Index i = 0;
    for (; i + 4 <= n; i += 4) {
      double* __restrict c0 = c.data() + i * m + j0;
      double* __restrict c1 = c0 + m;
      double* __restrict c2 = c1 + m;
      double* __restrict c3 = c2 + m;
      for (Eigen::Index p = 0; p < k; ++p) {
        const double a0 = A[i * k + p], a1 = A[(i + 1) * k + p], a2 = A[(i + 2) * k + p], a3 = A[(i + 3) * k + p];
        const double* __restrict bp = B + p * m + j0;
        for (Eigen::Index j = 0; j < jn; ++j) {
          const double bv = bp[j];
          c0[j] = std::fma(a0, bv, c0[j]);
          c1[j] = std::fma(a1, bv, c1[j]);
          c2[j] = std::fma(a2, bv, c2[j]);
          c3[j] = std::fma(a3, bv, c3[j]);
        }
      }
    }
    for (; i < n; ++i) {
      double* __restrict c0 = c.data() + i * m + j0;
      for (Eigen::Index p = 0; p < k; ++p) {
        const double a0 = A[i * k + p];
        const double* __restrict bp = B + p * m + j0;
        for (Eigen::Index j = 0; j < jn; ++j) c0[j] = std::fma(a0, bp[j], c0[j]);
      }
    }
  }
  return c;
}

// ---------------------------------------------------------------------------
// Ops

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b, "matmul");
  Tensor out = matmul_rowstable(a.value(), b.value());
  const int ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Tensor& gc = g.grad(self);
    if (g.needs_grad(ia)) g.grad(ia).noalias() += gc * g.value(ib).transpose();
    if (g.needs_grad(ib)) g.grad(ib).noalias() += g.value(ia).transpose() * gc;
  });
}

Var add(Var a, Var b) {
  Graph& g = graph_of(a, b, "add");
  require_same_shape(a.value(), b.value(), "add");
  const int ia = a.id(), ib = b.id();
  return g.record(a.value() + b.value(), {ia, ib}, [ia, ib](Graph& g, int self) {
    if (g.needs_grad(ia)) g.grad(ia) += g.grad(self);
    if (g.needs_grad(ib)) g.grad(ib) += g.grad(self);
  });
}

Var sub(Var a, Var b) {
  Graph& g = graph_of(a, b, "sub");
  require_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id(), ib = b.id();
  return g.record(a.value() - b.value(), {ia, ib}, [ia, ib](Graph& g, int self) {
    if (g.needs_grad(ia)) g.grad(ia) += g.grad(self);
    if (g.needs_grad(ib)) g.grad(ib) -= g.grad(self);
  });
}

Var mul(Var a, Var b) {
  Graph& g = graph_of(a, b, "mul");
  require_same_shape(a.value(), b.value(), "mul");
  const int ia = a.id(), ib = b.id();
  return g.record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Graph& g, int self) {
    const Tensor& gc = g.grad(self);
    if (g.needs_grad(ia)) g.grad(ia) += gc.cwiseProduct(g.value(ib));
    if (g.needs_grad(ib)) g.grad(ib) += gc.cwiseProduct(g.value(ia));
  });
}

Var scale(Var a, double s) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  return g.record(a.value() * s, {ia}, [ia, s](Graph& g, int self) { g.grad(ia) += g.grad(self) * s; });
}

Var add_scalar(Var a, double s) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  return g.record(a.value().array() + s, {ia}, [ia](Graph& g, int self) { g.grad(ia) += g.grad(self); });
}

Var add_row(Var a, Var row) {
  Graph& g = graph_of(a, row, "add_row");
  if (row.rows() != 1 || row.cols() != a.cols())
    throw Error("add_row: shape mismatch " + shape(a.value()) + " + " + shape(row.value()));
  const int ia = a.id(), ir = row.id();
  Tensor out = a.value();
  out.rowwise() += row.value().row(0);
  return g.record(std::move(out), {ia, ir}, [ia, ir](Graph& g, int self) {
    const Tensor& gc = g.grad(self);
    if (g.needs_grad(ia)) g.grad(ia) += gc;
    if (g.needs_grad(ir)) g.grad(ir) += gc.colwise().sum();
  });
}

Var mul_row(Var a, Var row) {
  Graph& g = graph_of(a, row, "mul_row");
  if (row.rows() != 1 || row.cols() != a.cols())
    throw Error("mul_row: shape mismatch " + shape(a.value()) + " * " + shape(row.value()));
  const int ia = a.id(), ir = row.id();
  Tensor out = a.value().array().rowwise() * row.value().row(0).array();
  return g.record(std::move(out), {ia, ir}, [ia, ir](Graph& g, int self) {
    const Tensor& gc = g.grad(self);
    if (g.needs_grad(ia)) g.grad(ia).array() += gc.array().rowwise() * g.value(ir).row(0).array();
    if (g.needs_grad(ir)) g.grad(ir) += gc.cwiseProduct(g.value(ia)).colwise().sum();
  });
}

Var silu(Var a) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  const Tensor& x = a.value();
  Tensor out = x.array() / (1.0 + (-x.array()).exp());
  return g.record(std::move(out), {ia}, [ia](Graph& g, int self) {
    const auto x = g.value(ia).array();
    const Eigen::ArrayXXd s = 1.0 / (1.0 + (-x).exp());
    g.grad(ia).array() += g.grad(self).array() * (s * (1.0 + x * (1.0 - s)));
  });
}

Var layer_norm(Var a, double eps) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  const Tensor& x = a.value();
  const Eigen::Index n = x.rows(), m = x.cols();
  Tensor out(n, m);
  auto rstd = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const double var = (x.row(i).array() - mu).square().mean();
    (*rstd)[i] = 1.0 / std::sqrt(var + eps);
    out.row(i) = (x.row(i).array() - mu) * (*rstd)[i];
  }
  const int id = static_cast<int>(g.size());
  return g.record(std::move(out), {ia}, [ia, rstd, id](Graph& g, int self) {
    const Tensor& y = g.value(id);
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad(ia);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double mg = gy.row(i).mean();
      const double mgy = gy.row(i).cwiseProduct(y.row(i)).mean();
      gx.row(i).array() += (*rstd)[i] * (gy.row(i).array() - mg - y.row(i).array() * mgy);
    }
  });
}

Var softmax_rows(Var a) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  const Tensor& x = a.value();
  Tensor out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    // std::exp keeps masked (-inf) entries at exactly zero.
    for (Eigen::Index j = 0; j < x.cols(); ++j) out(i, j) = std::exp(x(i, j) - mx);
    out.row(i) /= out.row(i).sum();
  }
  const int id = static_cast<int>(g.size());
  return g.record(std::move(out), {ia}, [ia, id](Graph& g, int self) {
    const Tensor& y = g.value(id);
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad(ia);
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      const double d = gy.row(i).dot(y.row(i));
      gx.row(i).array() += y.row(i).array() * (gy.row(i).array() - d);
    }
  });
}

Var gather_rows(Var table, std::vector<int> index) {
  Graph& g = graph_of(table);
  const Tensor& t = table.value();
  Tensor out(static_cast<Eigen::Index>(index.size()), t.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= t.rows())
      throw Error("gather_rows: index " + std::to_string(index[r]) + " outside table of " + shape(t));
    out.row(static_cast<Eigen::Index>(r)) = t.row(index[r]);
  }
  const int it = table.id();
  return g.record(std::move(out), {it}, [it, index = std::move(index)](Graph& g, int self) {
    const Tensor& gy = g.grad(self);
    Tensor& gt = g.grad(it);
    for (std::size_t r = 0; r < index.size(); ++r) gt.row(index[r]) += gy.row(static_cast<Eigen::Index>(r));
  });
}

Var segment_sum(Var a, const Segments& seg) {
  Graph& g = graph_of(a);
  const Tensor& x = a.value();
  if (seg.rows() != x.rows())
    throw Error("segment_sum: segments cover " + std::to_string(seg.rows()) + " rows, input is " + shape(x));
  Tensor out = Tensor::Zero(seg.count(), x.cols());
  for (int s = 0; s < seg.count(); ++s)
    for (int r = seg.offsets[s]; r < seg.offsets[s + 1]; ++r) out.row(s) += x.row(r);
  const int ia = a.id();
  return g.record(std::move(out), {ia}, [ia, offsets = seg.offsets](Graph& g, int self) {
    const Tensor& gy = g.grad(self);
    Tensor& gx = g.grad(ia);
    for (std::size_t s = 0; s + 1 < offsets.size(); ++s)
      for (int r = offsets[s]; r < offsets[s + 1]; ++r) gx.row(r) += gy.row(static_cast<Eigen::Index>(s));
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  Graph& g = graph_of(parts[0]);
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const Var& p : parts) {
    if (p.graph() != &g) throw Error("concat_cols: operands belong to different graphs");
    if (p.rows() != parts[0].rows())
      throw Error("concat_cols: row mismatch " + shape(parts[0].value()) + " vs " + shape(p.value()));
    cols += p.cols();
    ids.push_back(p.id());
  }
  Tensor out(parts[0].rows(), cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return g.record(std::move(out), ids, [ids](Graph& g, int self) {
    const Tensor& gy = g.grad(self);
    Eigen::Index c = 0;
    for (int id : ids) {
      const Eigen::Index w = g.value(id).cols();
      if (g.needs_grad(id)) g.grad(id) += gy.middleCols(c, w);
      c += w;
    }
  });
}

Var slice_cols(Var a, int start, int count) {
  Graph& g = graph_of(a);
  if (start < 0 || count < 0 || start + count > a.cols())
    throw Error("slice_cols: [" + std::to_string(start) + ", +" + std::to_string(count) + ") outside " +
                shape(a.value()));
  const int ia = a.id();
  return g.record(a.value().middleCols(start, count), {ia}, [ia, start, count](Graph& g, int self) {
    g.grad(ia).middleCols(start, count) += g.grad(self);
  });
}

Var detach(Var a) { return graph_of(a).constant(a.value()); }

Var sum(Var a) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  Tensor out(1, 1);
  out(0, 0) = a.value().sum();
  return g.record(std::move(out), {ia}, [ia](Graph& g, int self) { g.grad(ia).array() += g.grad(self)(0, 0); });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw Error("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

double saturate(double z, double bound) {
  const double r = z / bound;
  return z / std::sqrt(1.0 + r * r);
}

Var saturate(Var a, double bound) {
  Graph& g = graph_of(a);
  const int ia = a.id();
  Tensor out = a.value().unaryExpr([bound](double z) { return saturate(z, bound); });
  return g.record(std::move(out), {ia}, [ia, bound](Graph& g, int self) {
    const auto r = g.value(ia).array() / bound;
    g.grad(ia).array() += g.grad(self).array() * (1.0 + r.square()).pow(-1.5);
  });
}

// ---------------------------------------------------------------------------
// Attention

namespace {

struct AttentionCache {
  struct Block {
    int segment, head;
    std::vector<int> keys;  // canonical key order (row indices)
    Tensor probs;           // queries x keys
  };
  std::vector<Block> blocks;
};

bool canonical_less(const double* a, const double* b, int n) {
  for (int i = 0; i < n; ++i) {
    if (a[i] < b[i]) return true;
    if (b[i] < a[i]) return false;
    const auto ua = std::bit_cast<std::uint64_t>(a[i]), ub = std::bit_cast<std::uint64_t>(b[i]);
    if (ua != ub) return ua < ub;
  }
  return false;
}

}  // namespace

Var attention(Var q, Var k, Var v, int heads, const AttentionMask& mask) {
  Graph& g = graph_of(q, k, "attention");
  graph_of(q, v, "attention");
  const Tensor &Q = q.value(), &K = k.value(), &V = v.value();
  require_same_shape(Q, K, "attention");
  require_same_shape(Q, V, "attention");
  const int n = static_cast<int>(Q.rows()), dim = static_cast<int>(Q.cols());
  if (heads <= 0 || dim % heads != 0)
    throw Error("attention: width " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  const Segments whole = Segments::single(n);
  const Segments& seg = mask.segments ? *mask.segments : whole;
  if (seg.rows() != n) throw Error("attention: segments cover " + std::to_string(seg.rows()) + " rows, input has " +
                                   std::to_string(n));
  if (mask.key_valid && static_cast<int>(mask.key_valid->size()) != n)
    throw Error("attention: key mask length mismatch");
  const int dh = dim / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  auto cache = std::make_shared<AttentionCache>();
  Tensor out = Tensor::Zero(n, dim);
  std::vector<double> scores;
  for (int s = 0; s < seg.count(); ++s) {
    const int lo = seg.offsets[s], hi = seg.offsets[s + 1];
    for (int h = 0; h < heads; ++h) {
      const int c0 = h * dh;
      AttentionCache::Block blk{s, h, {}, {}};
      for (int r = lo; r < hi; ++r)
        if (!mask.key_valid || (*mask.key_valid)[static_cast<std::size_t>(r)]) blk.keys.push_back(r);
      std::sort(blk.keys.begin(), blk.keys.end(), [&](int x, int y) {
        if (canonical_less(&K(x, c0), &K(y, c0), dh)) return true;
        if (canonical_less(&K(y, c0), &K(x, c0), dh)) return false;
        return canonical_less(&V(x, c0), &V(y, c0), dh);
      });
      const int nk = static_cast<int>(blk.keys.size());
      blk.probs = Tensor::Zero(hi - lo, nk);
      if (nk == 0) {
        cache->blocks.push_back(std::move(blk));
        continue;
      }
      scores.assign(static_cast<std::size_t>(nk), 0.0);
      for (int i = lo; i < hi; ++i) {
        double mx = kNegInf;
        for (int j = 0; j < nk; ++j) {
          const int kr = blk.keys[static_cast<std::size_t>(j)];
          double d = 0.0;
          for (int c = 0; c < dh; ++c) d += Q(i, c0 + c) * K(kr, c0 + c);
          scores[static_cast<std::size_t>(j)] = d * sc;
          mx = std::max(mx, d * sc);
        }
        double z = 0.0;
        for (int j = 0; j < nk; ++j) {
          const double e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
          blk.probs(i - lo, j) = e;
          z += e;
        }
        for (int j = 0; j < nk; ++j) {
          const double p = blk.probs(i - lo, j) / z;
          blk.probs(i - lo, j) = p;
          const int kr = blk.keys[static_cast<std::size_t>(j)];
          for (int c = 0; c < dh; ++c) out(i, c0 + c) += p * V(kr, c0 + c);
        }
      }
      cache->blocks.push_back(std::move(blk));
    }
  }

  const int iq = q.id(), ik = k.id(), iv = v.id();
  return g.record(std::move(out), {iq, ik, iv}, [=, offsets = seg.offsets](Graph& g, int self) {
    const Tensor &Q = g.value(iq), &K = g.value(ik), &V = g.value(iv);
    const Tensor& gO = g.grad(self);
    const bool wq = g.needs_grad(iq), wk = g.needs_grad(ik), wv = g.needs_grad(iv);
    Tensor* gQ = wq ? &g.grad(iq) : nullptr;
    Tensor* gK = wk ? &g.grad(ik) : nullptr;
    Tensor* gV = wv ? &g.grad(iv) : nullptr;
    for (const auto& blk : cache->blocks) {
      const int lo = offsets[static_cast<std::size_t>(blk.segment)];
      const int nq = static_cast<int>(blk.probs.rows()), nk = static_cast<int>(blk.probs.cols());
      const int c0 = blk.head * dh;
      for (int qi = 0; qi < nq; ++qi) {
        const int i = lo + qi;
        std::vector<double> dp(static_cast<std::size_t>(nk));
        double rowdot = 0.0;
        for (int j = 0; j < nk; ++j) {
          const int kr = blk.keys[static_cast<std::size_t>(j)];
          const double p = blk.probs(qi, j);
          double d = 0.0;
          for (int c = 0; c < dh; ++c) {
            d += gO(i, c0 + c) * V(kr, c0 + c);
            if (gV) (*gV)(kr, c0 + c) += p * gO(i, c0 + c);
          }
          dp[static_cast<std::size_t>(j)] = d;
          rowdot += p * d;
        }
        for (int j = 0; j < nk; ++j) {
          const int kr = blk.keys[static_cast<std::size_t>(j)];
          const double ds = blk.probs(qi, j) * (dp[static_cast<std::size_t>(j)] - rowdot) * sc;
          for (int c = 0; c < dh; ++c) {
            if (gQ) (*gQ)(i, c0 + c) += ds * K(kr, c0 + c);
            if (gK) (*gK)(kr, c0 + c) += ds * Q(i, c0 + c);
          }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Heads and losses

Var gathered_linear(Var x, Var w, Var b, std::vector<std::vector<int>> columns) {
  Graph& g = graph_of(x, w, "gathered_linear");
  graph_of(x, b, "gathered_linear");
  const Tensor &X = x.value(), &W = w.value(), &B = b.value();
  if (W.rows() != X.cols() || B.rows() != 1 || B.cols() != W.cols() ||
      static_cast<Eigen::Index>(columns.size()) != X.rows())
    throw Error("gathered_linear: shape mismatch x " + shape(X) + ", w " + shape(W) + ", b " + shape(B) + ", " +
                std::to_string(columns.size()) + " column lists");
  std::size_t width = 0;
  for (const auto& c : columns) width = std::max(width, c.size());
  Tensor out = Tensor::Constant(X.rows(), static_cast<Eigen::Index>(width), kNegInf);
  for (Eigen::Index i = 0; i < X.rows(); ++i) {
    const auto& cols = columns[static_cast<std::size_t>(i)];
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const int col = cols[c];
      if (col < 0 || col >= W.cols()) throw Error("gathered_linear: column " + std::to_string(col) + " out of range");
      double d = B(0, col);
      for (Eigen::Index p = 0; p < X.cols(); ++p) d += X(i, p) * W(p, col);
      out(i, static_cast<Eigen::Index>(c)) = d;
    }
  }
  const int ix = x.id(), iw = w.id(), ib = b.id();
  return g.record(std::move(out), {ix, iw, ib}, [ix, iw, ib, columns = std::move(columns)](Graph& g, int self) {
    const Tensor &X = g.value(ix), &W = g.value(iw);
    const Tensor& gy = g.grad(self);
    Tensor* gx = g.needs_grad(ix) ? &g.grad(ix) : nullptr;
    Tensor* gw = g.needs_grad(iw) ? &g.grad(iw) : nullptr;
    Tensor* gb = g.needs_grad(ib) ? &g.grad(ib) : nullptr;
    for (Eigen::Index i = 0; i < X.rows(); ++i) {
      const auto& cols = columns[static_cast<std::size_t>(i)];
      for (std::size_t c = 0; c < cols.size(); ++c) {
        const double gv = gy(i, static_cast<Eigen::Index>(c));
        if (gv == 0.0) continue;
        const int col = cols[c];
        if (gb) (*gb)(0, col) += gv;
        for (Eigen::Index p = 0; p < X.cols(); ++p) {
          if (gx) (*gx)(i, p) += gv * W(p, col);
          if (gw) (*gw)(p, col) += gv * X(i, p);
        }
      }
    }
  });
}

Var cross_entropy(Var logits, std::vector<int> targets, std::vector<double> row_weight) {
  Graph& g = graph_of(logits);
  const Tensor& L = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != L.rows() || targets.size() != row_weight.size())
    throw Error("cross_entropy: " + std::to_string(targets.size()) + " targets / " +
                std::to_string(row_weight.size()) + " weights for logits " + shape(L));
  double wsum = 0.0;
  for (double w : row_weight) wsum += w;
  auto probs = std::make_shared<Tensor>(Tensor::Zero(L.rows(), L.cols()));
  double total = 0.0;
  for (Eigen::Index i = 0; i < L.rows(); ++i) {
    const double w = row_weight[static_cast<std::size_t>(i)];
    if (w == 0.0) continue;
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= L.cols() || !std::isfinite(L(i, t)))
      throw Error("cross_entropy: target " + std::to_string(t) + " of row " + std::to_string(i) +
                  " is out of range or masked");
    const double mx = L.row(i).maxCoeff();
    double z = 0.0;
    for (Eigen::Index j = 0; j < L.cols(); ++j) z += std::exp(L(i, j) - mx);
    for (Eigen::Index j = 0; j < L.cols(); ++j) (*probs)(i, j) = std::exp(L(i, j) - mx) / z;
    total += w * (mx + std::log(z) - L(i, t));
  }
  Tensor out(1, 1);
  out(0, 0) = wsum > 0 ? total / wsum : 0.0;
  const int il = logits.id();
  return g.record(std::move(out), {il},
                  [il, probs, wsum, targets = std::move(targets), row_weight = std::move(row_weight)](Graph& g,
                                                                                                      int self) {
                    if (wsum <= 0) return;
                    const double go = g.grad(self)(0, 0);
                    Tensor& gl = g.grad(il);
                    for (Eigen::Index i = 0; i < gl.rows(); ++i) {
                      const double w = row_weight[static_cast<std::size_t>(i)];
                      if (w == 0.0) continue;
                      const double f = go * w / wsum;
                      gl.row(i) += f * probs->row(i);
                      gl(i, targets[static_cast<std::size_t>(i)]) -= f;
                    }
                  });
}

// Entries with mask 0 are skipped, not multiplied by zero; sums run in row order.
Var periodic_cosine_loss(Var pred, const Tensor& target, const Tensor& mask) {
  Graph& g = graph_of(pred);
  require_same_shape(pred.value(), target, "periodic_cosine_loss");
  require_same_shape(pred.value(), mask, "periodic_cosine_loss");
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  const Tensor& P = pred.value();
  double count = 0, total = 0;
  Tensor dgrad = Tensor::Zero(mask.rows(), mask.cols());
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      const double m = mask(i, j);
      if (m == 0.0) continue;
      const double delta = kTwoPi * (P(i, j) - target(i, j));
      total += m * (1.0 - std::cos(delta));
      dgrad(i, j) = m * kTwoPi * std::sin(delta);
      count += m;
    }
  Tensor out(1, 1);
  out(0, 0) = count > 0 ? total / count : 0.0;
  if (count > 0) dgrad /= count;
  const int ip = pred.id();
  return g.record(std::move(out), {ip},
                  [ip, dgrad = std::move(dgrad)](Graph& g, int self) { g.grad(ip) += g.grad(self)(0, 0) * dgrad; });
}

Var masked_mse(Var pred, const Tensor& target, const Tensor& mask) {
  Graph& g = graph_of(pred);
  require_same_shape(pred.value(), target, "masked_mse");
  require_same_shape(pred.value(), mask, "masked_mse");
  const Tensor& P = pred.value();
  double count = 0, total = 0;
  Tensor dgrad = Tensor::Zero(mask.rows(), mask.cols());
  for (Eigen::Index i = 0; i < P.rows(); ++i)
    for (Eigen::Index j = 0; j < P.cols(); ++j) {
      const double m = mask(i, j);
      if (m == 0.0) continue;
      const double diff = (P(i, j) - target(i, j)) * m;
      total += diff * diff;
      dgrad(i, j) = 2.0 * diff * m;
      count += m;
    }
  Tensor out(1, 1);
  out(0, 0) = count > 0 ? total / count : 0.0;
  if (count > 0) dgrad /= count;
  const int ip = pred.id();
  return g.record(std::move(out), {ip},
                  [ip, dgrad = std::move(dgrad)](Graph& g, int self) { g.grad(ip) += g.grad(self)(0, 0) * dgrad; });
}

// ---------------------------------------------------------------------------
// Initialization

Tensor xavier_uniform(int rows, int cols, std::mt19937_64& rng, double gain) {
  const double limit = gain * std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> u(-limit, limit);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
  return t;
}

Tensor normal_tensor(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor t(rows, cols);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
  return t;
}

// ---------------------------------------------------------------------------
// Layers

void AttentionConfig::validate() const {
  if (model_dim <= 0 || heads <= 0 || layers < 0 || ff_mult <= 0)
    throw Error("attention config: dimensions must be positive");
  if (model_dim % heads != 0)
    throw Error("attention config: model_dim " + std::to_string(model_dim) + " not divisible by " +
                std::to_string(heads) + " heads");
}

Linear::Linear(ParameterStore& store, const std::string& name, int in, int out, std::mt19937_64& rng, bool bias,
               bool zero_init)
    : in_(in), out_(out) {
  w_ = &store.create(name + ".w", zero_init ? Tensor(Tensor::Zero(in, out)) : xavier_uniform(in, out, rng));
  if (bias) b_ = &store.create(name + ".b", Tensor::Zero(1, out));
}

Var Linear::operator()(Graph& g, Var x) const {
  if (x.cols() != in_)
    throw Error("linear: input " + shape(x.value()) + " for a " + std::to_string(in_) + "->" + std::to_string(out_) +
                " layer");
  Var y = matmul(x, g.param(*w_));
  return b_ ? add_row(y, g.param(*b_)) : y;
}

Mlp2::Mlp2(ParameterStore& store, const std::string& name, int in, int hidden, int out, std::mt19937_64& rng,
           bool zero_last)
    : first_(store, name + ".fc1", in, hidden, rng), second_(store, name + ".fc2", hidden, out, rng, true, zero_last) {}

Var Mlp2::operator()(Graph& g, Var x) const { return second_(g, silu(first_(g, x))); }

LayerNorm::LayerNorm(ParameterStore& store, const std::string& name, int dim) {
  gamma_ = &store.create(name + ".gamma", Tensor::Ones(1, dim));
  beta_ = &store.create(name + ".beta", Tensor::Zero(1, dim));
}

Var LayerNorm::operator()(Graph& g, Var x) const {
  return add_row(mul_row(layer_norm(x), g.param(*gamma_)), g.param(*beta_));
}

Embedding::Embedding(ParameterStore& store, const std::string& name, int count, int dim, std::mt19937_64& rng,
                     double stddev)
    : count_(count) {
  table_ = &store.create(name, normal_tensor(count, dim, stddev, rng));
}

Var Embedding::operator()(Graph& g, const std::vector<int>& index) const {
  return gather_rows(g.param(*table_), index);
}

MultiHeadAttention::MultiHeadAttention(ParameterStore& store, const std::string& name, int dim, int heads,
                                       std::mt19937_64& rng)
    : q_(store, name + ".q", dim, dim, rng),
      k_(store, name + ".k", dim, dim, rng),
      v_(store, name + ".v", dim, dim, rng),
      o_(store, name + ".o", dim, dim, rng),
      heads_(heads) {}

Var MultiHeadAttention::operator()(Graph& g, Var x, const AttentionMask& mask) const {
  return o_(g, attention(q_(g, x), k_(g, x), v_(g, x), heads_, mask));
}

TransformerBlock::TransformerBlock(ParameterStore& store, const std::string& name, const AttentionConfig& cfg,
                                   std::mt19937_64& rng)
    : ln1_(store, name + ".ln1", cfg.model_dim),
      ln2_(store, name + ".ln2", cfg.model_dim),
      attn_(store, name + ".attn", cfg.model_dim, cfg.heads, rng),
      ff_(store, name + ".ff", cfg.model_dim, cfg.model_dim * cfg.ff_mult, cfg.model_dim, rng) {
  cfg.validate();
}

Var TransformerBlock::operator()(Graph& g, Var x, const AttentionMask& mask) const {
  x = add(x, attn_(g, ln1_(g, x), mask));
  return add(x, ff_(g, ln2_(g, x)));
}

Var adaptive_layer_norm(Var x, Var shift, Var scale_) { return add(mul(layer_norm(x), add_scalar(scale_, 1.0)), shift); }

AdaLNBlock::AdaLNBlock(ParameterStore& store, const std::string& name, const AttentionConfig& cfg,
                       std::mt19937_64& rng)
    : modulation_(store, name + ".mod", cfg.model_dim, 6 * cfg.model_dim, rng, true, true),
      attn_(store, name + ".attn", cfg.model_dim, cfg.heads, rng),
      ff_(store, name + ".ff", cfg.model_dim, cfg.model_dim * cfg.ff_mult, cfg.model_dim, rng),
      dim_(cfg.model_dim) {
  cfg.validate();
}

Var AdaLNBlock::operator()(Graph& g, Var x, Var cond, const AttentionMask& mask) const {
  if (!mask.segments) throw Error("adaln block: segments are required to broadcast the condition");
  if (cond.rows() != mask.segments->count())
    throw Error("adaln block: " + std::to_string(cond.rows()) + " condition rows for " +
                std::to_string(mask.segments->count()) + " segments");
  Var mod = gather_rows(modulation_(g, silu(cond)), mask.segments->row_segment());
  auto part = [&](int i) { return slice_cols(mod, i * dim_, dim_); };
  x = add(x, mul(part(2), attn_(g, adaptive_layer_norm(x, part(0), part(1)), mask)));
  return add(x, mul(part(5), ff_(g, adaptive_layer_norm(x, part(3), part(4)))));
}

// ---------------------------------------------------------------------------
// Optimizer

double learning_rate(const AdamConfig& cfg, std::int64_t step) {
  double lr = cfg.lr;
  if (cfg.warmup_steps > 0) lr *= std::min(1.0, static_cast<double>(step + 1) / cfg.warmup_steps);
  if (cfg.decay_steps > 0) {
    const double progress = std::min(1.0, static_cast<double>(step) / cfg.decay_steps);
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
    lr *= cfg.min_lr_ratio + (1.0 - cfg.min_lr_ratio) * cosine;
  }
  return lr;
}

double grad_norm(const ParameterStore& store) {
  double s = 0.0;
  for (const auto& [_, p] : store.params())
    if (p.trainable) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

double adam_step(ParameterStore& store, const AdamConfig& cfg) {
  const double lr = learning_rate(cfg, store.step);
  double factor = 1.0;
  if (cfg.clip_norm > 0) {
    const double n = grad_norm(store);
    if (n > cfg.clip_norm) factor = cfg.clip_norm / n;
  }
  const double t = static_cast<double>(store.step + 1);
  const double c1 = 1.0 - std::pow(cfg.beta1, t), c2 = 1.0 - std::pow(cfg.beta2, t);
  for (auto& [_, p] : store.params()) {
    if (!p.trainable) continue;
    auto g = p.grad.array() * factor;
    p.m.array() = cfg.beta1 * p.m.array() + (1.0 - cfg.beta1) * g;
    p.v.array() = cfg.beta2 * p.v.array() + (1.0 - cfg.beta2) * g * g;
    p.value.array() -= lr * ((p.m.array() / c1) / ((p.v.array() / c2).sqrt() + cfg.eps) +
                             cfg.weight_decay * p.value.array());
  }
  ++store.step;
  return lr;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[] = "CKPT v1\n";

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error("checkpoint truncated");
  return v;
}

void put_tensor(std::ostream& out, const Tensor& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) put(out, std::bit_cast<std::uint64_t>(t.data()[i]));
}

void get_tensor(std::istream& in, Tensor& t) {
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = std::bit_cast<double>(get<std::uint64_t>(in));
}

}  // namespace

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write checkpoint '" + path.string() + "'");
    out.write(kMagic, sizeof kMagic - 1);
    put<std::uint64_t>(out, store.params().size());
    for (const auto& [name, p] : store.params()) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
      out.write(name.data(), static_cast<std::streamsize>(name.size()));
      put<std::uint32_t>(out, 2);
      put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.rows()));
      put<std::uint64_t>(out, static_cast<std::uint64_t>(p.value.cols()));
      put<std::uint8_t>(out, p.trainable ? 1 : 0);
      put_tensor(out, p.value);
    }
    put<std::int64_t>(out, store.step);
    for (const auto& [_, p] : store.params()) {
      put_tensor(out, p.m);
      put_tensor(out, p.v);
    }
    if (!out) throw Error("error writing checkpoint '" + path.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

ParameterStore load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof kMagic - 1];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw Error("'" + path.string() + "' is not a CKPT v1 checkpoint");
  ParameterStore store;
  const auto count = get<std::uint64_t>(in);
  std::vector<Parameter*> order;
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw Error("checkpoint: implausible name length");
    std::string name(len, '\0');
    in.read(name.data(), len);
    const auto rank = get<std::uint32_t>(in);
    if (rank != 2) throw Error("checkpoint: parameter '" + name + "' has unsupported rank " + std::to_string(rank));
    const auto rows = get<std::uint64_t>(in), cols = get<std::uint64_t>(in);
    const bool trainable = get<std::uint8_t>(in) != 0;
    Tensor t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    get_tensor(in, t);
    order.push_back(&store.create(name, std::move(t), trainable));
  }
  store.step = get<std::int64_t>(in);
  for (Parameter* p : order) {
    get_tensor(in, p->m);
    get_tensor(in, p->v);
  }
  return store;
}

void load_checkpoint_into(ParameterStore& store, const std::filesystem::path& path) {
  ParameterStore loaded = load_checkpoint(path);
  if (loaded.params().size() != store.params().size())
    throw Error("checkpoint '" + path.string() + "' has " + std::to_string(loaded.params().size()) +
                " parameters, model expects " + std::to_string(store.params().size()));
  for (auto& [name, p] : store.params()) {
    auto it = loaded.params().find(name);
    if (it == loaded.params().end()) throw Error("checkpoint lacks parameter '" + name + "'");
    const Parameter& q = it->second;
    if (q.value.rows() != p.value.rows() || q.value.cols() != p.value.cols())
      throw Error("checkpoint parameter '" + name + "' has shape " + shape(q.value) + ", model expects " +
                  shape(p.value));
    p.value = q.value;
    p.m = q.m;
    p.v = q.v;
    p.grad.setZero();
  }
  store.step = loaded.step;
}

}  // namespace symadit::nn
