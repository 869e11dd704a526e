// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors on an append-only tape with a single reverse sweep.
// Gradients survive the sweep only on nodes flagged with retain().

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace dexar::tensor {

using NodeId = std::size_t;
using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

class DiffTensor {
 public:
  DiffTensor() = default;

  DiffTensor(Shape shape, std::vector<double> values)
      : shape_(std::move(shape)), owned_(std::move(values)) {
    if (numel(shape_) != owned_.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape_) + " does not match " +
                                  std::to_string(owned_.size()) + " values");
    }
  }

  // Non-owning view; the caller keeps the storage alive for the tensor's lifetime.
  static DiffTensor borrowed(Shape shape, std::span<const double> view) {
    if (numel(shape) != view.size()) {
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match view");
    }
    DiffTensor t;
    t.shape_ = std::move(shape);
    t.view_ = view;
    t.borrowed_ = true;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return borrowed_ ? view_.size() : owned_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const { return shape_.size(); }

  std::span<const double> values() const {
    return borrowed_ ? view_ : std::span<const double>(owned_);
  }
  std::span<double> mutable_values() {
    if (borrowed_) throw std::logic_error("tensor: borrowed values are read-only");
    return owned_;
  }
  double operator[](std::size_t i) const { return values()[i]; }

  bool has_grad() const { return !grad_.empty(); }
  std::span<const double> grad() const { return grad_; }
  std::span<double> grad_buffer() {
    if (grad_.empty()) grad_.assign(size(), 0.0);
    return grad_;
  }
  void clear_grad() { std::vector<double>().swap(grad_); }

  bool retained() const { return retain_; }
  void set_retain(bool on) { retain_ = on; }

  std::vector<double> to_vector() const {
    auto v = values();
    return {v.begin(), v.end()};
  }

 private:
  Shape shape_;
  std::vector<double> owned_;
  std::span<const double> view_;
  std::vector<double> grad_;
  bool retain_ = false;
  bool borrowed_ = false;
};

class Graph {
 public:
  using Backward = std::function<void(Graph&, NodeId)>;

  struct OpRecord {
    std::string_view kind;
    std::vector<NodeId> inputs;
    Backward backward;
    bool needs_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  NodeId constant(Shape shape, std::vector<double> values) {
    return push("constant", DiffTensor(std::move(shape), std::move(values)), {}, {}, false);
  }
  NodeId constant_view(Shape shape, std::span<const double> view) {
    return push("constant", DiffTensor::borrowed(std::move(shape), view), {}, {}, false);
  }
  // Leaves whose gradient is wanted after the sweep (trainable parameters).
  NodeId variable(Shape shape, std::vector<double> values) {
    NodeId id = push("variable", DiffTensor(std::move(shape), std::move(values)), {}, {}, true);
    tensors_[id].set_retain(true);
    return id;
  }
  NodeId variable_view(Shape shape, std::span<const double> view) {
    NodeId id = push("variable", DiffTensor::borrowed(std::move(shape), view), {}, {}, true);
    tensors_[id].set_retain(true);
    return id;
  }

  NodeId record(std::string_view kind, DiffTensor out, std::vector<NodeId> inputs, Backward bw) {
    bool needs = false;
    for (NodeId in : inputs) {
      if (in >= tensors_.size()) throw std::out_of_range("graph: input id precedes no node");
      needs = needs || ops_[in].needs_grad;
    }
#ifndef NDEBUG
    for (double v : out.values()) {
      if (!std::isfinite(v)) throw std::runtime_error("graph: non-finite value from " + std::string(kind));
    }
#endif
    return push(kind, std::move(out), std::move(inputs), std::move(bw), needs);
  }

  // Flags an interior node so its gradient is kept. Must be called before the
  // node is consumed, since consumers inherit the need for a gradient.
  void retain(NodeId id) {
    tensors_.at(id).set_retain(true);
    ops_[id].needs_grad = true;
  }

  // Shifts one entry of an owned node. Used by finite-difference probes right
  // after the node is produced.
  void nudge(NodeId id, std::size_t index, double delta) {
    tensors_.at(id).mutable_values()[index] += delta;
  }

  const DiffTensor& operator[](NodeId id) const { return tensors_.at(id); }
  const DiffTensor& at(NodeId id) const { return tensors_.at(id); }
  std::span<const double> values(NodeId id) const { return tensors_.at(id).values(); }
  std::span<const double> grad(NodeId id) const { return tensors_.at(id).grad(); }
  const Shape& shape(NodeId id) const { return tensors_.at(id).shape(); }
  const std::vector<NodeId>& inputs(NodeId id) const { return ops_.at(id).inputs; }
  std::string_view kind(NodeId id) const { return ops_.at(id).kind; }
  bool needs_grad(NodeId id) const { return ops_[id].needs_grad; }
  std::size_t size() const { return tensors_.size(); }
  bool empty() const { return tensors_.empty(); }

  // Gradient accumulator for an input, allocated on first touch.
  std::span<double> grad_sink(NodeId id) { return tensors_[id].grad_buffer(); }
  // Upstream gradient of a node during the sweep.
  std::span<const double> upstream(NodeId id) const { return tensors_[id].grad(); }

  void reverse_sweep(NodeId root) {
    if (tensors_.empty()) return;
    if (root >= tensors_.size()) throw std::out_of_range("reverse_sweep: unknown root");
    if (tensors_[root].size() != 1) {
      throw std::invalid_argument("reverse_sweep: root must be scalar, got " +
                                  shape_str(tensors_[root].shape()));
    }
    for (auto& t : tensors_) t.clear_grad();
    tensors_[root].grad_buffer()[0] = 1.0;
    for (NodeId id = root + 1; id-- > 0;) {
      const auto& op = ops_[id];
      if (op.backward && op.needs_grad && tensors_[id].has_grad()) op.backward(*this, id);
    }
    for (auto& t : tensors_) {
      if (t.retained()) {
        t.grad_buffer();
      } else {
        t.clear_grad();
      }
    }
  }

 private:
  NodeId push(std::string_view kind, DiffTensor t, std::vector<NodeId> inputs, Backward bw,
              bool needs) {
    tensors_.push_back(std::move(t));
    ops_.push_back(OpRecord{kind, std::move(inputs), std::move(bw), needs});
    return tensors_.size() - 1;
  }

  std::vector<DiffTensor> tensors_;
  std::vector<OpRecord> ops_;
};

// ---------------------------------------------------------------------------
// Operations. Each computes eagerly and records its vector-Jacobian product.

namespace detail {

inline void require_rank(const Graph& g, NodeId id, std::size_t rank, const char* op) {
  if (g.shape(id).size() != rank) {
    throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got " + shape_str(g.shape(id)));
  }
}

// c[m,n] += a[m,k] * b[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c[m,k] += a[m,n] * b[k,n]^T
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n,
                    std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * n;
    double* ci = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* bp = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
      ci[p] += s;
    }
  }
}

// c[k,n] += a[m,k]^T * b[m,n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    const double* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      double* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

}  // namespace detail

inline NodeId matmul(Graph& g, NodeId a, NodeId b) {
  detail::require_rank(g, a, 2, "matmul");
  detail::require_rank(g, b, 2, "matmul");
  const std::size_t m = g.shape(a)[0], k = g.shape(a)[1], n = g.shape(b)[1];
  if (g.shape(b)[0] != k) {
    throw std::invalid_argument("matmul: inner dimensions differ " + shape_str(g.shape(a)) + " x " +
                                shape_str(g.shape(b)));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(g.values(a).data(), g.values(b).data(), out.data(), m, k, n);
  return g.record("matmul", DiffTensor({m, n}, std::move(out)), {a, b},
                  [m, k, n](Graph& gr, NodeId self) {
                    const NodeId a = gr.inputs(self)[0], b = gr.inputs(self)[1];
                    auto up = gr.upstream(self);
                    if (gr.needs_grad(a)) {
                      detail::gemm_nt(up.data(), gr.values(b).data(), gr.grad_sink(a).data(), m, n, k);
                    }
                    if (gr.needs_grad(b)) {
                      detail::gemm_tn(gr.values(a).data(), up.data(), gr.grad_sink(b).data(), m, k, n);
                    }
                  });
}

inline NodeId add(Graph& g, NodeId a, NodeId b) {
  if (g.shape(a) != g.shape(b)) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(g.shape(a)) + " vs " +
                                shape_str(g.shape(b)));
  }
  auto av = g.values(a), bv = g.values(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return g.record("add", DiffTensor(g.shape(a), std::move(out)), {a, b}, [](Graph& gr, NodeId self) {
    auto up = gr.upstream(self);
    for (NodeId in : gr.inputs(self)) {
      if (!gr.needs_grad(in)) continue;
      auto sink = gr.grad_sink(in);
      for (std::size_t i = 0; i < up.size(); ++i) sink[i] += up[i];
    }
  });
}

inline NodeId mul(Graph& g, NodeId a, NodeId b) {
  if (g.shape(a) != g.shape(b)) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(g.shape(a)) + " vs " +
                                shape_str(g.shape(b)));
  }
  auto av = g.values(a), bv = g.values(b);
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return g.record("mul", DiffTensor(g.shape(a), std::move(out)), {a, b}, [](Graph& gr, NodeId self) {
    const NodeId a = gr.inputs(self)[0], b = gr.inputs(self)[1];
    auto up = gr.upstream(self);
    if (gr.needs_grad(a)) {
      auto sink = gr.grad_sink(a);
      auto bv = gr.values(b);
      for (std::size_t i = 0; i < up.size(); ++i) sink[i] += up[i] * bv[i];
    }
    if (gr.needs_grad(b)) {
      auto sink = gr.grad_sink(b);
      auto av = gr.values(a);
      for (std::size_t i = 0; i < up.size(); ++i) sink[i] += up[i] * av[i];
    }
  });
}

inline NodeId scale(Graph& g, NodeId x, double s) {
  auto xv = g.values(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * xv[i];
  return g.record("scale", DiffTensor(g.shape(x), std::move(out)), {x}, [s](Graph& gr, NodeId self) {
    const NodeId x = gr.inputs(self)[0];
    auto up = gr.upstream(self);
    auto sink = gr.grad_sink(x);
    for (std::size_t i = 0; i < up.size(); ++i) sink[i] += s * up[i];
  });
}

// x[m,n] + bias[n] broadcast over rows.
inline NodeId add_bias(Graph& g, NodeId x, NodeId bias) {
  detail::require_rank(g, x, 2, "add_bias");
  const std::size_t m = g.shape(x)[0], n = g.shape(x)[1];
  if (g.at(bias).size() != n) throw std::invalid_argument("add_bias: bias width mismatch");
  auto xv = g.values(x), bv = g.values(bias);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] + bv[j];
  }
  return g.record("add_bias", DiffTensor({m, n}, std::move(out)), {x, bias},
                  [m, n](Graph& gr, NodeId self) {
                    const NodeId x = gr.inputs(self)[0], b = gr.inputs(self)[1];
                    auto up = gr.upstream(self);
                    if (gr.needs_grad(x)) {
                      auto sink = gr.grad_sink(x);
                      for (std::size_t i = 0; i < up.size(); ++i) sink[i] += up[i];
                    }
                    if (gr.needs_grad(b)) {
                      auto sink = gr.grad_sink(b);
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) sink[j] += up[i * n + j];
                      }
                    }
                  });
}

inline NodeId sum(Graph& g, NodeId x) {
  double s = 0.0;
  for (double v : g.values(x)) s += v;
  return g.record("sum", DiffTensor({1}, {s}), {x}, [](Graph& gr, NodeId self) {
    const NodeId x = gr.inputs(self)[0];
    const double up = gr.upstream(self)[0];
    for (double& v : gr.grad_sink(x)) v += up;
  });
}

// Root-mean-square normalization of each row, scaled by a learned gain.
inline NodeId rms_norm(Graph& g, NodeId x, NodeId gain, double eps = 1e-6) {
  detail::require_rank(g, x, 2, "rms_norm");
  const std::size_t m = g.shape(x)[0], n = g.shape(x)[1];
  if (g.at(gain).size() != n) throw std::invalid_argument("rms_norm: gain width mismatch");
  auto xv = g.values(x), gv = g.values(gain);
  std::vector<double> out(m * n), inv(m);
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += xv[i * n + j] * xv[i * n + j];
    inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = xv[i * n + j] * inv[i] * gv[j];
  }
  return g.record("rms_norm", DiffTensor({m, n}, std::move(out)), {x, gain},
                  [m, n, inv = std::move(inv)](Graph& gr, NodeId self) {
                    const NodeId x = gr.inputs(self)[0], gain = gr.inputs(self)[1];
                    auto up = gr.upstream(self);
                    auto xv = gr.values(x), gv = gr.values(gain);
                    if (gr.needs_grad(x)) {
                      auto sink = gr.grad_sink(x);
                      for (std::size_t i = 0; i < m; ++i) {
                        // d/dx (x * r * g) with r = (mean(x^2)+eps)^-1/2
                        double dot = 0.0;
                        for (std::size_t j = 0; j < n; ++j) dot += up[i * n + j] * gv[j] * xv[i * n + j];
                        const double r = inv[i];
                        const double c = r * r * r * dot / static_cast<double>(n);
                        for (std::size_t j = 0; j < n; ++j) {
                          sink[i * n + j] += up[i * n + j] * gv[j] * r - c * xv[i * n + j];
                        }
                      }
                    }
                    if (gr.needs_grad(gain)) {
                      auto sink = gr.grad_sink(gain);
                      for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) sink[j] += up[i * n + j] * xv[i * n + j] * inv[i];
                      }
                    }
                  });
}

// Tanh-approximated GELU.
inline NodeId gelu(Graph& g, NodeId x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  auto xv = g.values(x);
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = xv[i];
    out[i] = 0.5 * u * (1.0 + std::tanh(k * (u + c * u * u * u)));
  }
  return g.record("gelu", DiffTensor(g.shape(x), std::move(out)), {x}, [](Graph& gr, NodeId self) {
    const NodeId x = gr.inputs(self)[0];
    auto up = gr.upstream(self);
    auto xv = gr.values(x);
    auto sink = gr.grad_sink(x);
    for (std::size_t i = 0; i < up.size(); ++i) {
      const double u = xv[i];
      const double th = std::tanh(k * (u + c * u * u * u));
      const double d = 0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * k * (1.0 + 3.0 * c * u * u);
      sink[i] += up[i] * d;
    }
  });
}

// Softmax over the last dimension. row_limits, when non-empty, restricts row r
// of every trailing [rows, T] matrix to columns [0, row_limits[r % size)); the
// remaining entries are exactly zero.
inline NodeId softmax_rows(Graph& g, NodeId x, std::span<const std::size_t> row_limits = {}) {
  const auto& shape = g.shape(x);
  if (shape.empty() || shape.back() == 0) throw std::invalid_argument("softmax_rows: empty last dimension");
  const std::size_t width = shape.back();
  const std::size_t rows = g.at(x).size() / width;
  std::vector<std::size_t> limits(rows, width);
  if (!row_limits.empty()) {
    for (std::size_t r = 0; r < rows; ++r) {
      limits[r] = row_limits[r % row_limits.size()];
      if (limits[r] == 0 || limits[r] > width) throw std::invalid_argument("softmax_rows: bad row limit");
    }
  }
  auto xv = g.values(x);
  std::vector<double> out(xv.size(), 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * width;
    double* o = out.data() + r * width;
    const std::size_t lim = limits[r];
    double mx = in[0];
    for (std::size_t j = 1; j < lim; ++j) mx = std::max(mx, in[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < lim; ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < lim; ++j) o[j] /= s;
  }
  return g.record("softmax_rows", DiffTensor(shape, std::move(out)), {x},
                  [width, rows, limits = std::move(limits)](Graph& gr, NodeId self) {
                    const NodeId x = gr.inputs(self)[0];
                    auto up = gr.upstream(self);
                    auto s = gr.values(self);
                    auto sink = gr.grad_sink(x);
                    for (std::size_t r = 0; r < rows; ++r) {
                      const std::size_t base = r * width, lim = limits[r];
                      double dot = 0.0;
                      for (std::size_t j = 0; j < lim; ++j) dot += s[base + j] * up[base + j];
                      for (std::size_t j = 0; j < lim; ++j) sink[base + j] += s[base + j] * (up[base + j] - dot);
                    }
                  });
}

// Multi-head scaled dot-product scores: q[Tq,d], k[Tk,d] -> [heads,Tq,Tk].
inline NodeId attention_scores(Graph& g, NodeId q, NodeId k, std::size_t heads) {
  detail::require_rank(g, q, 2, "attention_scores");
  detail::require_rank(g, k, 2, "attention_scores");
  const std::size_t tq = g.shape(q)[0], tk = g.shape(k)[0], d = g.shape(q)[1];
  if (g.shape(k)[1] != d || heads == 0 || d % heads != 0) {
    throw std::invalid_argument("attention_scores: width/head mismatch");
  }
  const std::size_t dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qv = g.values(q), kv = g.values(k);
  std::vector<double> out(heads * tq * tk);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      const double* qi = qv.data() + i * d + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        const double* kj = kv.data() + j * d + h * dh;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) s += qi[c] * kj[c];
        out[(h * tq + i) * tk + j] = s * sc;
      }
    }
  }
  return g.record("attention_scores", DiffTensor({heads, tq, tk}, std::move(out)), {q, k},
                  [heads, tq, tk, d, dh, sc](Graph& gr, NodeId self) {
                    const NodeId q = gr.inputs(self)[0], k = gr.inputs(self)[1];
                    auto up = gr.upstream(self);
                    auto qv = gr.values(q), kv = gr.values(k);
                    const bool gq = gr.needs_grad(q), gk = gr.needs_grad(k);
                    std::span<double> sq, sk;
                    if (gq) sq = gr.grad_sink(q);
                    if (gk) sk = gr.grad_sink(k);
                    for (std::size_t h = 0; h < heads; ++h) {
                      for (std::size_t i = 0; i < tq; ++i) {
                        for (std::size_t j = 0; j < tk; ++j) {
                          const double u = up[(h * tq + i) * tk + j] * sc;
                          if (u == 0.0) continue;
                          const std::size_t qo = i * d + h * dh, ko = j * d + h * dh;
                          if (gq) for (std::size_t c = 0; c < dh; ++c) sq[qo + c] += u * kv[ko + c];
                          if (gk) for (std::size_t c = 0; c < dh; ++c) sk[ko + c] += u * qv[qo + c];
                        }
                      }
                    }
                  });
}

// Applies per-head attention probabilities a[heads,Tq,Tk] to v[Tk,d]; the
// head outputs are concatenated along the width -> [Tq,d].
inline NodeId attention_mix(Graph& g, NodeId a, NodeId v) {
  detail::require_rank(g, a, 3, "attention_mix");
  detail::require_rank(g, v, 2, "attention_mix");
  const std::size_t heads = g.shape(a)[0], tq = g.shape(a)[1], tk = g.shape(a)[2];
  const std::size_t d = g.shape(v)[1];
  if (g.shape(v)[0] != tk || d % heads != 0) throw std::invalid_argument("attention_mix: shape mismatch");
  const std::size_t dh = d / heads;
  auto av = g.values(a), vv = g.values(v);
  std::vector<double> out(tq * d, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < tq; ++i) {
      double* oi = out.data() + i * d + h * dh;
      for (std::size_t j = 0; j < tk; ++j) {
        const double w = av[(h * tq + i) * tk + j];
        if (w == 0.0) continue;
        const double* vj = vv.data() + j * d + h * dh;
        for (std::size_t c = 0; c < dh; ++c) oi[c] += w * vj[c];
      }
    }
  }
  return g.record("attention_mix", DiffTensor({tq, d}, std::move(out)), {a, v},
                  [heads, tq, tk, d, dh](Graph& gr, NodeId self) {
                    const NodeId a = gr.inputs(self)[0], v = gr.inputs(self)[1];
                    auto up = gr.upstream(self);
                    auto av = gr.values(a), vv = gr.values(v);
                    if (gr.needs_grad(a)) {
                      auto sink = gr.grad_sink(a);
                      for (std::size_t h = 0; h < heads; ++h) {
                        for (std::size_t i = 0; i < tq; ++i) {
                          const double* ui = up.data() + i * d + h * dh;
                          for (std::size_t j = 0; j < tk; ++j) {
                            const double* vj = vv.data() + j * d + h * dh;
                            double s = 0.0;
                            for (std::size_t c = 0; c < dh; ++c) s += ui[c] * vj[c];
                            sink[(h * tq + i) * tk + j] += s;
                          }
                        }
                      }
                    }
                    if (gr.needs_grad(v)) {
                      auto sink = gr.grad_sink(v);
                      for (std::size_t h = 0; h < heads; ++h) {
                        for (std::size_t i = 0; i < tq; ++i) {
                          const double* ui = up.data() + i * d + h * dh;
                          for (std::size_t j = 0; j < tk; ++j) {
                            const double w = av[(h * tq + i) * tk + j];
                            if (w == 0.0) continue;
                            double* sj = sink.data() + j * d + h * dh;
                            for (std::size_t c = 0; c < dh; ++c) sj[c] += w * ui[c];
                          }
                        }
                      }
                    }
                  });
}

// Rows of table[V,d] selected by ids -> [ids.size(), d].
inline NodeId gather_rows(Graph& g, NodeId table, std::vector<std::size_t> ids) {
  detail::require_rank(g, table, 2, "gather_rows");
  const std::size_t rows = g.shape(table)[0], d = g.shape(table)[1];
  auto tv = g.values(table);
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= rows) throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " out of range");
    std::copy_n(tv.data() + ids[i] * d, d, out.data() + i * d);
  }
  const std::size_t n = ids.size();
  return g.record("gather_rows", DiffTensor({n, d}, std::move(out)), {table},
                  [d, ids = std::move(ids)](Graph& gr, NodeId self) {
                    const NodeId t = gr.inputs(self)[0];
                    auto up = gr.upstream(self);
                    auto sink = gr.grad_sink(t);
                    for (std::size_t i = 0; i < ids.size(); ++i) {
                      for (std::size_t c = 0; c < d; ++c) sink[ids[i] * d + c] += up[i * d + c];
                    }
                  });
}

inline NodeId slice_rows(Graph& g, NodeId x, std::size_t begin, std::size_t count) {
  detail::require_rank(g, x, 2, "slice_rows");
  const std::size_t m = g.shape(x)[0], n = g.shape(x)[1];
  if (begin + count > m || count == 0) throw std::out_of_range("slice_rows: range exceeds rows");
  auto xv = g.values(x);
  std::vector<double> out(xv.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          xv.begin() + static_cast<std::ptrdiff_t>((begin + count) * n));
  return g.record("slice_rows", DiffTensor({count, n}, std::move(out)), {x},
                  [begin, n](Graph& gr, NodeId self) {
                    const NodeId x = gr.inputs(self)[0];
                    auto up = gr.upstream(self);
                    auto sink = gr.grad_sink(x);
                    for (std::size_t i = 0; i < up.size(); ++i) sink[begin * n + i] += up[i];
                  });
}

inline NodeId concat_rows(Graph& g, NodeId a, NodeId b) {
  detail::require_rank(g, a, 2, "concat_rows");
  detail::require_rank(g, b, 2, "concat_rows");
  const std::size_t n = g.shape(a)[1];
  if (g.shape(b)[1] != n) throw std::invalid_argument("concat_rows: width mismatch");
  const std::size_t ma = g.shape(a)[0], mb = g.shape(b)[0];
  std::vector<double> out;
  out.reserve((ma + mb) * n);
  auto av = g.values(a), bv = g.values(b);
  out.insert(out.end(), av.begin(), av.end());
  out.insert(out.end(), bv.begin(), bv.end());
  return g.record("concat_rows", DiffTensor({ma + mb, n}, std::move(out)), {a, b},
                  [ma, n](Graph& gr, NodeId self) {
                    const NodeId a = gr.inputs(self)[0], b = gr.inputs(self)[1];
                    auto up = gr.upstream(self);
                    if (gr.needs_grad(a)) {
                      auto sink = gr.grad_sink(a);
                      for (std::size_t i = 0; i < ma * n; ++i) sink[i] += up[i];
                    }
                    if (gr.needs_grad(b)) {
                      auto sink = gr.grad_sink(b);
                      for (std::size_t i = 0; i < sink.size(); ++i) sink[i] += up[ma * n + i];
                    }
                  });
}

// Scalar view of one entry.
inline NodeId pick(Graph& g, NodeId x, std::size_t index) {
  if (index >= g.at(x).size()) throw std::out_of_range("pick: index out of range");
  return g.record("pick", DiffTensor({1}, {g.values(x)[index]}), {x}, [index](Graph& gr, NodeId self) {
    const NodeId x = gr.inputs(self)[0];
    gr.grad_sink(x)[index] += gr.upstream(self)[0];
  });
}

// Mean over rows of -log softmax(logits[r])[targets[r]].
inline NodeId cross_entropy(Graph& g, NodeId logits, std::vector<std::size_t> targets) {
  const auto& shape = g.shape(logits);
  if (shape.empty() || shape.back() == 0) throw std::invalid_argument("cross_entropy: empty logits");
  const std::size_t vocab = shape.back();
  const std::size_t rows = g.at(logits).size() / vocab;
  if (targets.size() != rows || rows == 0) throw std::invalid_argument("cross_entropy: target count mismatch");
  auto lv = g.values(logits);
  std::vector<double> probs(lv.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) + " outside vocabulary");
    }
    const double* in = lv.data() + r * vocab;
    double* p = probs.data() + r * vocab;
    const double mx = *std::max_element(in, in + vocab);
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(in[j] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < vocab; ++j) p[j] = std::exp(in[j] - lse);
    loss += lse - in[targets[r]];
  }
  loss /= static_cast<double>(rows);
  return g.record("cross_entropy", DiffTensor({1}, {loss}), {logits},
                  [vocab, rows, probs = std::move(probs), targets = std::move(targets)](Graph& gr,
                                                                                       NodeId self) {
                    const NodeId l = gr.inputs(self)[0];
                    const double up = gr.upstream(self)[0] / static_cast<double>(rows);
                    auto sink = gr.grad_sink(l);
                    for (std::size_t r = 0; r < rows; ++r) {
                      for (std::size_t j = 0; j < vocab; ++j) {
                        const double onehot = (j == targets[r]) ? 1.0 : 0.0;
                        sink[r * vocab + j] += up * (probs[r * vocab + j] - onehot);
                      }
                    }
                  });
}

inline NodeId cross_entropy_next_token(Graph& g, NodeId logits, std::size_t target) {
  return cross_entropy(g, logits, {target});
}

inline void reverse_sweep(Graph& g, NodeId root) { g.reverse_sweep(root); }

}  // namespace dexar::tensor
