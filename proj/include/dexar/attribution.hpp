// SPDX-License-Identifier: Apache-2.0
//
// Attribution over a completed GenerationTrace: DEX-AR with head and
// filler-token filtering, and the five comparison methods (raw attention,
// rollout, GradCAM, CheferCAM, attention x gradient).

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dexar/binary_io.hpp"
#include "dexar/model.hpp"
#include "dexar/synthdata.hpp"

namespace dexar::attr {

using model::GenerationTrace;
using model::TokenLayout;

// Dense row-major matrix of plain values.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
  }
  friend bool operator==(const Matrix&, const Matrix&) = default;
};

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) throw std::invalid_argument("matmul: inner dimensions differ");
  Matrix out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double v = a.at(i, k);
      if (v == 0.0) continue;
      for (std::size_t j = 0; j < b.cols; ++j) out.at(i, j) += v * b.at(k, j);
    }
  }
  return out;
}

class NotApplicable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Gradient extraction

// Gradients one generation step contributes. lens_rows[l] is the last query
// row of d(lens logit at layer l)/dA^l, shaped [h, keys]. The final_* fields
// are taken with respect to the final logit of the sampled token.
struct StepGradients {
  std::vector<Matrix> lens_rows;
  std::vector<tensor::DiffTensor> final_attention;       // per layer, full [h, Q, K]
  std::vector<std::vector<double>> final_visual_hidden;  // per layer, [N*d]
};

struct TraceGradients {
  std::vector<StepGradients> steps;
};

namespace detail {

inline Matrix last_row(const tensor::Shape& shape, std::span<const double> values) {
  const std::size_t h = shape.at(0), q = shape.at(1), k = shape.at(2);
  Matrix m(h, k);
  for (std::size_t i = 0; i < h; ++i) {
    const double* src = values.data() + (i * q + (q - 1)) * k;
    std::copy(src, src + k, m.row(i).begin());
  }
  return m;
}

inline const model::StepRecord& live_step(const GenerationTrace& trace, std::size_t step) {
  if (step >= trace.steps.size()) throw std::out_of_range("attribution: step out of range");
  const auto& rec = trace.steps[step];
  if (!rec.graph || rec.lens_scalar.size() != trace.config.layers) {
    throw std::invalid_argument("attribution: trace lacks retained attention nodes (generated without graphs)");
  }
  return rec;
}

inline Matrix attention_last_row(const tensor::DiffTensor& a) { return last_row(a.shape(), a.values()); }

}  // namespace detail

// Last row of d(lens logit)/dA at one layer and step.
inline Matrix grad_wrt_attention(const GenerationTrace& trace, std::size_t layer, std::size_t step) {
  const auto& rec = detail::live_step(trace, step);
  if (layer >= trace.config.layers) throw std::out_of_range("grad_wrt_attention: layer out of range");
  auto& g = *rec.graph;
  g.reverse_sweep(rec.lens_scalar[layer]);
  const auto a = rec.pass.attention[layer];
  return detail::last_row(g.shape(a), g.grad(a));
}

// All gradients of one step: L lens sweeps plus the final-logit sweep. With a
// normalized lens the top-layer lens logit is the final logit, so its sweep
// is reused.
inline StepGradients step_gradients(const GenerationTrace& trace, std::size_t step) {
  const auto& rec = detail::live_step(trace, step);
  const std::size_t L = trace.config.layers;
  auto& g = *rec.graph;
  StepGradients out;
  auto capture_final = [&] {
    for (std::size_t l = 0; l < L; ++l) {
      const auto a = rec.pass.attention[l];
      const auto gr = g.grad(a);
      out.final_attention.emplace_back(g.shape(a), std::vector<double>(gr.begin(), gr.end()));
      const auto hb = g.grad(rec.pass.block_input[l]);
      const std::size_t nv = trace.config.n_visual() * trace.config.width;
      out.final_visual_hidden.emplace_back(hb.begin(), hb.begin() + static_cast<std::ptrdiff_t>(nv));
    }
  };
  for (std::size_t l = 0; l < L; ++l) {
    g.reverse_sweep(rec.lens_scalar[l]);
    const auto a = rec.pass.attention[l];
    out.lens_rows.push_back(detail::last_row(g.shape(a), g.grad(a)));
    if (l + 1 == L && trace.config.lens_normalized) capture_final();
  }
  if (!trace.config.lens_normalized) {
    g.reverse_sweep(rec.final_scalar);
    capture_final();
  }
  return out;
}

inline TraceGradients trace_gradients(const GenerationTrace& trace) {
  if (trace.steps.empty()) throw std::invalid_argument("attribution: trace has no generated tokens");
  TraceGradients tg;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) tg.steps.push_back(step_gradients(trace, t));
  return tg;
}

// Splits a [h, keys] row block into visual columns [0,N) and text columns.
inline std::pair<Matrix, Matrix> split_visual_text(const Matrix& grad_row, const TokenLayout& layout) {
  if (grad_row.cols != layout.keys()) {
    throw std::invalid_argument("split_visual_text: width " + std::to_string(grad_row.cols) +
                                " does not match layout width " + std::to_string(layout.keys()));
  }
  const std::size_t n = layout.n_visual;
  if (grad_row.cols <= n) throw std::invalid_argument("split_visual_text: layout has no text columns");
  Matrix v(grad_row.rows, n), t(grad_row.rows, grad_row.cols - n);
  for (std::size_t i = 0; i < grad_row.rows; ++i) {
    const auto r = grad_row.row(i);
    std::copy(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(n), v.row(i).begin());
    std::copy(r.begin() + static_cast<std::ptrdiff_t>(n), r.end(), t.row(i).begin());
  }
  return {std::move(v), std::move(t)};
}

// ---------------------------------------------------------------------------
// Head scoring

struct HeadScoringMode {
  enum class Kind { max, topk, avg };
  Kind kind = Kind::max;
  double fraction = 1.0;  // topk only

  static HeadScoringMode max() { return {}; }
  static HeadScoringMode avg() { return {Kind::avg, 1.0}; }
  static HeadScoringMode topk(double f) {
    if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("topk fraction must lie in (0,1]");
    return {Kind::topk, f};
  }

  // "max", "avg", "topk:0.1"
  static HeadScoringMode parse(const std::string& s) {
    if (s == "max") return max();
    if (s == "avg") return avg();
    if (s.rfind("topk:", 0) == 0) {
      std::size_t used = 0;
      double f = 0.0;
      try {
        f = std::stod(s.substr(5), &used);
      } catch (const std::exception&) {
        throw std::invalid_argument("bad head scoring mode '" + s + "'");
      }
      if (used != s.size() - 5) throw std::invalid_argument("bad head scoring mode '" + s + "'");
      return topk(f);
    }
    throw std::invalid_argument("unknown head scoring mode '" + s + "'");
  }

  std::string name() const {
    switch (kind) {
      case Kind::max: return "max";
      case Kind::avg: return "avg";
      case Kind::topk: {
        std::ostringstream os;
        os << "topk:" << fraction;
        return os.str();
      }
    }
    return "?";
  }
  friend bool operator==(const HeadScoringMode&, const HeadScoringMode&) = default;
};

enum class Magnitude { signed_values, absolute };

inline double head_statistic(std::span<const double> row, const HeadScoringMode& mode,
                             Magnitude mag = Magnitude::signed_values) {
  if (row.empty()) throw std::invalid_argument("head_statistic: empty row");
  std::vector<double> v(row.begin(), row.end());
  if (mag == Magnitude::absolute) {
    for (double& x : v) x = std::abs(x);
  }
  switch (mode.kind) {
    case HeadScoringMode::Kind::max: return *std::max_element(v.begin(), v.end());
    case HeadScoringMode::Kind::avg: {
      double s = 0.0;
      for (double x : v) s += x;
      return s / static_cast<double>(v.size());
    }
    case HeadScoringMode::Kind::topk: {
      const auto k = static_cast<std::size_t>(std::ceil(mode.fraction * static_cast<double>(v.size()) - 1e-12));
      const std::size_t kk = std::clamp<std::size_t>(k, 1, v.size());
      std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(kk), v.end(), std::greater<>());
      double s = 0.0;
      for (std::size_t i = 0; i < kk; ++i) s += v[i];
      return s / static_cast<double>(kk);
    }
  }
  return 0.0;
}

struct HeadScore {
  std::size_t layer = 0;
  std::size_t step = 0;
  std::size_t head = 0;
  double s_img = 0.0;
  double s_text = 0.0;
  double w = 0.0;
};

inline std::vector<HeadScore> head_scores(const Matrix& visual, const Matrix& text, const HeadScoringMode& mode,
                                          Magnitude mag = Magnitude::signed_values) {
  if (visual.rows != text.rows) throw std::invalid_argument("head_scores: head counts differ");
  std::vector<HeadScore> out(visual.rows);
  for (std::size_t i = 0; i < visual.rows; ++i) {
    out[i].head = i;
    out[i].s_img = head_statistic(visual.row(i), mode, mag);
    out[i].s_text = head_statistic(text.row(i), mode, mag);
    out[i].w = std::max(0.0, out[i].s_img - out[i].s_text);
  }
  return out;
}

// ---------------------------------------------------------------------------
// DEX-AR

struct DexArConfig {
  bool relu_on_grad = true;
  std::vector<std::size_t> layers_used;  // 0-based; empty means every layer
  HeadScoringMode head_scoring;
  Magnitude magnitude = Magnitude::signed_values;
  bool head_filtering = true;
  bool filler_filtering = true;
  // Sum normalized per-token grids (default) or raw per-token vectors.
  bool aggregate_normalized = true;

  friend bool operator==(const DexArConfig&, const DexArConfig&) = default;
};

inline void to_json(nlohmann::json& j, const DexArConfig& c) {
  j = {{"relu_on_grad", c.relu_on_grad},
       {"layers_used", c.layers_used},
       {"head_scoring", c.head_scoring.name()},
       {"magnitude", c.magnitude == Magnitude::absolute ? "absolute" : "signed"},
       {"head_filtering", c.head_filtering},
       {"filler_filtering", c.filler_filtering},
       {"aggregate_normalized", c.aggregate_normalized}};
}

inline void from_json(const nlohmann::json& j, DexArConfig& c) {
  DexArConfig d;
  c.relu_on_grad = j.value("relu_on_grad", d.relu_on_grad);
  c.layers_used = j.value("layers_used", d.layers_used);
  c.head_scoring = HeadScoringMode::parse(j.value("head_scoring", std::string("max")));
  const std::string mag = j.value("magnitude", std::string("signed"));
  if (mag != "signed" && mag != "absolute") throw std::invalid_argument("unknown magnitude '" + mag + "'");
  c.magnitude = mag == "absolute" ? Magnitude::absolute : Magnitude::signed_values;
  c.head_filtering = j.value("head_filtering", d.head_filtering);
  c.filler_filtering = j.value("filler_filtering", d.filler_filtering);
  c.aggregate_normalized = j.value("aggregate_normalized", d.aggregate_normalized);
}

inline std::vector<std::size_t> resolve_layers(const DexArConfig& cfg, std::size_t n_layers) {
  if (cfg.layers_used.empty()) {
    std::vector<std::size_t> all(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) all[l] = l;
    return all;
  }
  for (std::size_t l : cfg.layers_used) {
    if (l >= n_layers) throw std::out_of_range("layers_used: layer " + std::to_string(l) + " out of range");
  }
  return cfg.layers_used;
}

// Min-max normalization; constant input maps to zeros.
inline std::vector<double> normalize_minmax(std::span<const double> v) {
  std::vector<double> out(v.size(), 0.0);
  if (v.empty()) return out;
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::clamp((v[i] - *lo) / range, 0.0, 1.0);
  return out;
}

struct TokenAttribution {
  std::vector<double> raw;   // weighted gradient sum over the N visual tokens
  std::vector<double> grid;  // min-max normalized, raster order
  double delta = 0.0;
  std::vector<HeadScore> heads;  // per (layer, head) with the configured scoring mode
};

// Per-token map from the lens gradient rows of every layer. layers_used picks
// which layers enter the sum; the token weight always uses every layer with
// max-mode scores.
inline TokenAttribution dexar_token_from_rows(std::span<const Matrix> rows, const TokenLayout& layout,
                                              const DexArConfig& cfg, std::size_t step = 0) {
  if (rows.empty()) throw std::invalid_argument("dexar: no layers");
  const auto layers = resolve_layers(cfg, rows.size());
  const std::size_t n = layout.n_visual;
  TokenAttribution out;
  out.raw.assign(n, 0.0);
  double max_img = -std::numeric_limits<double>::infinity();
  double max_text = -std::numeric_limits<double>::infinity();
  std::vector<bool> used(rows.size(), false);
  for (std::size_t l : layers) used[l] = true;

  for (std::size_t l = 0; l < rows.size(); ++l) {
    auto [vis, text] = split_visual_text(rows[l], layout);
    if (cfg.relu_on_grad) {
      for (double& x : vis.data) x = std::max(0.0, x);
      for (double& x : text.data) x = std::max(0.0, x);
    }
    for (const auto& hs : head_scores(vis, text, HeadScoringMode::max(), cfg.magnitude)) {
      max_img = std::max(max_img, hs.s_img);
      max_text = std::max(max_text, hs.s_text);
    }
    if (!used[l]) continue;
    auto scores = head_scores(vis, text, cfg.head_scoring, cfg.magnitude);
    for (auto& hs : scores) {
      hs.layer = l;
      hs.step = step;
      const double w = cfg.head_filtering ? hs.w : 1.0;
      if (w == 0.0) continue;
      const auto r = vis.row(hs.head);
      for (std::size_t j = 0; j < n; ++j) out.raw[j] += w * r[j];
    }
    out.heads.insert(out.heads.end(), scores.begin(), scores.end());
  }
  out.delta = std::max(0.0, max_img - max_text);
  out.grid = normalize_minmax(out.raw);
  return out;
}

inline TokenAttribution dexar_token_map(const GenerationTrace& trace, const TraceGradients& grads, std::size_t step,
                                        const DexArConfig& cfg) {
  if (step >= grads.steps.size() || step >= trace.steps.size()) throw std::out_of_range("dexar: step out of range");
  return dexar_token_from_rows(grads.steps[step].lens_rows, trace.steps[step].layout, cfg, step);
}

inline double token_weight(const GenerationTrace& trace, const TraceGradients& grads, std::size_t step,
                           const DexArConfig& cfg = {}) {
  return dexar_token_map(trace, grads, step, cfg).delta;
}

// ---------------------------------------------------------------------------
// Attribution maps

struct AttributionMap {
  std::string method;
  std::size_t grid_w = 0;
  std::size_t grid_h = 0;
  std::vector<std::vector<double>> per_token_raw;
  std::vector<std::vector<double>> per_token_grid;
  std::vector<double> token_weights;  // DEX-AR: token weight delta (applied only with filler filtering); others: 1
  std::vector<double> token_energy;   // applied weight times mean |raw| per token
  std::vector<double> sequence_raw;
  std::vector<double> sequence_grid;
  nlohmann::json config = nlohmann::json::object();
  std::vector<HeadScore> head_scores;

  std::size_t n_tokens() const { return per_token_raw.size(); }
};

namespace detail {

inline double mean_abs(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += std::abs(x);
  return s / static_cast<double>(v.size());
}

inline AttributionMap start_map(const std::string& method, const GenerationTrace& trace) {
  if (trace.steps.empty()) throw std::invalid_argument(method + ": trace has no generated tokens");
  AttributionMap m;
  m.method = method;
  m.grid_w = trace.config.grid_w;
  m.grid_h = trace.config.grid_h;
  return m;
}

// Equal-weight aggregation: the sequence map sums the raw per-token vectors.
inline AttributionMap finish_unweighted(AttributionMap m) {
  const std::size_t n = m.grid_w * m.grid_h;
  m.sequence_raw.assign(n, 0.0);
  for (const auto& r : m.per_token_raw) {
    m.per_token_grid.push_back(normalize_minmax(r));
    m.token_weights.push_back(1.0);
    m.token_energy.push_back(mean_abs(r));
    for (std::size_t j = 0; j < n; ++j) m.sequence_raw[j] += r[j];
  }
  m.sequence_grid = normalize_minmax(m.sequence_raw);
  return m;
}

}  // namespace detail

inline AttributionMap dexar_sequence_map(const GenerationTrace& trace, const TraceGradients& grads,
                                         const DexArConfig& cfg = {}) {
  auto m = detail::start_map("dexar", trace);
  m.config = cfg;
  const std::size_t n = trace.config.n_visual();
  m.sequence_raw.assign(n, 0.0);
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    auto tok = dexar_token_map(trace, grads, t, cfg);
    const double weight = cfg.filler_filtering ? tok.delta : 1.0;
    const auto& term = cfg.aggregate_normalized ? tok.grid : tok.raw;
    for (std::size_t j = 0; j < n; ++j) m.sequence_raw[j] += weight * term[j];
    m.token_weights.push_back(tok.delta);
    m.token_energy.push_back(weight * detail::mean_abs(tok.raw));
    m.head_scores.insert(m.head_scores.end(), tok.heads.begin(), tok.heads.end());
    m.per_token_raw.push_back(std::move(tok.raw));
    m.per_token_grid.push_back(std::move(tok.grid));
  }
  m.sequence_grid = normalize_minmax(m.sequence_raw);
  return m;
}

// Mean over heads of the last attention row's visual entries, summed over
// layers and steps.
inline AttributionMap raw_attention(const GenerationTrace& trace) {
  auto m = detail::start_map("raw_attention", trace);
  const std::size_t n = trace.config.n_visual();
  for (const auto& rec : trace.steps) {
    std::vector<double> r(n, 0.0);
    for (const auto& a : rec.attention) {
      const Matrix last = detail::attention_last_row(a);
      for (std::size_t i = 0; i < last.rows; ++i) {
        for (std::size_t j = 0; j < n; ++j) r[j] += last.at(i, j) / static_cast<double>(last.rows);
      }
    }
    m.per_token_raw.push_back(std::move(r));
  }
  return detail::finish_unweighted(std::move(m));
}

// (mean_h A + I), each row rescaled to sum to 1.
inline Matrix rollout_step_matrix(const tensor::DiffTensor& a) {
  const auto& s = a.shape();
  const std::size_t h = s.at(0), q = s.at(1), k = s.at(2);
  if (q != k) throw NotApplicable("rollout: attention is not square (cross-attention)");
  const auto v = a.values();
  Matrix m(q, k);
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t r = 0; r < q * k; ++r) m.data[r] += v[i * q * k + r] / static_cast<double>(h);
  }
  for (std::size_t r = 0; r < q; ++r) {
    m.at(r, r) += 1.0;
    double sum = 0.0;
    for (double x : m.row(r)) sum += x;
    for (double& x : m.row(r)) x /= sum;
  }
  return m;
}

// R = rollout_step(A^{L-1}) ... rollout_step(A^0).
inline Matrix rollout_matrix(std::span<const tensor::DiffTensor> attention) {
  if (attention.empty()) throw std::invalid_argument("rollout: no layers");
  Matrix r = rollout_step_matrix(attention[0]);
  for (std::size_t l = 1; l < attention.size(); ++l) r = matmul(rollout_step_matrix(attention[l]), r);
  return r;
}

inline AttributionMap rollout(const GenerationTrace& trace) {
  if (trace.config.arch == model::Architecture::encoder_decoder) {
    throw NotApplicable("rollout is not defined for encoder-decoder models");
  }
  auto m = detail::start_map("rollout", trace);
  const std::size_t n = trace.config.n_visual();
  for (const auto& rec : trace.steps) {
    const Matrix r = rollout_matrix(rec.attention);
    const auto last = r.row(r.rows - 1);
    m.per_token_raw.emplace_back(last.begin(), last.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return detail::finish_unweighted(std::move(m));
}

// Per-token GradCAM vector from a visual hidden block Z [N*d] and its gradient.
inline std::vector<double> gradcam_token(std::span<const double> z, std::span<const double> grad, std::size_t n,
                                         std::size_t d) {
  if (z.size() != n * d || grad.size() != n * d) throw std::invalid_argument("gradcam: size mismatch");
  std::vector<double> out(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t c = 0; c < d; ++c) out[j] += std::max(0.0, grad[j * d + c] * z[j * d + c]);
  }
  return out;
}

// Uses the stream entering the given block and the final logit's gradient.
inline AttributionMap gradcam(const GenerationTrace& trace, const TraceGradients& grads, std::size_t layer) {
  if (layer >= trace.config.layers) throw std::out_of_range("gradcam: layer out of range");
  auto m = detail::start_map("gradcam", trace);
  m.config = {{"layer", layer}};
  const std::size_t n = trace.config.n_visual(), d = trace.config.width;
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    m.per_token_raw.push_back(gradcam_token(trace.steps[t].visual_hidden.at(layer),
                                            grads.steps.at(t).final_visual_hidden.at(layer), n, d));
  }
  return detail::finish_unweighted(std::move(m));
}

// R^0 = I; R^l = R^{l-1} + ReLU(sum_h A_h * G_h) R^{l-1}.
inline Matrix chefer_relevance(std::span<const tensor::DiffTensor> attention,
                               std::span<const tensor::DiffTensor> gradients) {
  if (attention.size() != gradients.size() || attention.empty()) {
    throw std::invalid_argument("chefercam: attention/gradient layer counts differ");
  }
  const auto& s0 = attention[0].shape();
  const std::size_t q = s0.at(1), k = s0.at(2);
  if (q != k) throw NotApplicable("chefercam: attention is not square (cross-attention)");
  Matrix r = Matrix::identity(q);
  for (std::size_t l = 0; l < attention.size(); ++l) {
    const auto a = attention[l].values();
    const auto g = gradients[l].values();
    if (a.size() != g.size() || attention[l].shape() != gradients[l].shape()) {
      throw std::invalid_argument("chefercam: gradient shape mismatch");
    }
    const std::size_t h = attention[l].shape().at(0);
    Matrix m(q, k);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t x = 0; x < q * k; ++x) m.data[x] += a[i * q * k + x] * g[i * q * k + x];
    }
    for (double& x : m.data) x = std::max(0.0, x);
    const Matrix upd = matmul(m, r);
    for (std::size_t x = 0; x < r.data.size(); ++x) r.data[x] += upd.data[x];
  }
  return r;
}

inline AttributionMap chefercam(const GenerationTrace& trace, const TraceGradients& grads) {
  if (trace.config.arch == model::Architecture::encoder_decoder) {
    throw NotApplicable("chefercam is not defined for encoder-decoder models");
  }
  auto m = detail::start_map("chefercam", trace);
  const std::size_t n = trace.config.n_visual();
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    const Matrix r = chefer_relevance(trace.steps[t].attention, grads.steps.at(t).final_attention);
    const auto last = r.row(r.rows - 1);
    m.per_token_raw.emplace_back(last.begin(), last.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return detail::finish_unweighted(std::move(m));
}

// ReLU(sum_h A_last,v * dA_last,v) with per-layer lens gradients, summed over
// layers and steps.
inline AttributionMap attn_x_grad(const GenerationTrace& trace, const TraceGradients& grads) {
  auto m = detail::start_map("attn_x_grad", trace);
  const std::size_t n = trace.config.n_visual();
  for (std::size_t t = 0; t < trace.steps.size(); ++t) {
    std::vector<double> r(n, 0.0);
    const auto& rec = trace.steps[t];
    for (std::size_t l = 0; l < rec.attention.size(); ++l) {
      const Matrix a = detail::attention_last_row(rec.attention[l]);
      const Matrix& g = grads.steps.at(t).lens_rows.at(l);
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) s += a.at(i, j) * g.at(i, j);
        r[j] += std::max(0.0, s);
      }
    }
    m.per_token_raw.push_back(std::move(r));
  }
  return detail::finish_unweighted(std::move(m));
}

inline const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"dexar",    "raw_attention", "rollout",
                                              "gradcam",  "chefercam",     "attn_x_grad"};
  return names;
}

inline bool is_known_method(const std::string& s) {
  const auto& n = method_names();
  return std::find(n.begin(), n.end(), s) != n.end();
}

inline bool needs_gradients(const std::string& method) {
  return method != "raw_attention" && method != "rollout";
}

struct MethodOptions {
  DexArConfig dexar;
  std::optional<std::size_t> gradcam_layer;  // default: last layer
};

// grads may be null for methods that do not need gradients.
inline AttributionMap compute_attribution(const std::string& method, const GenerationTrace& trace,
                                          const TraceGradients* grads, const MethodOptions& opt = {}) {
  if (needs_gradients(method) && !grads) throw std::invalid_argument(method + ": gradients required");
  if (method == "dexar") return dexar_sequence_map(trace, *grads, opt.dexar);
  if (method == "raw_attention") return raw_attention(trace);
  if (method == "rollout") return rollout(trace);
  if (method == "gradcam") return gradcam(trace, *grads, opt.gradcam_layer.value_or(trace.config.layers - 1));
  if (method == "chefercam") return chefercam(trace, *grads);
  if (method == "attn_x_grad") return attn_x_grad(trace, *grads);
  throw std::invalid_argument("unknown attribution method '" + method + "'");
}

// ---------------------------------------------------------------------------
// Dump: attribution.json plus token_<k>.f64 and sequence.f64 grid blobs.

inline void write_attribution_dump(const std::filesystem::path& dir, const AttributionMap& m,
                                   const std::vector<std::string>& token_strings) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["format"] = "dexar-attribution";
  j["version"] = 1;
  j["method"] = m.method;
  j["config"] = m.config;
  j["grid_w"] = m.grid_w;
  j["grid_h"] = m.grid_h;
  j["tokens"] = token_strings;
  j["delta"] = m.token_weights;
  std::vector<std::string> files;
  for (std::size_t t = 0; t < m.per_token_grid.size(); ++t) {
    char name[32];
    std::snprintf(name, sizeof name, "token_%03zu.f64", t);
    io::write_f64_file(dir / name, m.per_token_grid[t]);
    files.emplace_back(name);
  }
  io::write_f64_file(dir / "sequence.f64", m.sequence_grid);
  j["token_files"] = files;
  j["sequence_file"] = "sequence.f64";
  std::ofstream os(dir / "attribution.json");
  if (!os) throw std::runtime_error("cannot write " + (dir / "attribution.json").string());
  os << j.dump(2) << '\n';
}

struct AttributionDump {
  std::string method;
  nlohmann::json config;
  std::size_t grid_w = 0, grid_h = 0;
  std::vector<std::string> tokens;
  std::vector<double> delta;
  std::vector<std::vector<double>> token_grids;
  std::vector<double> sequence_grid;
};

inline AttributionDump read_attribution_dump(const std::filesystem::path& dir) {
  std::ifstream is(dir / "attribution.json");
  if (!is) throw std::runtime_error("cannot read " + (dir / "attribution.json").string());
  const auto j = nlohmann::json::parse(is);
  AttributionDump d;
  d.method = j.at("method").get<std::string>();
  d.config = j.at("config");
  d.grid_w = j.at("grid_w").get<std::size_t>();
  d.grid_h = j.at("grid_h").get<std::size_t>();
  d.tokens = j.at("tokens").get<std::vector<std::string>>();
  d.delta = j.at("delta").get<std::vector<double>>();
  for (const auto& f : j.at("token_files")) d.token_grids.push_back(io::read_f64_file(dir / f.get<std::string>()));
  d.sequence_grid = io::read_f64_file(dir / j.at("sequence_file").get<std::string>());
  return d;
}

}  // namespace dexar::attr
