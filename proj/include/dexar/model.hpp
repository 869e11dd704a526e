// SPDX-License-Identifier: Apache-2.0
//
// Toy autoregressive vision-language transformer. Linear patch embeddings are
// concatenated with word embeddings and run through pre-norm transformer
// blocks. Three layouts are supported: causal decoder-only, prefix-LM (the
// visual+context block is bidirectional), and encoder-decoder where the answer
// decoder cross-attends to the encoded visual+context tokens.

#pragma once

#include <nlohmann/json.hpp>

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dexar/binary_io.hpp"
#include "dexar/image.hpp"
#include "dexar/synthdata.hpp"
#include "dexar/tensor.hpp"

namespace dexar::model {

using synth::TokenId;
using tensor::Graph;
using tensor::NodeId;

enum class Architecture { decoder_only, prefix_lm, encoder_decoder };

inline std::string to_string(Architecture a) {
  switch (a) {
    case Architecture::decoder_only: return "decoder_only";
    case Architecture::prefix_lm: return "prefix_lm";
    case Architecture::encoder_decoder: return "encoder_decoder";
  }
  return "?";
}

inline Architecture parse_architecture(const std::string& s) {
  if (s == "decoder_only") return Architecture::decoder_only;
  if (s == "prefix_lm") return Architecture::prefix_lm;
  if (s == "encoder_decoder") return Architecture::encoder_decoder;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t vocab = 64;
  std::size_t image_side = 32;
  std::size_t patch_size = 8;
  std::size_t channels = 3;
  std::size_t grid_w = 4;
  std::size_t grid_h = 4;
  std::size_t mlp_hidden = 256;
  std::size_t max_seq = 48;
  Architecture arch = Architecture::decoder_only;
  std::uint64_t seed = 0;
  // Apply the final pre-head norm to intermediate states before the LM head.
  bool lens_normalized = true;

  std::size_t n_visual() const { return grid_w * grid_h; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("ModelConfig: " + m); };
    if (layers == 0 || heads == 0 || width == 0 || vocab == 0 || channels == 0 || mlp_hidden == 0) {
      fail("all counts must be >= 1");
    }
    if (width % heads != 0) fail("width must be divisible by heads");
    if (patch_size == 0 || image_side % patch_size != 0) fail("image_side must be a multiple of patch_size");
    const std::size_t per_side = image_side / patch_size;
    if (grid_w != per_side || grid_h != per_side) fail("grid must be (image_side/patch_size) on each side");
    if (vocab < synth::Vocabulary::size()) fail("vocab smaller than the dataset vocabulary");
    if (max_seq <= n_visual()) fail("max_seq must exceed the visual token count");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"layers", c.layers},         {"heads", c.heads},
       {"width", c.width},           {"vocab", c.vocab},
       {"image_side", c.image_side}, {"patch_size", c.patch_size},
       {"channels", c.channels},     {"grid_w", c.grid_w},
       {"grid_h", c.grid_h},         {"mlp_hidden", c.mlp_hidden},
       {"max_seq", c.max_seq},       {"arch", to_string(c.arch)},
       {"seed", c.seed},             {"lens_normalized", c.lens_normalized}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.width = j.value("width", d.width);
  c.vocab = j.value("vocab", d.vocab);
  c.image_side = j.value("image_side", d.image_side);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.channels = j.value("channels", d.channels);
  const std::size_t per_side = c.patch_size ? c.image_side / c.patch_size : 0;
  c.grid_w = j.value("grid_w", per_side);
  c.grid_h = j.value("grid_h", per_side);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
  c.max_seq = j.value("max_seq", d.max_seq);
  c.arch = parse_architecture(j.value("arch", to_string(d.arch)));
  c.seed = j.value("seed", d.seed);
  c.lens_normalized = j.value("lens_normalized", d.lens_normalized);
}

// Token positions at one generation step. For decoder-only and prefix-LM the
// attended sequence is [visual | context | <bos> y_1 .. y_{t-1}] of length
// total(); for encoder-decoder the decoder holds the answer side only and the
// cross-attention keys are the visual+context block.
struct TokenLayout {
  std::size_t n_visual = 0;
  std::size_t n_context = 0;
  std::size_t n_answer = 0;  // decoder positions so far, including <bos>
  Architecture arch = Architecture::decoder_only;

  std::size_t total() const { return n_visual + n_context + n_answer; }
  std::size_t prefix() const { return n_visual + n_context; }
  // Columns of the attention rows attribution reads.
  std::size_t keys() const { return arch == Architecture::encoder_decoder ? prefix() : total(); }
  std::size_t queries() const { return arch == Architecture::encoder_decoder ? n_answer : total(); }

  friend bool operator==(const TokenLayout&, const TokenLayout&) = default;
};

struct Parameter {
  std::string name;
  tensor::Shape shape;
  std::vector<double> values;
};

// Finite-difference hook: shifts one entry of an attention map or a block
// input right after it is produced.
struct Probe {
  enum class Site { attention, block_input };
  Site site = Site::attention;
  std::size_t layer = 0;
  std::size_t index = 0;
  double delta = 0.0;
};

struct ForwardOptions {
  bool params_trainable = false;
  bool retain_attention = false;
  bool retain_hidden = false;
  bool all_answer_logits = false;  // logits for every decoder position, else the last one
  bool lens = false;               // per-layer lens logits at the last position
  std::optional<Probe> probe;
};

struct ForwardPass {
  TokenLayout layout;
  std::vector<NodeId> params;          // aligned with ToyVlm::parameters()
  std::vector<NodeId> attention;       // per layer: self-attn, or cross-attn for encoder-decoder
  std::vector<NodeId> self_attention;  // per layer decoder self-attention
  std::vector<NodeId> hidden;          // L+1 residual states of the answer-producing stream
  std::vector<NodeId> block_input;     // per layer stream entering the block whose first rows are visual
  std::vector<NodeId> lens_logits;     // per layer [1,V] at the last position
  NodeId logits = 0;                   // [rows,V]
};

class ToyVlm {
 public:
  explicit ToyVlm(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_parameters();
  }

  const ModelConfig& config() const { return cfg_; }
  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }

  const Parameter& parameter(const std::string& name) const { return params_.at(index_of(name)); }
  Parameter& parameter(const std::string& name) { return params_.at(index_of(name)); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.values.size();
    return n;
  }

  TokenLayout layout(std::size_t n_context, std::size_t n_answer) const {
    return TokenLayout{cfg_.n_visual(), n_context, n_answer, cfg_.arch};
  }

  // Patch pixels in raster order -> [N, patch*patch*channels].
  std::vector<double> patchify(const Image& image) const {
    if (image.empty()) throw std::invalid_argument("patchify: visual tokens are mandatory, image is empty");
    if (image.side != cfg_.image_side || image.channels != cfg_.channels) {
      throw std::invalid_argument("patchify: image geometry does not match the model");
    }
    if (image.side % cfg_.patch_size != 0) throw std::invalid_argument("patchify: side not divisible by patch");
    const std::size_t p = cfg_.patch_size, c = cfg_.channels, per = image.side / p;
    std::vector<double> out(cfg_.n_visual() * cfg_.patch_dim());
    for (std::size_t gy = 0; gy < per; ++gy) {
      for (std::size_t gx = 0; gx < per; ++gx) {
        double* row = out.data() + (gy * per + gx) * cfg_.patch_dim();
        std::size_t k = 0;
        for (std::size_t y = 0; y < p; ++y) {
          for (std::size_t x = 0; x < p; ++x) {
            for (std::size_t ch = 0; ch < c; ++ch) row[k++] = image.at(gy * p + y, gx * p + x, ch);
          }
        }
      }
    }
    return out;
  }

  // Visual token embeddings [N, d], plain values.
  std::vector<double> encode_image(const Image& image) const {
    Graph g;
    const NodeId patches = g.constant({cfg_.n_visual(), cfg_.patch_dim()}, patchify(image));
    const NodeId w = view(g, "patch.w", false), b = view(g, "patch.b", false);
    return g.at(tensor::add_bias(g, tensor::matmul(g, patches, w), b)).to_vector();
  }

  // Builds the computation for one pass. decoder_tokens starts with <bos>.
  ForwardPass forward(Graph& g, const Image& image, std::span<const TokenId> context,
                      std::span<const TokenId> decoder_tokens, const ForwardOptions& opt = {}) const {
    if (decoder_tokens.empty()) throw std::invalid_argument("forward: decoder needs at least <bos>");
    for (TokenId t : context) check_token(t);
    for (TokenId t : decoder_tokens) check_token(t);
    ForwardPass pass;
    pass.layout = layout(context.size(), decoder_tokens.size());
    const auto& L = pass.layout;
    if (cfg_.arch == Architecture::encoder_decoder) {
      if (L.prefix() > cfg_.max_seq || L.n_answer > cfg_.max_seq) {
        throw std::length_error("forward: sequence exceeds max_seq " + std::to_string(cfg_.max_seq));
      }
    } else if (L.total() > cfg_.max_seq) {
      throw std::length_error("forward: sequence length " + std::to_string(L.total()) + " exceeds max_seq " +
                              std::to_string(cfg_.max_seq));
    }

    pass.params.reserve(params_.size());
    for (const auto& p : params_) {
      pass.params.push_back(opt.params_trainable ? g.variable_view(p.shape, p.values)
                                                 : g.constant_view(p.shape, p.values));
    }
    auto P = [&](const std::string& name) { return pass.params[index_of(name)]; };

    const NodeId patches = g.constant({cfg_.n_visual(), cfg_.patch_dim()}, patchify(image));
    const NodeId visual = tensor::add_bias(g, tensor::matmul(g, patches, P("patch.w")), P("patch.b"));

    if (cfg_.arch == Architecture::encoder_decoder) {
      forward_encoder_decoder(g, pass, visual, context, decoder_tokens, opt, P);
    } else {
      forward_decoder_only(g, pass, visual, context, decoder_tokens, opt, P);
    }
    return pass;
  }

 private:
  template <class ParamFn>
  NodeId block(Graph& g, NodeId x, const std::string& prefix, std::span<const std::size_t> limits,
               const ForwardOptions& opt, std::size_t layer, NodeId* attn_out, bool probe_attention,
               ParamFn& P) const {
    const NodeId h1 = tensor::rms_norm(g, x, P(prefix + ".norm1"));
    const NodeId q = tensor::matmul(g, h1, P(prefix + ".wq"));
    const NodeId k = tensor::matmul(g, h1, P(prefix + ".wk"));
    const NodeId v = tensor::matmul(g, h1, P(prefix + ".wv"));
    const NodeId s = tensor::attention_scores(g, q, k, cfg_.heads);
    const NodeId a = tensor::softmax_rows(g, s, limits);
    if (opt.retain_attention) g.retain(a);
    if (probe_attention) apply_probe(g, a, opt, Probe::Site::attention, layer);
    *attn_out = a;
    const NodeId o = tensor::matmul(g, tensor::attention_mix(g, a, v), P(prefix + ".wo"));
    return tensor::add(g, x, o);
  }

  template <class ParamFn>
  NodeId mlp(Graph& g, NodeId x, const std::string& prefix, ParamFn& P) const {
    const NodeId h2 = tensor::rms_norm(g, x, P(prefix + ".norm2"));
    const NodeId u = tensor::gelu(g, tensor::add_bias(g, tensor::matmul(g, h2, P(prefix + ".w1")), P(prefix + ".b1")));
    const NodeId m = tensor::add_bias(g, tensor::matmul(g, u, P(prefix + ".w2")), P(prefix + ".b2"));
    return tensor::add(g, x, m);
  }

  static void apply_probe(Graph& g, NodeId node, const ForwardOptions& opt, Probe::Site site, std::size_t layer) {
    if (opt.probe && opt.probe->site == site && opt.probe->layer == layer) {
      g.nudge(node, opt.probe->index, opt.probe->delta);
    }
  }

  template <class ParamFn>
  void finish_logits(Graph& g, ForwardPass& pass, NodeId stream, std::size_t first_answer_row,
                     std::size_t n_answer, const ForwardOptions& opt, ParamFn& P) const {
    const std::size_t rows = g.shape(stream)[0];
    const NodeId head = P("lm_head"), fnorm = P("final_norm");
    if (opt.all_answer_logits) {
      const NodeId z = tensor::slice_rows(g, stream, first_answer_row, n_answer);
      pass.logits = tensor::matmul(g, tensor::rms_norm(g, z, fnorm), head);
    } else {
      const NodeId z = tensor::slice_rows(g, stream, rows - 1, 1);
      pass.logits = tensor::matmul(g, tensor::rms_norm(g, z, fnorm), head);
    }
    if (opt.lens) {
      for (std::size_t l = 0; l < cfg_.layers; ++l) {
        const NodeId h = pass.hidden[l + 1];
        const NodeId z = tensor::slice_rows(g, h, g.shape(h)[0] - 1, 1);
        const NodeId zn = cfg_.lens_normalized ? tensor::rms_norm(g, z, fnorm) : z;
        pass.lens_logits.push_back(tensor::matmul(g, zn, head));
      }
    }
  }

  template <class ParamFn>
  void forward_decoder_only(Graph& g, ForwardPass& pass, NodeId visual, std::span<const TokenId> context,
                            std::span<const TokenId> decoder_tokens, const ForwardOptions& opt, ParamFn& P) const {
    const auto& L = pass.layout;
    std::vector<std::size_t> ids(context.begin(), context.end());
    ids.insert(ids.end(), decoder_tokens.begin(), decoder_tokens.end());
    NodeId x = tensor::concat_rows(g, visual, tensor::gather_rows(g, P("tok_emb"), std::move(ids)));
    x = tensor::add(g, x, tensor::slice_rows(g, P("pos_emb"), 0, L.total()));

    std::vector<std::size_t> limits(L.total());
    for (std::size_t q = 0; q < L.total(); ++q) {
      const bool bidirectional = cfg_.arch == Architecture::prefix_lm && q < L.prefix();
      limits[q] = bidirectional ? L.prefix() : q + 1;
    }

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (opt.retain_hidden) g.retain(x);
      apply_probe(g, x, opt, Probe::Site::block_input, l);
      pass.hidden.push_back(x);
      pass.block_input.push_back(x);
      NodeId a = 0;
      x = block(g, x, "layer" + std::to_string(l), limits, opt, l, &a, true, P);
      pass.attention.push_back(a);
      pass.self_attention.push_back(a);
      x = mlp(g, x, "layer" + std::to_string(l), P);
    }
    pass.hidden.push_back(x);
    finish_logits(g, pass, x, L.prefix(), L.n_answer, opt, P);
  }

  template <class ParamFn>
  void forward_encoder_decoder(Graph& g, ForwardPass& pass, NodeId visual, std::span<const TokenId> context,
                               std::span<const TokenId> decoder_tokens, const ForwardOptions& opt,
                               ParamFn& P) const {
    const auto& L = pass.layout;
    NodeId e = visual;
    if (!context.empty()) {
      e = tensor::concat_rows(g, visual, tensor::gather_rows(g, P("tok_emb"), {context.begin(), context.end()}));
    }
    e = tensor::add(g, e, tensor::slice_rows(g, P("pos_emb"), 0, L.prefix()));
    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      if (opt.retain_hidden) g.retain(e);
      apply_probe(g, e, opt, Probe::Site::block_input, l);
      pass.block_input.push_back(e);
      NodeId a = 0;
      e = block(g, e, "enc" + std::to_string(l), {}, opt, l, &a, false, P);
      e = mlp(g, e, "enc" + std::to_string(l), P);
    }
    const NodeId memory = tensor::rms_norm(g, e, P("enc_norm"));

    NodeId x = tensor::gather_rows(g, P("tok_emb"), {decoder_tokens.begin(), decoder_tokens.end()});
    x = tensor::add(g, x, tensor::slice_rows(g, P("dec_pos"), 0, L.n_answer));
    std::vector<std::size_t> causal(L.n_answer);
    for (std::size_t q = 0; q < L.n_answer; ++q) causal[q] = q + 1;

    for (std::size_t l = 0; l < cfg_.layers; ++l) {
      const std::string pre = "dec" + std::to_string(l);
      pass.hidden.push_back(x);
      NodeId sa = 0;
      x = block(g, x, pre, causal, opt, l, &sa, false, P);
      pass.self_attention.push_back(sa);

      const NodeId hx = tensor::rms_norm(g, x, P(pre + ".normx"));
      const NodeId q = tensor::matmul(g, hx, P(pre + ".xq"));
      const NodeId k = tensor::matmul(g, memory, P(pre + ".xk"));
      const NodeId v = tensor::matmul(g, memory, P(pre + ".xv"));
      const NodeId ca = tensor::softmax_rows(g, tensor::attention_scores(g, q, k, cfg_.heads));
      if (opt.retain_attention) g.retain(ca);
      apply_probe(g, ca, opt, Probe::Site::attention, l);
      pass.attention.push_back(ca);
      x = tensor::add(g, x, tensor::matmul(g, tensor::attention_mix(g, ca, v), P(pre + ".xo")));
      x = mlp(g, x, pre, P);
    }
    pass.hidden.push_back(x);
    finish_logits(g, pass, x, 0, L.n_answer, opt, P);
  }

  void check_token(TokenId t) const {
    if (t >= cfg_.vocab) throw std::out_of_range("token id " + std::to_string(t) + " outside vocabulary");
  }

  NodeId view(Graph& g, const std::string& name, bool trainable) const {
    const auto& p = parameter(name);
    return trainable ? g.variable_view(p.shape, p.values) : g.constant_view(p.shape, p.values);
  }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return it->second;
  }

  void add_param(std::string name, tensor::Shape shape, double stddev, double fill, std::mt19937_64& rng) {
    std::vector<double> v(tensor::numel(shape), fill);
    if (stddev > 0.0) {
      std::normal_distribution<double> dist(0.0, stddev);
      for (double& x : v) x = dist(rng);
    }
    index_[name] = params_.size();
    params_.push_back(Parameter{std::move(name), std::move(shape), std::move(v)});
  }

  void add_block(const std::string& pre, bool cross, std::mt19937_64& rng) {
    const std::size_t d = cfg_.width, hid = cfg_.mlp_hidden;
    const double s = 0.02, so = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.layers));
    add_param(pre + ".norm1", {d}, 0.0, 1.0, rng);
    add_param(pre + ".wq", {d, d}, s, 0.0, rng);
    add_param(pre + ".wk", {d, d}, s, 0.0, rng);
    add_param(pre + ".wv", {d, d}, s, 0.0, rng);
    add_param(pre + ".wo", {d, d}, so, 0.0, rng);
    if (cross) {
      add_param(pre + ".normx", {d}, 0.0, 1.0, rng);
      add_param(pre + ".xq", {d, d}, s, 0.0, rng);
      add_param(pre + ".xk", {d, d}, s, 0.0, rng);
      add_param(pre + ".xv", {d, d}, s, 0.0, rng);
      add_param(pre + ".xo", {d, d}, so, 0.0, rng);
    }
    add_param(pre + ".norm2", {d}, 0.0, 1.0, rng);
    add_param(pre + ".w1", {d, hid}, s, 0.0, rng);
    add_param(pre + ".b1", {hid}, 0.0, 0.0, rng);
    add_param(pre + ".w2", {hid, d}, so, 0.0, rng);
    add_param(pre + ".b2", {d}, 0.0, 0.0, rng);
  }

  void build_parameters() {
    std::mt19937_64 rng(cfg_.seed);
    const std::size_t d = cfg_.width;
    add_param("patch.w", {cfg_.patch_dim(), d}, 1.0 / std::sqrt(static_cast<double>(cfg_.patch_dim())), 0.0, rng);
    add_param("patch.b", {d}, 0.0, 0.0, rng);
    add_param("tok_emb", {cfg_.vocab, d}, 0.02, 0.0, rng);
    add_param("pos_emb", {cfg_.max_seq, d}, 0.02, 0.0, rng);
    if (cfg_.arch == Architecture::encoder_decoder) {
      add_param("dec_pos", {cfg_.max_seq, d}, 0.02, 0.0, rng);
      for (std::size_t l = 0; l < cfg_.layers; ++l) add_block("enc" + std::to_string(l), false, rng);
      add_param("enc_norm", {d}, 0.0, 1.0, rng);
      for (std::size_t l = 0; l < cfg_.layers; ++l) add_block("dec" + std::to_string(l), true, rng);
    } else {
      for (std::size_t l = 0; l < cfg_.layers; ++l) add_block("layer" + std::to_string(l), false, rng);
    }
    add_param("final_norm", {d}, 0.0, 1.0, rng);
    add_param("lm_head", {d, cfg_.vocab}, 0.02, 0.0, rng);
  }

  ModelConfig cfg_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Generation

struct StepRecord {
  TokenLayout layout;
  std::vector<tensor::DiffTensor> attention;     // per layer [h, queries, keys]
  std::vector<tensor::DiffTensor> hidden;        // L+1 residual states [rows, d]
  std::vector<std::vector<double>> visual_hidden;  // per layer block input, visual rows [N*d]
  std::vector<std::vector<double>> lens_logits;  // per layer [V] at the last position
  std::vector<double> logits;                    // final [V]
  TokenId token = 0;

  // Live graph for gradient extraction; null once released.
  std::shared_ptr<Graph> graph;
  ForwardPass pass;
  std::vector<NodeId> lens_scalar;  // per layer: lens logit of the sampled token
  NodeId final_scalar = 0;          // final logit of the sampled token
};

struct GenerationTrace {
  ModelConfig config;
  Image image;
  std::vector<TokenId> prompt;
  std::vector<StepRecord> steps;

  std::vector<TokenId> tokens() const {
    std::vector<TokenId> out;
    for (const auto& s : steps) out.push_back(s.token);
    return out;
  }
  std::size_t n_steps() const { return steps.size(); }
  bool has_graphs() const {
    for (const auto& s : steps) {
      if (!s.graph) return false;
    }
    return !steps.empty();
  }
  void release_graphs() {
    for (auto& s : steps) s.graph.reset();
  }
};

struct GenerateOptions {
  std::size_t max_len = 16;
  bool retain_graphs = true;
};

inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// One decoding step: runs the model on <bos> + prior tokens, picks the greedy
// token and records attention, hidden states and lens logits.
inline StepRecord forward_step(const ToyVlm& model, const Image& image, std::span<const TokenId> prompt,
                               std::span<const TokenId> prior, bool retain_graph) {
  const auto& cfg = model.config();
  std::vector<TokenId> dec{synth::Vocabulary::kBos};
  dec.insert(dec.end(), prior.begin(), prior.end());
  auto g = std::make_shared<Graph>();
  ForwardOptions opt;
  opt.retain_attention = retain_graph;
  opt.retain_hidden = retain_graph;
  opt.lens = true;
  StepRecord rec;
  rec.pass = model.forward(*g, image, prompt, dec, opt);
  rec.layout = rec.pass.layout;
  for (NodeId a : rec.pass.attention) rec.attention.push_back(tensor::DiffTensor(g->shape(a), g->at(a).to_vector()));
  for (NodeId h : rec.pass.hidden) rec.hidden.push_back(tensor::DiffTensor(g->shape(h), g->at(h).to_vector()));
  const std::size_t nv = cfg.n_visual() * cfg.width;
  for (NodeId h : rec.pass.block_input) {
    auto v = g->values(h);
    rec.visual_hidden.emplace_back(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(nv));
  }
  for (NodeId lg : rec.pass.lens_logits) rec.lens_logits.push_back(g->at(lg).to_vector());
  rec.logits = g->at(rec.pass.logits).to_vector();
  rec.token = argmax(rec.logits);
  if (retain_graph) {
    for (NodeId lg : rec.pass.lens_logits) rec.lens_scalar.push_back(tensor::pick(*g, lg, rec.token));
    rec.final_scalar = tensor::pick(*g, rec.pass.logits, rec.token);
    rec.graph = std::move(g);
  }
  return rec;
}

// Greedy decoding until <eos> or max_len tokens. Traces that keep graphs
// borrow the model's parameters, so the model must outlive them.
inline GenerationTrace generate(const ToyVlm& model, const Image& image, std::span<const TokenId> prompt,
                                const GenerateOptions& opt = {}) {
  if (prompt.empty()) throw std::invalid_argument("generate: prompt must be nonempty");
  if (image.empty()) throw std::invalid_argument("generate: visual tokens are mandatory");
  GenerationTrace trace;
  trace.config = model.config();
  trace.image = image;
  trace.prompt.assign(prompt.begin(), prompt.end());
  std::vector<TokenId> tokens;
  for (std::size_t t = 0; t < opt.max_len; ++t) {
    trace.steps.push_back(forward_step(model, image, prompt, tokens, opt.retain_graphs));
    tokens.push_back(trace.steps.back().token);
    if (tokens.back() == synth::Vocabulary::kEos) break;
  }
  return trace;
}

// Lens logit of the sampled token at a layer (0-based) and step (0-based).
inline double logit_lens(const GenerationTrace& trace, std::size_t layer, std::size_t step) {
  if (step >= trace.steps.size()) throw std::out_of_range("logit_lens: step out of range");
  const auto& s = trace.steps[step];
  if (layer >= s.lens_logits.size()) throw std::out_of_range("logit_lens: layer out of range");
  return s.lens_logits[layer][s.token];
}

// Teacher-forced log P(y_t | y_<t, image) for every answer token.
inline std::vector<double> answer_log_probs(const ToyVlm& model, const Image& image, std::span<const TokenId> prompt,
                                            std::span<const TokenId> answer) {
  if (answer.empty()) throw std::invalid_argument("answer_log_probs: empty answer");
  std::vector<TokenId> dec{synth::Vocabulary::kBos};
  dec.insert(dec.end(), answer.begin(), answer.end() - 1);
  Graph g;
  ForwardOptions opt;
  opt.all_answer_logits = true;
  const auto pass = model.forward(g, image, prompt, dec, opt);
  auto lv = g.values(pass.logits);
  const std::size_t V = model.config().vocab;
  std::vector<double> out(answer.size());
  for (std::size_t r = 0; r < answer.size(); ++r) {
    const double* row = lv.data() + r * V;
    double mx = row[0];
    for (std::size_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < V; ++j) s += std::exp(row[j] - mx);
    out[r] = row[answer[r]] - mx - std::log(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: u64 LE header length, JSON header, then f64 LE values.


inline void save_checkpoint(const std::filesystem::path& path, const ToyVlm& model) {
  nlohmann::json header;
  header["format"] = "dexar-checkpoint";
  header["version"] = 1;
  header["config"] = model.config();
  nlohmann::json entries = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : model.parameters()) {
    entries.push_back({{"name", p.name}, {"shape", p.shape}, {"offset", offset}, {"count", p.values.size()}});
    offset += p.values.size();
  }
  header["parameters"] = entries;
  const std::string text = header.dump();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
  io::put_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    for (double v : p.values) io::put_u64(os, std::bit_cast<std::uint64_t>(v));
  }
}

inline ToyVlm load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot read " + path.string());
  const std::uint64_t len = io::get_u64(is);
  if (len > (1u << 26)) throw std::runtime_error("checkpoint: implausible header length");
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(text);
  if (header.at("format") != "dexar-checkpoint") throw std::runtime_error("checkpoint: bad format tag");
  ToyVlm model(header.at("config").get<ModelConfig>());
  const auto& entries = header.at("parameters");
  if (entries.size() != model.parameters().size()) throw std::runtime_error("checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = model.parameters()[i];
    if (entries[i].at("name") != p.name || entries[i].at("count").get<std::size_t>() != p.values.size()) {
      throw std::runtime_error("checkpoint: parameter '" + p.name + "' does not match");
    }
    for (double& v : p.values) v = std::bit_cast<double>(io::get_u64(is));
  }
  return model;
}

}  // namespace dexar::model
