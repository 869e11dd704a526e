// SPDX-License-Identifier: Apache-2.0
//
// End-to-end runs: configuration, per-sample evaluation on a worker pool
// with ordered reduction, and report/curve/heatmap emission.

#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dexar/attribution.hpp"
#include "dexar/metrics.hpp"
#include "dexar/model.hpp"
#include "dexar/report.hpp"
#include "dexar/synthdata.hpp"
#include "dexar/train.hpp"

namespace dexar::exp {

inline constexpr int kSchemaVersion = 1;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{
      "auc_pos", "auc_neg",  "auc_insertion", "auc_deletion", "pic_auc",       "iou",          "soft_iou",
      "epg",     "snr_db",   "mse",           "filler_snr",   "delta_content", "delta_filler"};
  return names;
}

inline const std::vector<std::string>& ablation_grid_names() {
  static const std::vector<std::string> names{"filtering", "head_scoring", "relu_layers"};
  return names;
}

struct DatasetSpec {
  std::size_t train_samples = 2000;
  std::uint64_t train_seed = 1000;
  std::size_t eval_samples = 200;
  std::uint64_t eval_seed = 100000;
  std::string path;  // optional dataset directory for evaluation samples

  friend bool operator==(const DatasetSpec&, const DatasetSpec&) = default;
};

struct TrainingSpec {
  std::size_t epochs = 30;
  double lr = 1e-3;
  std::size_t batch_size = 16;
  double clip_norm = 1.0;
  double target_loss = 0.1;

  friend bool operator==(const TrainingSpec&, const TrainingSpec&) = default;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::uint64_t seed = 0;  // model initialization and shuffling
  model::ModelConfig model;
  DatasetSpec dataset;
  TrainingSpec training;
  std::vector<std::string> methods{"dexar", "raw_attention"};
  std::vector<std::string> metrics = metric_names();
  attr::DexArConfig dexar;
  std::optional<std::size_t> gradcam_layer;
  std::string ppl_norm = "ratio";
  std::size_t max_len = 16;
  bool export_heatmaps = true;
  bool export_curves = true;
  std::vector<std::string> ablation = ablation_grid_names();
  std::vector<std::string> ablation_metrics{"snr_db", "mse", "filler_snr", "delta_content", "delta_filler",
                                            "soft_iou", "epg"};
  std::string output_dir = "out";
  std::string checkpoint;  // empty: <output_dir>/model.ckpt

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  void validate() const {
    if (schema_version != kSchemaVersion) {
      throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
    }
    try {
      model.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    auto check_names = [](const std::vector<std::string>& got, const std::vector<std::string>& known,
                          const std::string& what) {
      for (const auto& n : got) {
        if (std::find(known.begin(), known.end(), n) == known.end()) throw ConfigError("unknown " + what + " '" + n + "'");
      }
    };
    check_names(methods, attr::method_names(), "method");
    check_names(metrics, metric_names(), "metric");
    check_names(ablation_metrics, metric_names(), "metric");
    check_names(ablation, ablation_grid_names(), "ablation grid");
    for (std::size_t l : dexar.layers_used) {
      if (l >= model.layers) throw ConfigError("dexar.layers_used: layer " + std::to_string(l) + " out of range");
    }
    if (gradcam_layer && *gradcam_layer >= model.layers) throw ConfigError("gradcam_layer out of range");
    if (ppl_norm != "ratio" && ppl_norm != "exponentiated") throw ConfigError("ppl_norm must be ratio|exponentiated");
    if (max_len == 0) throw ConfigError("max_len must be >= 1");
    if (dataset.eval_samples == 0 && dataset.path.empty()) throw ConfigError("dataset.eval_samples must be >= 1");
    if (training.batch_size == 0) throw ConfigError("training.batch_size must be >= 1");
    if (!(training.lr >= 0.0)) throw ConfigError("training.lr must be >= 0");
  }

  std::filesystem::path checkpoint_path() const {
    return checkpoint.empty() ? std::filesystem::path(output_dir) / "model.ckpt" : std::filesystem::path(checkpoint);
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& d) {
  j = {{"train_samples", d.train_samples}, {"train_seed", d.train_seed}, {"eval_samples", d.eval_samples},
       {"eval_seed", d.eval_seed},         {"path", d.path}};
}

inline void to_json(nlohmann::json& j, const TrainingSpec& t) {
  j = {{"epochs", t.epochs},       {"lr", t.lr}, {"batch_size", t.batch_size}, {"clip_norm", t.clip_norm},
       {"target_loss", t.target_loss}};
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"schema_version", c.schema_version},
       {"seed", c.seed},
       {"model", c.model},
       {"dataset", c.dataset},
       {"training", c.training},
       {"methods", c.methods},
       {"metrics", c.metrics},
       {"dexar", c.dexar},
       {"gradcam_layer", c.gradcam_layer ? nlohmann::json(*c.gradcam_layer) : nlohmann::json(nullptr)},
       {"ppl_norm", c.ppl_norm},
       {"max_len", c.max_len},
       {"export_heatmaps", c.export_heatmaps},
       {"export_curves", c.export_curves},
       {"ablation", c.ablation},
       {"ablation_metrics", c.ablation_metrics},
       {"output_dir", c.output_dir},
       {"checkpoint", c.checkpoint}};
}

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

}  // namespace detail

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"schema_version", "seed", "model", "dataset", "training", "methods", "metrics", "dexar",
                               "gradcam_layer", "ppl_norm", "max_len", "export_heatmaps", "export_curves", "ablation",
                               "ablation_metrics", "output_dir", "checkpoint"},
                              "config");
  ExperimentConfig c;
  try {
    if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
    c.schema_version = j.at("schema_version").get<int>();
    c.seed = j.value("seed", c.seed);
    if (j.contains("model")) {
      c.model = j.at("model").get<model::ModelConfig>();
    }
    c.model.seed = c.seed;
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      detail::reject_unknown_keys(d, {"train_samples", "train_seed", "eval_samples", "eval_seed", "path"}, "dataset");
      c.dataset.train_samples = d.value("train_samples", c.dataset.train_samples);
      c.dataset.train_seed = d.value("train_seed", c.dataset.train_seed);
      c.dataset.eval_samples = d.value("eval_samples", c.dataset.eval_samples);
      c.dataset.eval_seed = d.value("eval_seed", c.dataset.eval_seed);
      c.dataset.path = d.value("path", c.dataset.path);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      detail::reject_unknown_keys(t, {"epochs", "lr", "batch_size", "clip_norm", "target_loss"}, "training");
      c.training.epochs = t.value("epochs", c.training.epochs);
      c.training.lr = t.value("lr", c.training.lr);
      c.training.batch_size = t.value("batch_size", c.training.batch_size);
      c.training.clip_norm = t.value("clip_norm", c.training.clip_norm);
      c.training.target_loss = t.value("target_loss", c.training.target_loss);
    }
    c.methods = j.value("methods", c.methods);
    c.metrics = j.value("metrics", c.metrics);
    if (j.contains("dexar")) c.dexar = j.at("dexar").get<attr::DexArConfig>();
    if (j.contains("gradcam_layer") && !j.at("gradcam_layer").is_null()) {
      c.gradcam_layer = j.at("gradcam_layer").get<std::size_t>();
    }
    c.ppl_norm = j.value("ppl_norm", c.ppl_norm);
    c.max_len = j.value("max_len", c.max_len);
    c.export_heatmaps = j.value("export_heatmaps", c.export_heatmaps);
    c.export_curves = j.value("export_curves", c.export_curves);
    c.ablation = j.value("ablation", c.ablation);
    c.ablation_metrics = j.value("ablation_metrics", c.ablation_metrics);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.checkpoint = j.value("checkpoint", c.checkpoint);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = report::read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": parse error at byte " + std::to_string(e.byte) + ": " + e.what());
  }
  return parse_config(j);
}

// ---------------------------------------------------------------------------
// Methods under evaluation

struct MethodSpec {
  std::string label;  // report column value
  std::string method;
  attr::MethodOptions options;
};

inline std::vector<MethodSpec> method_specs(const ExperimentConfig& cfg) {
  std::vector<MethodSpec> out;
  for (const auto& m : cfg.methods) out.push_back({m, m, {cfg.dexar, cfg.gradcam_layer}});
  return out;
}

inline std::string on_off(bool b) { return b ? "on" : "off"; }

// DEX-AR variants for the requested ablation grids, starting from cfg.dexar.
inline std::vector<MethodSpec> ablation_specs(const ExperimentConfig& cfg) {
  std::vector<MethodSpec> out;
  auto add = [&](const std::string& label, const attr::DexArConfig& d) {
    out.push_back({"dexar[" + label + "]", "dexar", {d, cfg.gradcam_layer}});
  };
  for (const auto& grid : cfg.ablation) {
    if (grid == "filtering") {
      for (bool head : {true, false}) {
        for (bool filler : {true, false}) {
          auto d = cfg.dexar;
          d.head_filtering = head;
          d.filler_filtering = filler;
          add("head=" + on_off(head) + ";filler=" + on_off(filler), d);
        }
      }
    } else if (grid == "head_scoring") {
      std::vector<attr::HeadScoringMode> modes{attr::HeadScoringMode::max()};
      for (double f : {0.05, 0.1, 0.25, 0.5, 0.9}) modes.push_back(attr::HeadScoringMode::topk(f));
      modes.push_back(attr::HeadScoringMode::avg());
      for (const auto& mode : modes) {
        auto d = cfg.dexar;
        d.head_scoring = mode;
        add("heads=" + mode.name(), d);
      }
    } else if (grid == "relu_layers") {
      for (bool relu : {true, false}) {
        for (bool all : {true, false}) {
          auto d = cfg.dexar;
          d.relu_on_grad = relu;
          d.layers_used = all ? std::vector<std::size_t>{} : std::vector<std::size_t>{cfg.model.layers - 1};
          add("relu=" + on_off(relu) + ";layers=" + (all ? std::string("all") : std::string("last")), d);
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample evaluation

struct EvalContext {
  std::vector<double> fill;  // dataset mean pixel
  Image base_image;          // dataset-mean image for the information curve
  metrics::PplNorm ppl_norm = metrics::PplNorm::ratio;
  std::size_t max_len = 16;
};

inline EvalContext make_context(const ExperimentConfig& cfg, std::span<const synth::QASample> samples) {
  if (samples.empty()) throw std::invalid_argument("evaluation set is empty");
  EvalContext ctx;
  const auto mean = synth::dataset_mean_pixel(samples);
  ctx.fill.assign(mean.begin(), mean.end());
  ctx.base_image = synth::mean_image(samples);
  ctx.ppl_norm = cfg.ppl_norm == "exponentiated" ? metrics::PplNorm::exponentiated : metrics::PplNorm::ratio;
  ctx.max_len = cfg.max_len;
  return ctx;
}

struct NamedCurve {
  std::string label;
  std::string kind;
  metrics::Curve curve;
};

struct SampleResult {
  std::vector<report::MetricRow> rows;
  std::vector<report::Flag> flags;
  std::vector<NamedCurve> curves;
  std::vector<std::pair<std::string, attr::AttributionMap>> maps;
  std::optional<report::Flag> failure;
};

inline double mean_where(std::span<const double> v, std::span<const std::uint8_t> m, std::uint8_t want,
                         bool& ok) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (m[i] == want) {
      s += v[i];
      ++n;
    }
  }
  ok = n > 0;
  return n ? s / static_cast<double>(n) : 0.0;
}

inline SampleResult evaluate_sample(const model::ToyVlm& mdl, const synth::QASample& sample,
                                    std::span<const MethodSpec> specs, std::span<const std::string> metric_list,
                                    const EvalContext& ctx) {
  SampleResult res;
  const bool want_grads =
      std::any_of(specs.begin(), specs.end(), [](const MethodSpec& s) { return attr::needs_gradients(s.method); });
  auto trace = model::generate(mdl, sample.scene.image, sample.prompt, {ctx.max_len, want_grads});
  std::optional<attr::TraceGradients> grads;
  if (want_grads) grads = attr::trace_gradients(trace);
  trace.release_graphs();

  const auto& cfg = mdl.config();
  const auto cell_mask = sample.scene.union_cell_mask();
  const auto content = synth::filler_mask_of(trace.tokens());
  const auto ppl = metrics::model_ppl(mdl, sample);

  for (const auto& spec : specs) {
    attr::AttributionMap map;
    try {
      map = attr::compute_attribution(spec.method, trace, grads ? &*grads : nullptr, spec.options);
    } catch (const attr::NotApplicable& e) {
      res.flags.push_back({sample.id, spec.label, std::string("not applicable: ") + e.what()});
      continue;
    }
    std::vector<report::MetricRow> rows;
    auto emit = [&](const std::string& metric, double v) {
      rows.push_back({sample.id, spec.label, metric, v});
    };
    auto flag = [&](const std::string& why) { res.flags.push_back({sample.id, spec.label, why}); };
    const std::vector<double> pixel_map =
        metrics::upsample_heatmap(map.sequence_grid, map.grid_w, map.grid_h, cfg.image_side);

    for (const auto& metric : metric_list) {
      if (metric == "auc_pos" || metric == "auc_neg") {
        metrics::PerturbationSchedule sched;
        sched.fill = ctx.fill;
        sched.polarity = metric == "auc_pos" ? metrics::Polarity::positive : metrics::Polarity::negative;
        auto c = metrics::perturbation_curve(ppl, sample.scene.image, pixel_map, sched, ctx.ppl_norm);
        if (c.flagged) flag(metric + ": log-probability clamped");
        emit(metric, c.auc);
        res.curves.push_back({spec.label, metric == "auc_pos" ? "pos" : "neg", std::move(c)});
      } else if (metric == "auc_deletion") {
        metrics::PerturbationSchedule sched;
        sched.fill = ctx.fill;
        auto c = metrics::deletion_curve(ppl, sample.scene.image, pixel_map, sched, ctx.ppl_norm);
        if (c.flagged) flag(metric + ": log-probability clamped");
        emit(metric, c.auc);
        res.curves.push_back({spec.label, "deletion", std::move(c)});
      } else if (metric == "auc_insertion") {
        auto c = metrics::insertion_curve(ppl, sample.scene.image, pixel_map,
                                          metrics::PerturbationSchedule::default_fractions(),
                                          metrics::insertion_sigma(cfg.image_side), ctx.ppl_norm);
        if (c.flagged) flag(metric + ": log-probability clamped");
        emit(metric, c.auc);
        res.curves.push_back({spec.label, "insertion", std::move(c)});
      } else if (metric == "pic_auc") {
        auto c = metrics::pic_curve(ppl, sample.scene.image, ctx.base_image, pixel_map);
        if (!c.note.empty()) {
          flag("pic_auc: " + c.note);
          continue;
        }
        if (c.flagged) flag(metric + ": log-probability clamped");
        emit(metric, c.auc);
        res.curves.push_back({spec.label, "pic", std::move(c)});
      } else if (metric == "iou") {
        emit(metric, metrics::iou_best_threshold(map.sequence_grid, cell_mask));
      } else if (metric == "soft_iou") {
        emit(metric, metrics::soft_iou(map.sequence_grid, cell_mask));
      } else if (metric == "epg") {
        const auto e = metrics::epg(map.sequence_grid, cell_mask);
        if (e.flagged) flag("epg: attribution mass is zero");
        emit(metric, e.value);
      } else if (metric == "snr_db") {
        emit(metric, metrics::snr_db(map.sequence_grid, cell_mask));
      } else if (metric == "mse") {
        emit(metric, metrics::mse_metric(map.sequence_grid, cell_mask));
      } else if (metric == "filler_snr") {
        const bool has_in = std::count(content.begin(), content.end(), 1) > 0;
        const bool has_out = std::count(content.begin(), content.end(), 0) > 0;
        if (!has_in || !has_out) {
          flag("filler_snr: generated answer lacks content or filler tokens");
          continue;
        }
        emit(metric, metrics::filler_snr(map.token_energy, content));
      } else if ((metric == "delta_content" || metric == "delta_filler") && spec.method == "dexar") {
        bool ok = false;
        const double v = mean_where(map.token_weights, content, metric == "delta_content" ? 1 : 0, ok);
        if (ok) emit(metric, v);
      }
    }
    res.rows.insert(res.rows.end(), rows.begin(), rows.end());
    res.maps.emplace_back(spec.label, std::move(map));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Runs

inline std::string file_safe(const std::string& s) {
  std::string out;
  for (char c : s) out += std::isalnum(static_cast<unsigned char>(c)) || c == '.' || c == '-' ? c : '_';
  return out;
}

// Calls fn(i) for i in [0, n) on up to `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

struct RunOptions {
  std::size_t workers = 1;
  bool export_heatmaps = true;
  bool export_curves = true;
};

// Evaluates every sample with every spec and writes report.csv,
// aggregate.json, curves/ and heatmaps/ under out_dir (when non-empty).
inline report::MetricReport run_experiment(const model::ToyVlm& mdl, std::span<const synth::QASample> samples,
                                           std::span<const MethodSpec> specs,
                                           std::span<const std::string> metric_list, const EvalContext& ctx,
                                           const std::filesystem::path& out_dir, const RunOptions& opt = {}) {
  std::vector<SampleResult> results(samples.size());
  parallel_for(samples.size(), opt.workers, [&](std::size_t i) {
    try {
      results[i] = evaluate_sample(mdl, samples[i], specs, metric_list, ctx);
    } catch (const std::exception& e) {
      results[i] = SampleResult{};
      results[i].failure = report::Flag{samples[i].id, "", e.what()};
    }
  });

  report::MetricReport rep;
  for (auto& r : results) {
    if (r.failure) {
      rep.failures.push_back(*r.failure);
      continue;
    }
    rep.rows.insert(rep.rows.end(), r.rows.begin(), r.rows.end());
    rep.flags.insert(rep.flags.end(), r.flags.begin(), r.flags.end());
  }
  if (out_dir.empty()) return rep;

  std::filesystem::create_directories(out_dir);
  report::write_report_csv(out_dir / "report.csv", rep);
  report::write_aggregate_json(out_dir / "aggregate.json", rep);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string id = std::to_string(samples[i].id);
    if (opt.export_curves) {
      for (const auto& c : results[i].curves) {
        report::write_text(out_dir / "curves" / (id + "_" + file_safe(c.label) + "_" + c.kind + ".csv"),
                           report::curve_csv(c.curve, c.kind == "pic"));
      }
    }
    if (opt.export_heatmaps) {
      for (const auto& [label, map] : results[i].maps) {
        report::write_pgm(out_dir / "heatmaps" / (id + "_" + file_safe(label) + ".pgm"), map.sequence_grid,
                          map.grid_w, map.grid_h);
      }
    }
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Data and model helpers shared by the CLI and tests

inline std::vector<synth::QASample> eval_samples(const ExperimentConfig& cfg) {
  if (!cfg.dataset.path.empty()) {
    auto all = synth::load_dataset(cfg.dataset.path);
    if (cfg.dataset.eval_samples > 0 && all.size() > cfg.dataset.eval_samples) all.resize(cfg.dataset.eval_samples);
    return all;
  }
  return synth::make_dataset(cfg.dataset.eval_seed, cfg.dataset.eval_samples);
}

inline std::vector<synth::QASample> train_samples(const ExperimentConfig& cfg) {
  return synth::make_dataset(cfg.dataset.train_seed, cfg.dataset.train_samples);
}

inline model::TrainOptions train_options(const ExperimentConfig& cfg, std::size_t workers) {
  model::TrainOptions o;
  o.epochs = cfg.training.epochs;
  o.lr = cfg.training.lr;
  o.batch_size = cfg.training.batch_size;
  o.clip_norm = cfg.training.clip_norm;
  o.target_loss = cfg.training.target_loss;
  o.shuffle_seed = cfg.seed;
  o.workers = workers;
  return o;
}

}  // namespace dexar::exp
