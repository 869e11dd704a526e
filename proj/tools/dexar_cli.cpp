// SPDX-License-Identifier: Apache-2.0
//
// dexar: dataset generation, training, attribution dumps, evaluation and
// ablation sweeps driven by one JSON config.

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "dexar/dexar.hpp"

namespace fs = std::filesystem;
using namespace dexar;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitPartial = 2;

struct CommonFlags {
  std::string config;
  std::string out;
  std::size_t workers = 1;
  std::optional<std::uint64_t> seed;
};

exp::ExperimentConfig resolve_config(const CommonFlags& f) {
  exp::ExperimentConfig cfg;
  if (!f.config.empty()) cfg = exp::load_config(f.config);
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.model.seed = *f.seed;
  }
  if (const char* env = std::getenv("DEXAR_OUT"); env && *env) cfg.output_dir = env;
  if (!f.out.empty()) cfg.output_dir = f.out;
  if (f.workers == 0) throw exp::ConfigError("--workers must be >= 1");
  cfg.validate();
  return cfg;
}

void log(const std::string& msg) { std::cerr << "[dexar] " << msg << '\n'; }

model::ToyVlm train_and_save(const exp::ExperimentConfig& cfg, std::size_t workers) {
  model::ToyVlm m(cfg.model);
  const auto data = exp::train_samples(cfg);
  auto opt = exp::train_options(cfg, workers);
  std::ostringstream curve;
  curve << "epoch,loss\n";
  opt.on_epoch = [&](std::size_t e, double loss) {
    curve << e << ',' << report::format_value(loss) << '\n';
    log("epoch " + std::to_string(e) + " loss " + report::format_value(loss));
  };
  const auto res = model::train(m, data, opt);
  if (cfg.training.target_loss >= 0.0 && !res.reached_target) {
    log("warning: target loss " + report::format_value(cfg.training.target_loss) + " not reached");
  }
  const fs::path ckpt = cfg.checkpoint_path();
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  model::save_checkpoint(ckpt, m);
  report::write_text(fs::path(cfg.output_dir) / "train_loss.csv", curve.str());
  log("checkpoint written to " + ckpt.string());
  return m;
}

model::ToyVlm load_or_train(const exp::ExperimentConfig& cfg, std::size_t workers) {
  const fs::path ckpt = cfg.checkpoint_path();
  if (fs::exists(ckpt)) {
    auto m = model::load_checkpoint(ckpt);
    if (m.config().arch != cfg.model.arch || m.config().layers != cfg.model.layers) {
      throw exp::ConfigError("checkpoint " + ckpt.string() + " does not match the configured model");
    }
    return m;
  }
  log("no checkpoint at " + ckpt.string() + ", training one");
  return train_and_save(cfg, workers);
}

int cmd_dataset(const exp::ExperimentConfig& cfg) {
  const fs::path dir = fs::path(cfg.output_dir) / "dataset";
  const auto train = exp::train_samples(cfg);
  synth::save_dataset(dir / "train", train);
  const auto eval = synth::make_dataset(cfg.dataset.eval_seed, cfg.dataset.eval_samples);
  synth::save_dataset(dir / "eval", eval);
  log("wrote " + std::to_string(train.size()) + " training and " + std::to_string(eval.size()) +
      " evaluation samples under " + dir.string());
  return kExitOk;
}

int cmd_train(const exp::ExperimentConfig& cfg, std::size_t workers) {
  train_and_save(cfg, workers);
  return kExitOk;
}

int cmd_attribute(const exp::ExperimentConfig& cfg, std::size_t workers) {
  const auto m = load_or_train(cfg, workers);
  const auto samples = exp::eval_samples(cfg);
  const auto specs = exp::method_specs(cfg);
  std::vector<std::string> errors(samples.size());
  exp::parallel_for(samples.size(), workers, [&](std::size_t i) {
    try {
      const auto& s = samples[i];
      auto trace = model::generate(m, s.scene.image, s.prompt, {cfg.max_len, true});
      const auto grads = attr::trace_gradients(trace);
      trace.release_graphs();
      std::vector<std::string> words;
      for (auto t : trace.tokens()) words.emplace_back(synth::Vocabulary::word(t));
      for (const auto& spec : specs) {
        try {
          const auto map = attr::compute_attribution(spec.method, trace, &grads, spec.options);
          attr::write_attribution_dump(fs::path(cfg.output_dir) / "attributions" / std::to_string(s.id) /
                                           exp::file_safe(spec.label),
                                       map, words);
        } catch (const attr::NotApplicable&) {
        }
      }
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  int status = kExitOk;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    if (!errors[i].empty()) {
      log("sample " + std::to_string(samples[i].id) + " failed: " + errors[i]);
      status = kExitPartial;
    }
  }
  return status;
}

int run_and_report(const model::ToyVlm& m, const exp::ExperimentConfig& cfg, const std::vector<exp::MethodSpec>& specs,
                   const std::vector<std::string>& metric_list, const fs::path& out, std::size_t workers) {
  const auto samples = exp::eval_samples(cfg);
  const auto ctx = exp::make_context(cfg, samples);
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = exp::run_experiment(m, samples, specs, metric_list, ctx, out,
                                       {workers, cfg.export_heatmaps, cfg.export_curves});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log("evaluated " + std::to_string(samples.size()) + " samples in " + report::format_value(secs) + " s");
  for (const auto& [method, per] : rep.aggregate()) {
    std::ostringstream os;
    os << method << ':';
    for (const auto& [metric, s] : per) os << ' ' << metric << '=' << report::format_value(s.mean);
    std::cout << os.str() << '\n';
  }
  for (const auto& f : rep.failures) log("sample " + std::to_string(f.sample_id) + " failed: " + f.reason);
  return rep.failures.empty() ? kExitOk : kExitPartial;
}

int cmd_evaluate(const exp::ExperimentConfig& cfg, std::size_t workers) {
  const auto m = load_or_train(cfg, workers);
  return run_and_report(m, cfg, exp::method_specs(cfg), cfg.metrics, cfg.output_dir, workers);
}

int cmd_ablate(const exp::ExperimentConfig& cfg, std::size_t workers) {
  const auto m = load_or_train(cfg, workers);
  return run_and_report(m, cfg, exp::ablation_specs(cfg), cfg.ablation_metrics,
                        fs::path(cfg.output_dir) / "ablation", workers);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DEX-AR attribution laboratory on a toy vision-language model"};
  app.require_subcommand(1);
  CommonFlags flags;
  app.add_option("--config", flags.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--out", flags.out, "output directory (overrides config and DEXAR_OUT)");
  app.add_option("--workers", flags.workers, "worker threads; results do not depend on it");
  app.add_option("--seed", flags.seed, "model initialization and shuffle seed");

  auto* dataset = app.add_subcommand("dataset", "generate and save the synthetic train/eval sets");
  auto* train = app.add_subcommand("train", "train the toy model and write a checkpoint");
  auto* attribute = app.add_subcommand("attribute", "write attribution dumps for the evaluation samples");
  auto* evaluate = app.add_subcommand("evaluate", "run the metric battery and write reports");
  auto* ablate = app.add_subcommand("ablate", "run DEX-AR ablation grids");
  for (auto* sub : {dataset, train, attribute, evaluate, ablate}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  exp::ExperimentConfig cfg;
  try {
    cfg = resolve_config(flags);
  } catch (const exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (*dataset) return cmd_dataset(cfg);
    if (*train) return cmd_train(cfg, flags.workers);
    if (*attribute) return cmd_attribute(cfg, flags.workers);
    if (*evaluate) return cmd_evaluate(cfg, flags.workers);
    if (*ablate) return cmd_ablate(cfg, flags.workers);
  } catch (const exp::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return kExitOk;
}
