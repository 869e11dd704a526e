// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dexar/model.hpp"
#include "dexar/synthdata.hpp"

namespace dexar::model {

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 16;
  double clip_norm = 1.0;  // global gradient norm clip, 0 disables
  std::uint64_t shuffle_seed = 0;
  std::size_t workers = 1;
  // Stop once an epoch's mean loss is at or below this value (< 0 disables).
  double target_loss = -1.0;
  std::function<void(std::size_t epoch, double loss)> on_epoch;
};

struct TrainResult {
  std::vector<double> epoch_loss;
  bool reached_target = false;
};

class Adam {
 public:
  Adam(const ToyVlm& model, double lr, double beta1, double beta2, double eps)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : model.parameters()) {
      m_.emplace_back(p.values.size(), 0.0);
      v_.emplace_back(p.values.size(), 0.0);
    }
  }

  void step(ToyVlm& model, const std::vector<std::vector<double>>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    auto& params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& w = params[i].values;
      for (std::size_t k = 0; k < w.size(); ++k) {
        const double g = grads[i][k];
        m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * g;
        v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * g * g;
        w[k] -= lr_ * (m_[i][k] / c1) / (std::sqrt(v_[i][k] / c2) + eps_);
      }
    }
  }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// Teacher-forced answer cross-entropy for one sample; when grads is non-null
// the parameter gradients are written there (one buffer per parameter).
inline double sample_loss(const ToyVlm& model, const synth::QASample& s, std::vector<std::vector<double>>* grads) {
  if (s.answer.empty()) throw std::invalid_argument("train: empty answer");
  std::vector<TokenId> dec{synth::Vocabulary::kBos};
  dec.insert(dec.end(), s.answer.begin(), s.answer.end() - 1);
  Graph g;
  ForwardOptions opt;
  opt.params_trainable = grads != nullptr;
  opt.all_answer_logits = true;
  const auto pass = model.forward(g, s.scene.image, s.prompt, dec, opt);
  const NodeId loss = tensor::cross_entropy(g, pass.logits, {s.answer.begin(), s.answer.end()});
  const double value = g.values(loss)[0];
  if (grads) {
    g.reverse_sweep(loss);
    grads->resize(pass.params.size());
    for (std::size_t i = 0; i < pass.params.size(); ++i) {
      auto gr = g.grad(pass.params[i]);
      (*grads)[i].assign(gr.begin(), gr.end());
    }
  }
  return value;
}

inline double mean_answer_loss(const ToyVlm& model, std::span<const synth::QASample> data) {
  if (data.empty()) throw std::invalid_argument("mean_answer_loss: empty dataset");
  double total = 0.0;
  for (const auto& s : data) total += sample_loss(model, s, nullptr);
  return total / static_cast<double>(data.size());
}

// Mini-batch Adam on the answer positions. Per-sample gradients are reduced in
// sample order, so results do not depend on the worker count.
inline TrainResult train(ToyVlm& model, std::span<const synth::QASample> data, const TrainOptions& opt) {
  if (data.empty()) throw std::invalid_argument("train: dataset is empty");
  for (const auto& s : data) {
    for (TokenId t : s.answer) {
      if (t >= model.config().vocab) throw std::out_of_range("train: answer token outside vocabulary");
    }
  }
  const std::size_t batch = std::max<std::size_t>(1, opt.batch_size);
  const std::size_t workers = std::max<std::size_t>(1, opt.workers);
  Adam adam(model, opt.lr, opt.beta1, opt.beta2, opt.eps);
  TrainResult result;

  std::vector<std::size_t> order(data.size());
  std::vector<double> losses(data.size());
  std::vector<std::vector<std::vector<double>>> per_sample(batch);
  std::vector<std::vector<double>> sum_grad;
  for (const auto& p : model.parameters()) sum_grad.emplace_back(p.values.size(), 0.0);

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(opt.shuffle_seed + epoch);
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t n = std::min(batch, order.size() - start);
      auto work = [&](std::size_t worker) {
        for (std::size_t i = worker; i < n; i += workers) {
          const std::size_t idx = order[start + i];
          losses[idx] = sample_loss(model, data[idx], &per_sample[i]);
        }
      };
      if (workers == 1 || n == 1) {
        work(0);
      } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w) pool.emplace_back(work, w);
        for (auto& t : pool) t.join();
      }
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[start + i];
        if (!std::isfinite(losses[idx])) {
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) + ", sample " +
                                   std::to_string(data[idx].id));
        }
      }
      double norm2 = 0.0;
      for (std::size_t p = 0; p < sum_grad.size(); ++p) {
        auto& acc = sum_grad[p];
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
          const auto& gi = per_sample[i][p];
          for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += gi[k];
        }
        for (double& v : acc) {
          v /= static_cast<double>(n);
          norm2 += v * v;
        }
      }
      if (opt.clip_norm > 0.0 && std::sqrt(norm2) > opt.clip_norm) {
        const double s = opt.clip_norm / std::sqrt(norm2);
        for (auto& acc : sum_grad) {
          for (double& v : acc) v *= s;
        }
      }
      adam.step(model, sum_grad);
    }

    // Sum in dataset order so the value is independent of the shuffle.
    const double mean = std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
    result.epoch_loss.push_back(mean);
    if (opt.on_epoch) opt.on_epoch(epoch, mean);
    if (opt.target_loss >= 0.0 && mean <= opt.target_loss) {
      result.reached_target = true;
      break;
    }
  }
  return result;
}

}  // namespace dexar::model
