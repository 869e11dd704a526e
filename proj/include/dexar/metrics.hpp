// SPDX-License-Identifier: Apache-2.0
//
// Evaluation battery: perplexity-based perturbation, insertion/deletion and
// information curves, segmentation overlap scores, and SNR/MSE diagnostics.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dexar/image.hpp"
#include "dexar/model.hpp"
#include "dexar/synthdata.hpp"

namespace dexar::metrics {

// ---------------------------------------------------------------------------
// Perplexity

inline constexpr double kLogProbFloor = -745.0;

struct Perplexity {
  double value = 1.0;
  bool clamped = false;  // some log-probability hit the floor
};

inline Perplexity perplexity_from_log_probs(std::span<const double> log_probs) {
  if (log_probs.empty()) throw std::invalid_argument("perplexity: empty answer");
  Perplexity p;
  double nll = 0.0;
  for (double lp : log_probs) {
    if (!(lp >= kLogProbFloor)) {
      p.clamped = true;
      lp = kLogProbFloor;
    }
    nll -= lp;
  }
  p.value = std::exp(nll / static_cast<double>(log_probs.size()));
  return p;
}

// Teacher-forced perplexity of the ground-truth answer.
inline Perplexity perplexity(const model::ToyVlm& m, const Image& image, std::span<const synth::TokenId> prompt,
                             std::span<const synth::TokenId> answer) {
  const auto lp = model::answer_log_probs(m, image, prompt, answer);
  return perplexity_from_log_probs(lp);
}

// ---------------------------------------------------------------------------
// Heatmaps and pixel perturbation

// Nearest-block upsampling of a raster [grid_h x grid_w] map to side x side.
inline std::vector<double> upsample_heatmap(std::span<const double> grid, std::size_t grid_w, std::size_t grid_h,
                                            std::size_t side) {
  if (grid.size() != grid_w * grid_h) throw std::invalid_argument("upsample_heatmap: grid size mismatch");
  if (grid_w == 0 || grid_h == 0 || side % grid_w != 0 || side % grid_h != 0) {
    throw std::invalid_argument("upsample_heatmap: image side not divisible by grid dimensions");
  }
  const std::size_t bw = side / grid_w, bh = side / grid_h;
  std::vector<double> out(side * side);
  for (std::size_t y = 0; y < side; ++y) {
    for (std::size_t x = 0; x < side; ++x) out[y * side + x] = grid[(y / bh) * grid_w + x / bw];
  }
  return out;
}

enum class Polarity { positive, negative };

// Pixel order for removal: highest first for positive, lowest first for
// negative; equal values keep raster order.
inline std::vector<std::size_t> rank_pixels(std::span<const double> pixel_map, Polarity polarity) {
  std::vector<std::size_t> idx(pixel_map.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (polarity == Polarity::positive) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return pixel_map[a] > pixel_map[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return pixel_map[a] < pixel_map[b]; });
  }
  return idx;
}

// floor(p * count), tolerant of p values such as 0.3 that are not exact.
inline std::size_t pixels_for_fraction(double p, std::size_t count) {
  if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("fraction must lie in [0,1]");
  return std::min(count, static_cast<std::size_t>(std::floor(p * static_cast<double>(count) + 1e-9)));
}

inline Image perturb_image(const Image& image, std::span<const double> pixel_map, double p, Polarity polarity,
                           std::span<const double> fill) {
  if (pixel_map.size() != image.pixel_count()) throw std::invalid_argument("perturb_image: heatmap size mismatch");
  if (fill.size() != image.channels) throw std::invalid_argument("perturb_image: fill needs one value per channel");
  const std::size_t k = pixels_for_fraction(p, image.pixel_count());
  Image out = image;
  const auto order = rank_pixels(pixel_map, polarity);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < image.channels; ++c) out.pixels[order[i] * image.channels + c] = fill[c];
  }
  return out;
}

// Starts from `base` and restores the top-p original pixels by heatmap rank.
inline Image reveal_image(const Image& original, const Image& base, std::span<const double> pixel_map, double p) {
  if (original.side != base.side || original.channels != base.channels) {
    throw std::invalid_argument("reveal_image: geometry mismatch");
  }
  if (pixel_map.size() != original.pixel_count()) throw std::invalid_argument("reveal_image: heatmap size mismatch");
  const std::size_t k = pixels_for_fraction(p, original.pixel_count());
  Image out = base;
  const auto order = rank_pixels(pixel_map, Polarity::positive);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t c = 0; c < original.channels; ++c) {
      out.pixels[order[i] * original.channels + c] = original.pixels[order[i] * original.channels + c];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Curves

struct PerturbationSchedule {
  std::vector<double> fractions = default_fractions();
  Polarity polarity = Polarity::positive;
  std::vector<double> fill;  // per-channel dataset mean

  static std::vector<double> default_fractions(std::size_t last_decile = 9) {
    std::vector<double> f;
    for (std::size_t i = 0; i <= last_decile; ++i) f.push_back(static_cast<double>(i) / 10.0);
    return f;
  }
  void validate() const {
    if (fractions.empty() || fractions.front() != 0.0) throw std::invalid_argument("schedule must start at 0");
    for (std::size_t i = 1; i < fractions.size(); ++i) {
      if (!(fractions[i] > fractions[i - 1])) throw std::invalid_argument("schedule must be strictly increasing");
    }
    if (fractions.back() > 1.0) throw std::invalid_argument("schedule fractions must be <= 1");
  }
};

enum class PplNorm { ratio, exponentiated };

struct CurvePoint {
  double p = 0.0;
  double ppl = 1.0;
  double ppl_norm = 1.0;
  double entropy_norm = std::numeric_limits<double>::quiet_NaN();  // PIC only
};

struct Curve {
  std::vector<CurvePoint> points;
  double auc = 0.0;
  bool flagged = false;  // degenerate sample or clamped log-probabilities
  std::string note;
};

// Trapezoid rule over (x, y) in the given order.
inline double trapezoid_auc(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw std::invalid_argument("trapezoid_auc: length mismatch");
  double a = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return a;
}

inline double curve_auc(const std::vector<CurvePoint>& pts) {
  std::vector<double> x, y;
  for (const auto& c : pts) {
    x.push_back(c.p);
    y.push_back(c.ppl_norm);
  }
  return trapezoid_auc(x, y);
}

inline double normalize_ppl(double ppl, double reference, PplNorm mode) {
  return mode == PplNorm::ratio ? ppl / reference : std::exp(ppl - reference);
}

using PplFn = std::function<Perplexity(const Image&)>;

inline PplFn model_ppl(const model::ToyVlm& m, const synth::QASample& s) {
  return [&m, &s](const Image& img) { return perplexity(m, img, s.prompt, s.answer); };
}

// Perplexity while progressively replacing ranked pixels with the fill value.
inline Curve perturbation_curve(const PplFn& ppl, const Image& image, std::span<const double> pixel_map,
                                const PerturbationSchedule& sched, PplNorm norm = PplNorm::ratio) {
  sched.validate();
  Curve c;
  const Perplexity base = ppl(image);
  c.flagged = base.clamped;
  for (double p : sched.fractions) {
    CurvePoint pt;
    pt.p = p;
    if (p == 0.0) {
      pt.ppl = base.value;
    } else {
      const Perplexity q = ppl(perturb_image(image, pixel_map, p, sched.polarity, sched.fill));
      c.flagged = c.flagged || q.clamped;
      pt.ppl = q.value;
    }
    pt.ppl_norm = normalize_ppl(pt.ppl, base.value, norm);
    c.points.push_back(pt);
  }
  c.auc = curve_auc(c.points);
  return c;
}

inline double insertion_sigma(std::size_t image_side) { return 50.0 * static_cast<double>(image_side) / 224.0; }

// Reveals ranked original pixels over a blurred copy; normalized by the
// unperturbed perplexity.
inline Curve insertion_curve(const PplFn& ppl, const Image& image, std::span<const double> pixel_map,
                             const std::vector<double>& fractions, double sigma, PplNorm norm = PplNorm::ratio) {
  PerturbationSchedule sched;
  sched.fractions = fractions;
  sched.validate();
  const Image blurred = gaussian_blur(image, sigma);
  Curve c;
  const Perplexity ref = ppl(image);
  c.flagged = ref.clamped;
  for (double p : fractions) {
    const Perplexity q = ppl(reveal_image(image, blurred, pixel_map, p));
    c.flagged = c.flagged || q.clamped;
    c.points.push_back({p, q.value, normalize_ppl(q.value, ref.value, norm)});
  }
  c.auc = curve_auc(c.points);
  return c;
}

// Removal of the most important pixels; the positive-polarity perturbation curve.
inline Curve deletion_curve(const PplFn& ppl, const Image& image, std::span<const double> pixel_map,
                            PerturbationSchedule sched, PplNorm norm = PplNorm::ratio) {
  sched.polarity = Polarity::positive;
  return perturbation_curve(ppl, image, pixel_map, sched, norm);
}

using EntropyFn = std::function<double(const Image&)>;

inline double compression_entropy(const Image& img) { return static_cast<double>(compressed_size(img)); }

// Perplexity information curve. Pixels are revealed over `base` in heatmap
// order; both axes are normalized between the base image (0) and the
// original (1), clamped, sorted by information and integrated.
inline Curve pic_curve(const PplFn& ppl, const Image& image, const Image& base, std::span<const double> pixel_map,
                       const std::vector<double>& fractions = PerturbationSchedule::default_fractions(10),
                       const EntropyFn& entropy = compression_entropy) {
  Curve c;
  const double h_orig = entropy(image), h_base = entropy(base);
  const Perplexity p_orig = ppl(image), p_base = ppl(base);
  c.flagged = p_orig.clamped || p_base.clamped;
  if (h_orig == h_base || p_orig.value == p_base.value) {
    c.flagged = true;
    c.note = "degenerate: original and baseline are indistinguishable";
    return c;
  }
  for (double p : fractions) {
    const Image img = reveal_image(image, base, pixel_map, p);
    CurvePoint pt;
    pt.p = p;
    const Perplexity q = p == 0.0 ? p_base : (p >= 1.0 ? p_orig : ppl(img));
    c.flagged = c.flagged || q.clamped;
    pt.ppl = q.value;
    const double h = p == 0.0 ? h_base : (p >= 1.0 ? h_orig : entropy(img));
    pt.entropy_norm = std::clamp((h - h_base) / (h_orig - h_base), 0.0, 1.0);
    pt.ppl_norm = std::clamp((q.value - p_base.value) / (p_orig.value - p_base.value), 0.0, 1.0);
    c.points.push_back(pt);
  }
  std::vector<CurvePoint> sorted = c.points;
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const CurvePoint& a, const CurvePoint& b) { return a.entropy_norm < b.entropy_norm; });
  std::vector<double> x, y;
  for (const auto& pt : sorted) {
    x.push_back(pt.entropy_norm);
    y.push_back(pt.ppl_norm);
  }
  c.auc = trapezoid_auc(x, y);
  return c;
}

// ---------------------------------------------------------------------------
// Segmentation scores on the token grid

namespace detail {
inline void check_pair(std::span<const double> a, std::span<const std::uint8_t> m, const char* who) {
  if (a.size() != m.size()) throw std::invalid_argument(std::string(who) + ": map and mask sizes differ");
  if (a.empty()) throw std::invalid_argument(std::string(who) + ": empty map");
}
}  // namespace detail

inline double iou_at_threshold(std::span<const double> a, std::span<const std::uint8_t> m, double tau) {
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool pred = a[i] > tau, gt = m[i] != 0;
    inter += pred && gt;
    uni += pred || gt;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<double> iou_thresholds(std::span<const double> a, std::size_t k = 20) {
  const auto [lo, hi] = std::minmax_element(a.begin(), a.end());
  std::vector<double> t(k);
  for (std::size_t i = 0; i < k; ++i) t[i] = *lo + static_cast<double>(i) * (*hi - *lo) / static_cast<double>(k);
  return t;
}

inline double iou_best_threshold(std::span<const double> a, std::span<const std::uint8_t> m, std::size_t k = 20) {
  detail::check_pair(a, m, "iou");
  if (k == 0) throw std::invalid_argument("iou: k must be >= 1");
  double best = 0.0;
  for (double tau : iou_thresholds(a, k)) best = std::max(best, iou_at_threshold(a, m, tau));
  return best;
}

inline double soft_iou(std::span<const double> a, std::span<const std::uint8_t> m) {
  detail::check_pair(a, m, "soft_iou");
  double am = 0.0, sa = 0.0, sm = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    am += a[i] * m[i];
    sa += a[i];
    sm += m[i];
  }
  const double den = sa + sm - am;
  return den == 0.0 ? 1.0 : am / den;
}

struct Flagged {
  double value = 0.0;
  bool flagged = false;
};

inline Flagged epg(std::span<const double> a, std::span<const std::uint8_t> m) {
  detail::check_pair(a, m, "epg");
  double am = 0.0, sa = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    am += a[i] * m[i];
    sa += a[i];
  }
  if (sa == 0.0) return {0.0, true};
  return {100.0 * am / sa, false};
}

inline constexpr double kSnrEps = 1e-12;

// 10 log10(inside mean / (outside mean + eps)); the ratio is floored at eps so
// an all-zero inside region reads -120 dB instead of -inf.
inline double snr_db(std::span<const double> e, std::span<const std::uint8_t> m) {
  detail::check_pair(e, m, "snr_db");
  double in = 0.0, out = 0.0;
  std::size_t n_in = 0, n_out = 0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    if (m[i]) {
      in += e[i];
      ++n_in;
    } else {
      out += e[i];
      ++n_out;
    }
  }
  if (n_in == 0 || n_out == 0) throw std::invalid_argument("snr_db: mask must be neither empty nor full");
  const double ratio = (in / static_cast<double>(n_in)) / (out / static_cast<double>(n_out) + kSnrEps);
  return 10.0 * std::log10(std::max(ratio, kSnrEps));
}

inline double mse_metric(std::span<const double> e, std::span<const std::uint8_t> m) {
  detail::check_pair(e, m, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double d = e[i] - static_cast<double>(m[i]);
    s += d * d;
  }
  return s / static_cast<double>(e.size());
}

// SNR over the token axis: content tokens inside, filler tokens outside.
inline double filler_snr(std::span<const double> token_values, std::span<const std::uint8_t> content_mask) {
  if (token_values.size() != content_mask.size()) throw std::invalid_argument("filler_snr: length mismatch");
  return snr_db(token_values, content_mask);
}

}  // namespace dexar::metrics
