// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "dexar/metrics.hpp"
#include "dexar/train.hpp"

using namespace dexar;
using namespace dexar::metrics;

namespace {

struct RandomCase {
  std::vector<double> a;
  std::vector<std::uint8_t> m;
};

// 8x8 map in [0,1] with a mask that is neither empty nor full.
RandomCase random_case(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0, 1);
  RandomCase c;
  c.a.resize(64);
  c.m.resize(64);
  for (auto& x : c.a) x = u(rng);
  do {
    for (auto& x : c.m) x = u(rng) < 0.3;
  } while (std::accumulate(c.m.begin(), c.m.end(), 0) == 0 || std::accumulate(c.m.begin(), c.m.end(), 0) == 64);
  return c;
}

// Fake model: perplexity grows linearly with the fraction of pixels equal to
// the fill value (channel 0 exactly 0.5).
PplFn linear_ppl(double slope) {
  return [slope](const Image& img) {
    std::size_t filled = 0;
    for (std::size_t i = 0; i < img.pixel_count(); ++i) filled += img.pixels[i * img.channels] == 0.5;
    return Perplexity{1.0 + slope * static_cast<double>(filled) / static_cast<double>(img.pixel_count()), false};
  };
}

Image ramp_image(std::size_t side) {
  Image img(side, 3);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = 0.1 + 0.8 * static_cast<double>(i % 7) / 7.0;
  return img;
}

std::vector<double> ramp_map(std::size_t n) {
  std::vector<double> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = static_cast<double>((i * 37) % n);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Segmentation and diagnostics against brute-force oracles

TEST(SegmentationOracles, RandomGridsAgree) {
  std::mt19937_64 rng(101);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_case(rng);
    double lo = 1e9, hi = -1e9;
    for (double v : c.a) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    double best = 0.0;
    for (int i = 0; i < 20; ++i) {
      const double tau = lo + i * (hi - lo) / 20.0;
      int inter = 0, uni = 0;
      for (int j = 0; j < 64; ++j) {
        inter += (c.a[j] > tau) && c.m[j];
        uni += (c.a[j] > tau) || c.m[j];
      }
      best = std::max(best, uni ? static_cast<double>(inter) / uni : 1.0);
    }
    EXPECT_NEAR(iou_best_threshold(c.a, c.m), best, 1e-9);

    double am = 0, sa = 0, sm = 0, in = 0, out = 0, nin = 0, mse = 0;
    for (int j = 0; j < 64; ++j) {
      am += c.a[j] * c.m[j];
      sa += c.a[j];
      sm += c.m[j];
      (c.m[j] ? in : out) += c.a[j];
      nin += c.m[j];
      mse += (c.a[j] - c.m[j]) * (c.a[j] - c.m[j]);
    }
    EXPECT_NEAR(soft_iou(c.a, c.m), am / (sa + sm - am), 1e-9);
    EXPECT_NEAR(epg(c.a, c.m).value, 100 * am / sa, 1e-9);
    EXPECT_NEAR(snr_db(c.a, c.m), 10 * std::log10((in / nin) / (out / (64 - nin) + kSnrEps)), 1e-9);
    EXPECT_NEAR(mse_metric(c.a, c.m), mse / 64, 1e-9);
  }
}

TEST(Iou, HandExamples) {
  const std::vector<double> a{0, 0.5, 1, 1};
  const std::vector<std::uint8_t> m{0, 0, 1, 1};
  EXPECT_DOUBLE_EQ(iou_best_threshold(a, m), 1.0);
  EXPECT_DOUBLE_EQ(iou_at_threshold(a, m, 0.0), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(iou_at_threshold(std::vector<double>{0, 0}, std::vector<std::uint8_t>{0, 0}, 0.5), 1.0);
  const auto t = iou_thresholds(std::vector<double>{1, 3}, 4);
  EXPECT_EQ(t, (std::vector<double>{1.0, 1.5, 2.0, 2.5}));
  EXPECT_THROW(iou_best_threshold(a, std::vector<std::uint8_t>{1}), std::invalid_argument);
}

TEST(SoftIou, HandExamples) {
  EXPECT_NEAR(soft_iou(std::vector<double>{0.5, 0.5}, std::vector<std::uint8_t>{1, 0}), 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(soft_iou(std::vector<double>{0, 0}, std::vector<std::uint8_t>{0, 0}), 1.0);
  EXPECT_DOUBLE_EQ(soft_iou(std::vector<double>{1, 0}, std::vector<std::uint8_t>{1, 0}), 1.0);
}

TEST(Epg, HandExamplesAndZeroMass) {
  const auto e = epg(std::vector<double>{1, 3}, std::vector<std::uint8_t>{0, 1});
  EXPECT_DOUBLE_EQ(e.value, 75.0);
  EXPECT_FALSE(e.flagged);
  const auto z = epg(std::vector<double>{0, 0}, std::vector<std::uint8_t>{0, 1});
  EXPECT_DOUBLE_EQ(z.value, 0.0);
  EXPECT_TRUE(z.flagged);
}

TEST(Snr, HandExamplesAndDegenerateMasks) {
  const std::vector<std::uint8_t> m{1, 1, 0, 0};
  EXPECT_NEAR(snr_db(std::vector<double>{4, 4, 1, 1}, m), 10 * std::log10(4.0), 1e-9);
  EXPECT_NEAR(snr_db(std::vector<double>{0, 0, 1, 1}, m), -120.0, 1e-9);
  EXPECT_GT(snr_db(std::vector<double>{1, 1, 0, 0}, m), 100.0);
  EXPECT_THROW(snr_db(std::vector<double>{1, 1}, std::vector<std::uint8_t>{1, 1}), std::invalid_argument);
  EXPECT_THROW(snr_db(std::vector<double>{1, 1}, std::vector<std::uint8_t>{0, 0}), std::invalid_argument);
}

TEST(Mse, HandExample) {
  EXPECT_DOUBLE_EQ(mse_metric(std::vector<double>{1, 0.5}, std::vector<std::uint8_t>{1, 0}), 0.125);
}

TEST(FillerSnr, ContentAboveFillerIsPositive) {
  const std::vector<double> energy{0.9, 0.01, 0.8, 0.02};
  const std::vector<std::uint8_t> content{1, 0, 1, 0};
  EXPECT_NEAR(filler_snr(energy, content), 10 * std::log10(0.85 / (0.015 + kSnrEps)), 1e-9);
  EXPECT_THROW(filler_snr(energy, std::vector<std::uint8_t>{1, 0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Perplexity

TEST(Perplexity, HandExamples) {
  EXPECT_DOUBLE_EQ(perplexity_from_log_probs(std::vector<double>{0, 0, 0}).value, 1.0);
  EXPECT_NEAR(perplexity_from_log_probs(std::vector<double>(5, -std::log(64.0))).value, 64.0, 1e-9);
  EXPECT_NEAR(perplexity_from_log_probs(std::vector<double>{std::log(0.5), std::log(0.25), 0.0}).value, 2.0, 1e-12);
  EXPECT_THROW(perplexity_from_log_probs(std::vector<double>{}), std::invalid_argument);
}

TEST(Perplexity, ClampsUnderflowAndFlags) {
  const double inf = std::numeric_limits<double>::infinity();
  const auto p = perplexity_from_log_probs(std::vector<double>{-inf, 0, 0, 0, 0});
  EXPECT_TRUE(p.clamped);
  EXPECT_TRUE(std::isfinite(p.value));
  EXPECT_NEAR(std::log(p.value), -kLogProbFloor / 5, 1e-9);
  EXPECT_FALSE(perplexity_from_log_probs(std::vector<double>{-744.0}).clamped);
}

TEST(Perplexity, ModelValueIsExpOfTeacherForcedLoss) {
  model::ModelConfig c;
  c.seed = 4;
  const model::ToyVlm m(c);
  for (const auto& s : synth::make_dataset(300, 3)) {
    const double ppl = perplexity(m, s.scene.image, s.prompt, s.answer).value;
    EXPECT_NEAR(std::log(ppl), model::sample_loss(m, s, nullptr), 1e-10);
  }
}

// ---------------------------------------------------------------------------
// Perturbation

TEST(Upsample, NearestBlocks) {
  const auto up = upsample_heatmap(std::vector<double>{1, 2, 3, 4}, 2, 2, 4);
  EXPECT_EQ(up, (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));
  EXPECT_THROW(upsample_heatmap(std::vector<double>{1, 2, 3, 4}, 2, 2, 5), std::invalid_argument);
  EXPECT_THROW(upsample_heatmap(std::vector<double>{1, 2, 3}, 2, 2, 4), std::invalid_argument);
}

TEST(Perturb, RemovesFloorOfFractionInRankOrder) {
  const Image img = ramp_image(8);
  const auto map = ramp_map(64);
  const std::vector<double> fill{0.5, 0.5, 0.5};
  for (double p : {0.0, 0.1, 0.3, 0.55, 0.9, 1.0}) {
    const auto k = static_cast<std::size_t>(std::floor(p * 64 + 1e-9));
    for (auto pol : {Polarity::positive, Polarity::negative}) {
      const Image out = perturb_image(img, map, p, pol, fill);
      std::vector<std::size_t> order(64);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](auto a, auto b) {
        return pol == Polarity::positive ? map[a] > map[b] : map[a] < map[b];
      });
      for (std::size_t i = 0; i < 64; ++i) {
        const std::size_t px = order[i];
        const bool removed = i < k;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          EXPECT_EQ(out.pixels[px * 3 + ch], removed ? 0.5 : img.pixels[px * 3 + ch]);
        }
      }
    }
  }
  EXPECT_EQ(pixels_for_fraction(0.3, 10), 3u);
  EXPECT_THROW(pixels_for_fraction(1.2, 10), std::invalid_argument);
}

TEST(Perturb, TiesBreakInRasterOrder) {
  const Image img(2, 1, 0.2);
  const std::vector<double> map{1, 1, 1, 1};
  const Image a = perturb_image(img, map, 0.5, Polarity::positive, std::vector<double>{0.9});
  EXPECT_EQ(a.pixels, (std::vector<double>{0.9, 0.9, 0.2, 0.2}));
  const Image b = perturb_image(img, map, 0.5, Polarity::negative, std::vector<double>{0.9});
  EXPECT_EQ(a, b);
}

TEST(Perturb, ConstantHeatmapMakesPolaritiesAgree) {
  const Image img = ramp_image(8);
  const std::vector<double> flat(64, 0.3);
  PerturbationSchedule pos, neg;
  pos.fill = neg.fill = {0.5, 0.5, 0.5};
  neg.polarity = Polarity::negative;
  auto ppl = [](const Image& im) { return Perplexity{1.0 + std::accumulate(im.pixels.begin(), im.pixels.end(), 0.0)}; };
  EXPECT_EQ(perturbation_curve(ppl, img, flat, pos).auc, perturbation_curve(ppl, img, flat, neg).auc);
}

TEST(Perturb, RejectsBadGeometry) {
  const Image img = ramp_image(4);
  EXPECT_THROW(perturb_image(img, std::vector<double>(15), 0.5, Polarity::positive, std::vector<double>(3)),
               std::invalid_argument);
  EXPECT_THROW(perturb_image(img, std::vector<double>(16), 0.5, Polarity::positive, std::vector<double>(2)),
               std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Curves

TEST(Curves, TrapezoidMatchesOracle) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0, 3);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> x{0}, y{u(rng)};
    for (int i = 0; i < 9; ++i) {
      x.push_back(x.back() + 0.05 + u(rng));
      y.push_back(u(rng));
    }
    double want = 0;
    for (int i = 0; i < 9; ++i) want += (x[i + 1] - x[i]) * (y[i] + y[i + 1]) / 2;
    EXPECT_NEAR(trapezoid_auc(x, y), want, 1e-12);
  }
}

TEST(Curves, ConstantPerplexityGivesSpan) {
  PerturbationSchedule s;
  s.fill = {0.5, 0.5, 0.5};
  const auto c = perturbation_curve([](const Image&) { return Perplexity{3.0}; }, ramp_image(8), ramp_map(64), s);
  EXPECT_NEAR(c.auc, 0.9, 1e-12);
  ASSERT_EQ(c.points.size(), 10u);
  EXPECT_EQ(c.points.front().ppl_norm, 1.0);
}

TEST(Curves, LinearDoublingGivesOnePointThreeFive) {
  PerturbationSchedule s;
  s.fill = {0.5, 0.5, 0.5};
  // 100 pixels so every decile is an exact count; ppl doubles by p = 0.9.
  const auto c = perturbation_curve(linear_ppl(1.0 / 0.9), ramp_image(10), ramp_map(100), s);
  EXPECT_NEAR(c.auc, 1.35, 1e-12);
  EXPECT_NEAR(c.points.back().ppl_norm, 2.0, 1e-12);
}

TEST(Curves, ExponentiatedNormalization) {
  EXPECT_DOUBLE_EQ(normalize_ppl(3.0, 3.0, PplNorm::exponentiated), 1.0);
  EXPECT_NEAR(normalize_ppl(4.0, 3.0, PplNorm::exponentiated), std::exp(1.0), 1e-15);
  EXPECT_DOUBLE_EQ(normalize_ppl(6.0, 3.0, PplNorm::ratio), 2.0);
}

TEST(Curves, ScheduleValidation) {
  PerturbationSchedule s;
  s.fractions = {0.1, 0.2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.fractions = {0.0, 0.2, 0.2};
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s.fractions = {0.0, 1.1};
  EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Curves, ClampedPerplexityFlagsCurve) {
  PerturbationSchedule s;
  s.fill = {0.5, 0.5, 0.5};
  const auto c = perturbation_curve([](const Image&) { return Perplexity{2.0, true}; }, ramp_image(4), ramp_map(16), s);
  EXPECT_TRUE(c.flagged);
}

TEST(Insertion, VanishingBlurIsFlat) {
  const auto fr = PerturbationSchedule::default_fractions(10);
  auto ppl = [](const Image& im) { return Perplexity{1.0 + std::accumulate(im.pixels.begin(), im.pixels.end(), 0.0)}; };
  const auto c = insertion_curve(ppl, ramp_image(8), ramp_map(64), fr, 0.0);
  for (const auto& p : c.points) EXPECT_EQ(p.ppl_norm, 1.0);
  EXPECT_NEAR(c.auc, 1.0, 1e-12);
  EXPECT_NEAR(insertion_sigma(224), 50.0, 1e-12);
  EXPECT_NEAR(insertion_sigma(32), 50.0 * 32 / 224, 1e-12);
}

TEST(Deletion, EqualsPositivePerturbation) {
  PerturbationSchedule s;
  s.fill = {0.5, 0.5, 0.5};
  s.polarity = Polarity::negative;
  PerturbationSchedule pos = s;
  pos.polarity = Polarity::positive;
  const auto ppl = linear_ppl(2.0);
  const auto map = ramp_map(64);
  const auto d = deletion_curve(ppl, ramp_image(8), map, s);
  const auto p = perturbation_curve(ppl, ramp_image(8), map, pos);
  EXPECT_EQ(d.auc, p.auc);
}

TEST(Pic, LinearFakesGiveDiagonal) {
  const Image orig(10, 1, 1.0), base(10, 1, 0.0);
  auto mean = [](const Image& im) {
    return std::accumulate(im.pixels.begin(), im.pixels.end(), 0.0) / static_cast<double>(im.pixels.size());
  };
  const PplFn ppl = [&](const Image& im) { return Perplexity{1.0 + 3.0 * mean(im)}; };
  const auto c = pic_curve(ppl, orig, base, ramp_map(100), PerturbationSchedule::default_fractions(10), mean);
  ASSERT_EQ(c.points.size(), 11u);
  EXPECT_EQ(c.points.front().entropy_norm, 0.0);
  EXPECT_EQ(c.points.front().ppl_norm, 0.0);
  EXPECT_EQ(c.points.back().entropy_norm, 1.0);
  EXPECT_EQ(c.points.back().ppl_norm, 1.0);
  EXPECT_NEAR(c.auc, 0.5, 1e-12);
  EXPECT_FALSE(c.flagged);
}

TEST(Pic, ClampsAndSortsByInformation) {
  const Image orig(10, 1, 1.0), base(10, 1, 0.0);
  auto mean = [](const Image& im) {
    return std::accumulate(im.pixels.begin(), im.pixels.end(), 0.0) / static_cast<double>(im.pixels.size());
  };
  // Overshooting perplexity clamps to 1; information is reversed in time.
  const PplFn ppl = [&](const Image& im) { return Perplexity{mean(im) > 0 && mean(im) < 1 ? 10.0 : 1.0 + mean(im)}; };
  const EntropyFn ent = [&](const Image& im) { return 1.0 - mean(im) + (mean(im) == 1.0 ? 2.0 : 0.0); };
  const auto c = pic_curve(ppl, orig, base, ramp_map(100), PerturbationSchedule::default_fractions(10), ent);
  for (const auto& p : c.points) {
    EXPECT_GE(p.ppl_norm, 0.0);
    EXPECT_LE(p.ppl_norm, 1.0);
    EXPECT_GE(p.entropy_norm, 0.0);
    EXPECT_LE(p.entropy_norm, 1.0);
  }
  // Sorted: x = 0 (base) ... 0.5 at p=0.1 (1 - 0.1 over 2 after clamp) etc.; all interior ppl_norm = 1.
  std::vector<CurvePoint> sorted = c.points;
  std::stable_sort(sorted.begin(), sorted.end(), [](auto& a, auto& b) { return a.entropy_norm < b.entropy_norm; });
  std::vector<double> x, y;
  for (const auto& p : sorted) {
    x.push_back(p.entropy_norm);
    y.push_back(p.ppl_norm);
  }
  EXPECT_NEAR(c.auc, trapezoid_auc(x, y), 1e-15);
}

TEST(Pic, DegenerateSampleIsFlagged) {
  const Image img = ramp_image(4);
  const auto c = pic_curve([](const Image&) { return Perplexity{2.0}; }, img, img, ramp_map(16));
  EXPECT_TRUE(c.flagged);
  EXPECT_FALSE(c.note.empty());
  EXPECT_TRUE(c.points.empty());
}

TEST(Pic, CompressionEntropyOrdersNoiseAboveFlat) {
  std::mt19937_64 rng(1);
  Image noise(32, 3);
  for (double& p : noise.pixels) p = static_cast<double>(rng() % 256) / 255.0;
  EXPECT_GT(compression_entropy(noise), compression_entropy(Image(32, 3, 0.5)));
}
