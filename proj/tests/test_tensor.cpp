// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <optional>
#include <random>
#include <vector>

#include "dexar/tensor.hpp"

using namespace dexar::tensor;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (double& x : v) x = d(rng);
  return v;
}

// Independent softmax: plain exp/normalize without max subtraction.
std::vector<double> oracle_softmax(const std::vector<double>& x) {
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) s += (e[i] = std::exp(x[i]));
  for (double& v : e) v /= s;
  return e;
}

}  // namespace

TEST(Softmax, ZerosGiveUniform) {
  Graph g;
  const auto y = softmax_rows(g, g.constant({4}, {0, 0, 0, 0}));
  for (double v : g.values(y)) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(Softmax, ShiftInvariance) {
  for (double x : {-30.0, -1.5, 0.0, 2.0, 400.0}) {
    for (double c : {-3.0, 0.0, 0.7, 5.0}) {
      Graph g;
      const auto y = softmax_rows(g, g.constant({2}, {x, x + c}));
      // x + c itself rounds for large |x|; compare against the realized gap.
      const double gap = (x + c) - x;
      EXPECT_NEAR(g.values(y)[0], 1.0 / (1.0 + std::exp(gap)), 1e-15);
      EXPECT_NEAR(g.values(y)[1], std::exp(gap) / (1.0 + std::exp(gap)), 1e-15);
    }
  }
}

TEST(Softmax, MatchesRecomputationOracle) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    auto x = random_values(rng, 4, 2.0);
    Graph g;
    const auto y = softmax_rows(g, g.constant({4}, x));
    const auto want = oracle_softmax(x);
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_NEAR(g.values(y)[i], want[i], 1e-12);
      s += g.values(y)[i];
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Softmax, RowsSumToOneAcrossShapes) {
  std::mt19937_64 rng(3);
  for (std::size_t h : {1, 2, 4}) {
    for (std::size_t t : {1, 3, 17, 40}) {
      Graph g;
      const auto y = softmax_rows(g, g.constant({h, t, t}, random_values(rng, h * t * t, 3.0)));
      auto v = g.values(y);
      for (std::size_t r = 0; r < h * t; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < t; ++j) {
          EXPECT_GE(v[r * t + j], 0.0);
          s += v[r * t + j];
        }
        EXPECT_NEAR(s, 1.0, 1e-12);
      }
    }
  }
}

TEST(Softmax, RowLimitsZeroTheTail) {
  Graph g;
  const std::vector<std::size_t> limits{1, 2, 3};
  const auto y = softmax_rows(g, g.constant({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}), limits);
  auto v = g.values(y);
  EXPECT_EQ(v[0], 1.0);
  EXPECT_EQ(v[1], 0.0);
  EXPECT_EQ(v[2], 0.0);
  EXPECT_EQ(v[5], 0.0);
  EXPECT_NEAR(v[3] + v[4], 1.0, 1e-15);
}

TEST(Softmax, EmptyLastDimensionRejected) {
  Graph g;
  const auto x = g.constant({2, 0}, {});
  EXPECT_THROW(softmax_rows(g, x), std::invalid_argument);
}

TEST(Softmax, BackwardMatchesExplicitJacobian) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const auto x = random_values(rng, 5);
    const auto w = random_values(rng, 5);
    Graph g;
    const auto xn = g.variable({5}, x);
    const auto s = softmax_rows(g, xn);
    const auto root = sum(g, mul(g, s, g.constant({5}, w)));
    g.reverse_sweep(root);
    const auto sv = oracle_softmax(x);
    for (std::size_t i = 0; i < 5; ++i) {
      double want = 0.0;
      for (std::size_t j = 0; j < 5; ++j) want += ((i == j ? sv[i] : 0.0) - sv[i] * sv[j]) * w[j];
      EXPECT_NEAR(g.grad(xn)[i], want, 1e-14);
    }
  }
}

TEST(CrossEntropy, UniformLogits) {
  Graph g;
  const auto l = cross_entropy_next_token(g, g.constant({4}, {0.3, 0.3, 0.3, 0.3}), 2);
  EXPECT_NEAR(g.values(l)[0], std::log(4.0), 1e-15);
  EXPECT_NEAR(g.values(l)[0], 1.386294, 1e-6);
}

TEST(CrossEntropy, LargeMarginGoesToZero) {
  Graph g;
  const auto l = cross_entropy_next_token(g, g.constant({4}, {0, 0, 200, 0}), 2);
  EXPECT_LT(g.values(l)[0], 1e-80);
}

TEST(CrossEntropy, RandomMatchesDirectProbability) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const auto x = random_values(rng, 8, 2.0);
    const std::size_t target = rng() % 8;
    Graph g;
    const auto xn = g.variable({8}, x);
    const auto l = cross_entropy_next_token(g, xn, target);
    const auto p = oracle_softmax(x);
    EXPECT_NEAR(g.values(l)[0], -std::log(p[target]), 1e-12);
    g.reverse_sweep(l);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(g.grad(xn)[j], p[j] - (j == target ? 1.0 : 0.0), 1e-14);
  }
}

TEST(CrossEntropy, TargetOutsideVocabularyRejected) {
  Graph g;
  const auto x = g.constant({4}, {0, 0, 0, 0});
  EXPECT_THROW(cross_entropy_next_token(g, x, 4), std::out_of_range);
}

TEST(ReverseSweep, ProductRule) {
  Graph g;
  const auto a = g.variable({1}, {2.0});
  const auto b = g.variable({1}, {3.0});
  const auto r = mul(g, a, b);
  g.reverse_sweep(r);
  EXPECT_EQ(g.grad(a)[0], 3.0);
  EXPECT_EQ(g.grad(b)[0], 2.0);
}

TEST(ReverseSweep, NonScalarRootRejected) {
  Graph g;
  const auto a = g.variable({2}, {1.0, 2.0});
  EXPECT_THROW(g.reverse_sweep(scale(g, a, 2.0)), std::invalid_argument);
}

TEST(ReverseSweep, EmptyGraphIsNoop) {
  Graph g;
  EXPECT_NO_THROW(g.reverse_sweep(0));
  EXPECT_TRUE(g.empty());
}

TEST(ReverseSweep, UnreachedRetainedNodeHasZeroGradient) {
  Graph g;
  const auto a = g.variable({3}, {1, 2, 3});
  const auto unused = gelu(g, a);
  g.retain(unused);
  const auto b = g.variable({3}, {4, 5, 6});
  const auto root = sum(g, b);
  g.reverse_sweep(root);
  ASSERT_EQ(g.grad(a).size(), 3u);
  for (double v : g.grad(a)) EXPECT_EQ(v, 0.0);
  for (double v : g.grad(unused)) EXPECT_EQ(v, 0.0);
  for (double v : g.grad(b)) EXPECT_EQ(v, 1.0);
}

TEST(ReverseSweep, InteriorGradientReleasedUnlessRetained) {
  Graph g;
  const auto a = g.variable({2}, {1, 2});
  const auto mid = gelu(g, a);
  const auto kept = scale(g, mid, 3.0);
  g.retain(kept);
  const auto root = sum(g, kept);
  g.reverse_sweep(root);
  EXPECT_TRUE(g.grad(mid).empty());
  EXPECT_EQ(g.grad(kept).size(), 2u);
}

// ---------------------------------------------------------------------------
// Finite-difference property test on random graphs.

namespace {

struct NodeProbe {
  NodeId node;
  std::size_t index;
  double delta;
};

// Deterministically builds a random graph from `seed`. Every op is followed by
// an optional nudge (finite-difference probe). Returns the scalar root and the
// retained nodes.
struct RandomGraph {
  NodeId root = 0;
  std::vector<NodeId> retained;
};

RandomGraph build_random_graph(Graph& g, std::uint64_t seed, std::optional<NodeProbe> probe) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> dim(1, 4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RandomGraph rg;
  std::vector<NodeId> pool;

  auto after = [&](NodeId id, bool maybe_retain) {
    if (maybe_retain && unit(rng) < 0.3) {
      g.retain(id);
      rg.retained.push_back(id);
    }
    if (probe && probe->node == id) g.nudge(id, probe->index, probe->delta);
    pool.push_back(id);
    return id;
  };
  auto leaf = [&](Shape s) {
    const NodeId id = g.variable(s, random_values(rng, numel(s), 0.8));
    rg.retained.push_back(id);
    return after(id, false);
  };
  auto matrix_like = [&](NodeId x) { return g.shape(x).size() == 2; };
  auto pick_node = [&]() { return pool[rng() % pool.size()]; };
  auto pick_matrix = [&]() {
    for (int tries = 0; tries < 8; ++tries) {
      const NodeId n = pick_node();
      if (matrix_like(n)) return n;
    }
    return leaf({dim(rng), dim(rng)});
  };

  leaf({dim(rng), dim(rng)});
  const std::size_t steps = 5 + rng() % 40;
  // Leave room for the root: four nodes per pool entry plus the loss term.
  for (std::size_t s = 0; s < steps && g.size() + 4 * pool.size() < 420; ++s) {
    switch (rng() % 10) {
      case 0: leaf({dim(rng), dim(rng)}); break;
      case 1: {
        const NodeId a = pick_matrix();
        const NodeId b = unit(rng) < 0.5 ? pick_matrix() : leaf(g.shape(a));
        if (g.shape(a) == g.shape(b)) after(unit(rng) < 0.5 ? add(g, a, b) : mul(g, a, b), true);
        break;
      }
      case 2: after(scale(g, pick_matrix(), unit(rng) * 2.0 - 1.0), true); break;
      case 3: after(gelu(g, pick_matrix()), true); break;
      case 4: after(softmax_rows(g, pick_matrix()), true); break;
      case 5: {
        const NodeId x = pick_matrix();
        const NodeId gain = leaf({g.shape(x)[1]});
        after(rms_norm(g, x, gain), true);
        break;
      }
      case 6: {
        const NodeId x = pick_matrix();
        const NodeId w = leaf({g.shape(x)[1], dim(rng)});
        const NodeId y = after(matmul(g, x, w), true);
        if (unit(rng) < 0.5) after(add_bias(g, y, leaf({g.shape(y)[1]})), true);
        break;
      }
      case 7: {
        const NodeId x = pick_matrix();
        const std::size_t m = g.shape(x)[0];
        const std::size_t begin = rng() % m;
        const NodeId sl = after(slice_rows(g, x, begin, 1 + rng() % (m - begin)), true);
        after(concat_rows(g, sl, leaf({dim(rng), g.shape(sl)[1]})), true);
        break;
      }
      case 8: {
        const std::size_t t = dim(rng), heads = 1 + rng() % 2, d = heads * (1 + rng() % 2);
        const NodeId q = leaf({t, d}), k = leaf({t, d}), v = leaf({t, d});
        const NodeId sc = after(attention_scores(g, q, k, heads), true);
        std::vector<std::size_t> limits(t);
        for (std::size_t i = 0; i < t; ++i) limits[i] = i + 1;
        const NodeId a = after(softmax_rows(g, sc, limits), true);
        after(attention_mix(g, a, v), true);
        break;
      }
      case 9: {
        const NodeId table = leaf({dim(rng) + 1, dim(rng)});
        std::vector<std::size_t> ids(1 + rng() % 3);
        for (auto& i : ids) i = rng() % g.shape(table)[0];
        after(gather_rows(g, table, ids), true);
        break;
      }
    }
  }
  // Root: random linear functional over every pool node, plus a log-loss term.
  NodeId acc = sum(g, mul(g, pool[0], g.constant(g.shape(pool[0]), random_values(rng, g.at(pool[0]).size()))));
  for (std::size_t i = 1; i < pool.size(); ++i) {
    const NodeId n = pool[i];
    const NodeId t = sum(g, mul(g, n, g.constant(g.shape(n), random_values(rng, g.at(n).size()))));
    acc = add(g, acc, t);
  }
  const NodeId last = pick_matrix();
  const NodeId ce = cross_entropy(g, last, std::vector<std::size_t>(g.shape(last)[0], 0));
  rg.root = add(g, acc, ce);
  return rg;
}

}  // namespace

TEST(ReverseSweep, RandomGraphsMatchCentralDifferences) {
  constexpr double kStep = 1e-5;
  std::size_t checked = 0;
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Graph g;
    const auto rg = build_random_graph(g, seed, std::nullopt);
    ASSERT_LE(g.size(), 500u);
    g.reverse_sweep(rg.root);
    std::mt19937_64 pick(seed * 7919 + 1);
    for (NodeId node : rg.retained) {
      const auto grad = std::vector<double>(g.grad(node).begin(), g.grad(node).end());
      ASSERT_EQ(grad.size(), g.at(node).size());
      for (int k = 0; k < 2; ++k) {
        const std::size_t idx = pick() % grad.size();
        auto eval = [&](double delta) {
          Graph h;
          const auto r = build_random_graph(h, seed, NodeProbe{node, idx, delta});
          return h.values(r.root)[0];
        };
        const double fd = (eval(kStep) - eval(-kStep)) / (2 * kStep);
        const double an = grad[idx];
        EXPECT_LE(std::abs(fd - an), 1e-4 * std::max(std::abs(fd), std::abs(an)) + 1e-8)
            << "seed " << seed << " node " << node << " entry " << idx << " fd " << fd << " an " << an;
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 1000u);
}

TEST(ReverseSweep, DeterministicBitIdenticalGradients) {
  for (std::uint64_t seed : {3u, 44u, 150u}) {
    Graph a, b;
    const auto ra = build_random_graph(a, seed, std::nullopt);
    const auto rb = build_random_graph(b, seed, std::nullopt);
    a.reverse_sweep(ra.root);
    b.reverse_sweep(rb.root);
    ASSERT_EQ(ra.retained, rb.retained);
    for (NodeId n : ra.retained) {
      const auto ga = a.grad(n), gb = b.grad(n);
      ASSERT_TRUE(std::equal(ga.begin(), ga.end(), gb.begin(), gb.end()));
    }
  }
}

TEST(Tensor, ShapeMustMatchValues) {
  EXPECT_THROW(DiffTensor({2, 2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  const DiffTensor t({2, 3}, std::vector<double>(6, 1.0));
  EXPECT_EQ(t.size(), 6u);
  EXPECT_FALSE(t.has_grad());
}

TEST(Tensor, MatmulAgainstLoopOracle) {
  std::mt19937_64 rng(9);
  const auto a = random_values(rng, 3 * 5), b = random_values(rng, 5 * 2);
  Graph g;
  const auto c = matmul(g, g.constant({3, 5}, a), g.constant({5, 2}, b));
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < 5; ++k) s += a[i * 5 + k] * b[k * 2 + j];
      EXPECT_NEAR(g.values(c)[i * 2 + j], s, 1e-13);
    }
  }
}
