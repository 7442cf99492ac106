#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <set>

#include "lsr/prior.hpp"
#include "lsr/train.hpp"
#include "oracles.hpp"

namespace lsr {
namespace {

using Ctx = ConditioningContext;

PriorConfig tiny_prior(int k = 8) {
  PriorConfig c;
  c.num_codes = k;
  c.channels = 8;
  c.blocks = 2;
  c.residual_blocks = 1;
  return c;
}

LatentGrid random_grid(int h, int w, int k, std::mt19937_64& gen) {
  std::uniform_int_distribution<int> tok(0, k - 1);
  LatentGrid g(Shape{h, w});
  for (auto& v : g.values()) v = tok(gen);
  return g;
}

/// NLL of the whole grid computed one position at a time: position i is
/// evaluated on a grid whose entries at scan indices >= i are overwritten
/// with unrelated tokens, so only the prefix can inform the prediction.
double sequential_nll(const ArPrior<double>& prior, const LatentGrid& grid, ConditioningContext ctx,
                      std::mt19937_64& gen) {
  const int h = grid.dim(0), w = grid.dim(1), k = prior.config().num_codes;
  std::uniform_int_distribution<int> tok(0, k - 1);
  double total = 0.0;
  for (int i = 0; i < h * w; ++i) {
    LatentGrid probe = grid;
    for (int j = i; j < h * w; ++j) probe[j] = tok(gen);
    const Tensor<double> logits = prior.logits(probe, ctx);
    const double* z = logits.data() + static_cast<std::size_t>(i) * k;
    double mx = z[0];
    for (int c = 1; c < k; ++c) mx = std::max(mx, z[c]);
    double denom = 0.0;
    for (int c = 0; c < k; ++c) denom += std::exp(z[c] - mx);
    const double p = std::max(std::exp(z[grid[i]] - mx) / denom, 1e-12);
    total += -std::log(p);
  }
  return total;
}

TEST(Prior, PerturbingATokenLeavesEarlierLogitsUnchanged) {
  ArPrior<double> prior(tiny_prior(), 3);
  oracle::generic_point(prior.params(), 4);
  std::mt19937_64 gen(5);
  std::uniform_int_distribution<int> pos(0, 15);
  for (int trial = 0; trial < 100; ++trial) {
    const LatentGrid grid = random_grid(4, 4, 8, gen);
    const int j = pos(gen);
    LatentGrid changed = grid;
    changed[j] = (grid[j] + 1 + trial % 7) % 8;
    const Tensor<double> a = prior.logits(grid, Ctx{0.1});
    const Tensor<double> b = prior.logits(changed, Ctx{0.1});
    for (int i = 0; i <= j; ++i) {
      for (int c = 0; c < 8; ++c) {
        ASSERT_LE(std::abs(a[i * 8 + c] - b[i * 8 + c]), 1e-6) << "trial " << trial << " j " << j << " i " << i;
      }
    }
  }
}

TEST(Prior, LastTokenInfluencesNothing) {
  const ArPrior<double> prior(tiny_prior(), 3);
  std::mt19937_64 gen(6);
  const LatentGrid grid = random_grid(4, 4, 8, gen);
  LatentGrid changed = grid;
  changed[15] = (grid[15] + 3) % 8;
  EXPECT_EQ(prior.logits(grid, Ctx{0.0}), prior.logits(changed, Ctx{0.0}));
}

TEST(Prior, BatchNllMatchesSequentialEvaluation) {
  ArPrior<double> prior(tiny_prior(), 7);
  oracle::generic_point(prior.params(), 8);
  std::mt19937_64 gen(9);
  for (int trial = 0; trial < 5; ++trial) {
    const LatentGrid grid = random_grid(4, 4, 8, gen);
    const ConditioningContext ctx{-0.5 + 0.25 * trial};
    const Tensor<double> nll = prior.nll_map(grid, ctx);
    double batch = 0.0;
    for (double v : nll.values()) {
      EXPECT_GE(v, 0.0);
      batch += v;
    }
    const double seq = sequential_nll(prior, grid, ctx, gen);
    EXPECT_LE(std::abs(batch - seq) / seq, 1e-5);
  }
}

TEST(Prior, UniformOutputGivesLogK) {
  ArPrior<double> prior(tiny_prior(32), 1);
  prior.params().get("head.w").value.fill(0.0);
  prior.params().get("head.b").value.fill(0.0);
  std::mt19937_64 gen(2);
  const LatentGrid grid = random_grid(4, 4, 32, gen);
  const Tensor<double> nll = prior.nll_map(grid, Ctx{0.0});
  for (double v : nll.values()) EXPECT_NEAR(v, std::log(32.0), 1e-12);
  EXPECT_NEAR(prior.loss(grid, Ctx{0.0}), std::log(32.0), 1e-12);
}

TEST(Prior, SoftmaxRowsAreNormalized) {
  const ArPrior<double> prior(tiny_prior(), 1);
  std::mt19937_64 gen(3);
  const Tensor<double> logits = prior.logits(random_grid(4, 4, 8, gen), Ctx{0.2});
  for (int i = 0; i < 16; ++i) {
    double s = 0.0, mx = -1e300;
    for (int c = 0; c < 8; ++c) mx = std::max(mx, logits[i * 8 + c]);
    for (int c = 0; c < 8; ++c) s += std::exp(logits[i * 8 + c] - mx);
    double total = 0.0;
    for (int c = 0; c < 8; ++c) total += std::exp(logits[i * 8 + c] - mx) / s;
    EXPECT_NEAR(total, 1.0, 1e-5);
  }
}

TEST(Prior, AttentionNeverLooksAtCurrentOrLaterPositions) {
  ArPrior<double> prior(tiny_prior(), 2);
  std::mt19937_64 gen(4);
  const LatentGrid grid = random_grid(4, 4, 8, gen).reshaped(Shape{1, 4, 4});
  std::vector<Tensor<double>> attention;
  ad::Graph<double> g(false, nullptr, false);
  prior.forward(g, grid, {0.0}, &attention);
  ASSERT_EQ(attention.size(), 2u);
  for (const auto& a : attention) {
    ASSERT_EQ(a.shape(), (Shape{1, 16, 16}));
    for (int i = 0; i < 16; ++i) {
      for (int j = i; j < 16; ++j) EXPECT_EQ(a[i * 16 + j], 0.0);
    }
  }
}

TEST(Prior, ConditioningChangesLogits) {
  ArPrior<double> prior(tiny_prior(), 2);
  oracle::generic_point(prior.params(), 3);
  std::mt19937_64 gen(4);
  const LatentGrid grid = random_grid(4, 4, 8, gen);
  const Tensor<double> a = prior.logits(grid, Ctx{-0.4});
  const Tensor<double> b = prior.logits(grid, Ctx{0.4});
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::abs(a[i] - b[i]));
  EXPECT_GT(diff, 0.0);
}

TEST(Prior, GradientMatchesFiniteDifferences) {
  ArPrior<double> prior(tiny_prior(), 11);
  oracle::generic_point(prior.params(), 12);
  std::mt19937_64 gen(13);
  const LatentGrid grids = random_grid(4, 4, 8, gen).reshaped(Shape{1, 4, 4});
  const auto report = oracle::finite_difference_check(
      prior.params(), [&](ad::Graph<double>& g) { return prior.forward(g, grids, {0.3}).loss; });
  ASSERT_EQ(report.kink_crossings, 0u);
  EXPECT_EQ(report.checked, prior.params().scalar_count());
  EXPECT_LT(report.max_rel_error, 1e-3) << report.worst << " analytic " << report.worst_analytic << " numeric "
                                        << report.worst_numeric;
}

TEST(Prior, GreedySamplingIgnoresRng) {
  const ArPrior<double> prior(tiny_prior(), 5);
  Rng a(1), b(2);
  EXPECT_EQ(prior.sample(4, 4, Ctx{0.0}, a, 0.0), prior.sample(4, 4, Ctx{0.0}, b, 0.0));
}

TEST(Prior, SamplingIsSeedDeterministic) {
  const ArPrior<double> prior(tiny_prior(), 5);
  Rng a(42), b(42);
  EXPECT_EQ(prior.sample(4, 4, Ctx{0.1}, a), prior.sample(4, 4, Ctx{0.1}, b));
}

TEST(Prior, RestoreWithEmptyMaskIsIdentity) {
  const ArPrior<double> prior(tiny_prior(), 5);
  std::mt19937_64 gen(1);
  const LatentGrid grid = random_grid(4, 4, 8, gen);
  Rng rng(3);
  EXPECT_EQ(prior.restore(grid, BoolGrid(16, false), Ctx{0.0}, rng), grid);
}

TEST(Prior, RestoreWithFullMaskIsSampling) {
  const ArPrior<double> prior(tiny_prior(), 5);
  std::mt19937_64 gen(1);
  const LatentGrid grid = random_grid(4, 4, 8, gen);
  Rng a(17), b(17);
  EXPECT_EQ(prior.restore(grid, BoolGrid(16, true), Ctx{0.2}, a), prior.sample(4, 4, Ctx{0.2}, b, 1.0));
}

TEST(Prior, RestoreOnlyTouchesMaskedPositions) {
  const ArPrior<double> prior(tiny_prior(), 5);
  std::mt19937_64 gen(2);
  for (int trial = 0; trial < 20; ++trial) {
    const LatentGrid grid = random_grid(4, 4, 8, gen);
    BoolGrid mask(16, false);
    mask[static_cast<std::size_t>(gen() % 16)] = true;
    if (trial % 2) mask[static_cast<std::size_t>(gen() % 16)] = true;
    Rng rng(static_cast<std::uint64_t>(trial));
    const LatentGrid out = prior.restore(grid, mask, Ctx{0.0}, rng);
    for (int i = 0; i < 16; ++i) {
      if (!mask[i]) EXPECT_EQ(out[i], grid[i]);
    }
  }
}

TEST(Prior, RestoreManyMatchesIndividualRestorations) {
  const ArPrior<double> prior(tiny_prior(), 5);
  std::mt19937_64 gen(3);
  const LatentGrid grid = random_grid(4, 4, 8, gen);
  BoolGrid mask(16, false);
  for (int i : {2, 5, 6, 11, 15}) mask[i] = true;
  std::vector<Rng> rngs{Rng(1), Rng(2), Rng(3)};
  const auto many = prior.restore_many(grid, mask, Ctx{0.0}, rngs);
  for (std::uint64_t s = 1; s <= 3; ++s) {
    Rng r(s);
    EXPECT_EQ(many[s - 1], prior.restore(grid, mask, Ctx{0.0}, r));
  }
}

TEST(Prior, TrainedOnTwoGridsSamplesBoth) {
  ArPrior<float> prior(tiny_prior(4), 1);
  LatentCorpus corpus;
  corpus.grids = LatentGrid(Shape{2, 3, 3});
  const std::vector<int> a{0, 1, 2, 3, 0, 1, 2, 3, 0};
  const std::vector<int> b{3, 3, 2, 2, 1, 1, 0, 0, 3};
  for (int i = 0; i < 9; ++i) {
    corpus.grids[i] = a[i];
    corpus.grids[9 + i] = b[i];
  }
  corpus.slice_positions = {0.0, 0.0};
  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.batch_size = 4;
  tc.max_steps = 300;
  tc.checkpoint_interval = 0;
  TrainProgress progress;
  train_prior(prior, corpus, tc, 5, progress);
  int seen_a = 0, seen_b = 0;
  for (std::uint64_t s = 0; s < 200; ++s) {
    Rng rng(s);
    const LatentGrid g = prior.sample(3, 3, Ctx{0.0}, rng);
    const std::vector<int> v(g.values().begin(), g.values().end());
    seen_a += v == a;
    seen_b += v == b;
  }
  EXPECT_GT(seen_a, 0);
  EXPECT_GT(seen_b, 0);
}

}  // namespace
}  // namespace lsr
