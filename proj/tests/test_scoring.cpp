#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "lsr/scoring.hpp"
#include "oracles.hpp"

namespace lsr {
namespace {

using Ctx = ConditioningContext;

Tensor<double> grid2(double a, double b, double c, double d) { return Tensor<double>(Shape{2, 2}, {a, b, c, d}); }

/// Replicate-padded window reduction written directly from the definition.
Tensor<double> naive_window(const Tensor<double>& m, int size, bool take_min) {
  const int h = m.dim(0), w = m.dim(1), r = size / 2;
  Tensor<double> out(m.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = take_min ? std::numeric_limits<double>::infinity() : 0.0;
      for (int dy = -r; dy <= r; ++dy) {
        for (int dx = -r; dx <= r; ++dx) {
          const int yy = std::min(std::max(y + dy, 0), h - 1);
          const int xx = std::min(std::max(x + dx, 0), w - 1);
          const double v = m[static_cast<std::size_t>(yy) * w + xx];
          acc = take_min ? std::min(acc, v) : acc + v;
        }
      }
      out[static_cast<std::size_t>(y) * w + x] = take_min ? acc : acc / (size * size);
    }
  }
  return out;
}

// --- sample score -----------------------------------------------------------

TEST(SampleScore, SumsOnlyEntriesAboveThreshold) {
  EXPECT_EQ(sample_score(grid2(1, 2, 3, 8), 7.0), 8.0);
}

TEST(SampleScore, ThresholdAboveEverythingGivesZero) {
  EXPECT_EQ(sample_score(grid2(1, 2, 3, 8), 8.5), 0.0);
}

TEST(SampleScore, ZeroThresholdGivesTotalNll) {
  EXPECT_EQ(sample_score(grid2(1, 2, 3, 8), 0.0), 14.0);
}

TEST(SampleScore, ThresholdIsStrict) {
  EXPECT_EQ(sample_score(grid2(7, 7, 7, 8), 7.0), 8.0);
  EXPECT_EQ(sample_score(grid2(1, 2, 3, 8), 8.0), 0.0);
}

TEST(SampleScore, NonIncreasingInThreshold) {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> t(0.0, 12.0);
  for (int trial = 0; trial < 500; ++trial) {
    const Tensor<double> nll = oracle::random_tensor<double>(Shape{4, 4}, gen, 0.0, 10.0);
    double a = t(gen), b = t(gen);
    if (a > b) std::swap(a, b);
    ASSERT_GE(sample_score(nll, a), sample_score(nll, b));
  }
}

// --- restoration mask -------------------------------------------------------

TEST(RestorationMask, WorkedExample) {
  EXPECT_EQ(restoration_mask(grid2(1, 6, 4, 9), 5.0), (BoolGrid{false, true, false, true}));
}

TEST(RestorationMask, AllBelowGivesEmptyMask) {
  EXPECT_EQ(restoration_mask(grid2(1, 2, 3, 4), 5.0), BoolGrid(4, false));
}

TEST(RestorationMask, ZeroThresholdSelectsAllPositiveEntries) {
  EXPECT_EQ(restoration_mask(grid2(0.1, 2, 3, 4), 0.0), BoolGrid(4, true));
}

TEST(RestorationMask, ThresholdIsStrict) {
  EXPECT_EQ(restoration_mask(grid2(5, 5, 5.0001, 4), 5.0), (BoolGrid{false, false, true, false}));
}

// --- consolidate ------------------------------------------------------------

TEST(Consolidate, SingleRestorationIsResidual) {
  const Tensor<double> y = grid2(1, 2, 3, 4);
  const Tensor<double> x = grid2(0, 2.5, 3, 1);
  ScoringConfig cfg;
  EXPECT_EQ(restoration_weights(y, {x}, cfg), std::vector<double>{1.0});
  EXPECT_EQ(consolidate(y, {x}, cfg), grid2(1, 0.5, 0, 3));
}

TEST(Consolidate, IdenticalRestorationsShareWeight) {
  const Tensor<double> y = grid2(1, 2, 3, 4);
  const Tensor<double> x = grid2(0, 2.5, 3, 1);
  ScoringConfig cfg;
  EXPECT_EQ(restoration_weights(y, {x, x}, cfg), (std::vector<double>{0.5, 0.5}));
  EXPECT_EQ(consolidate(y, {x, x}, cfg), grid2(1, 0.5, 0, 3));
}

TEST(Consolidate, ZeroTemperatureGivesUniformWeights) {
  std::mt19937_64 gen(2);
  const Tensor<double> y = oracle::random_tensor<double>(Shape{5, 5}, gen);
  std::vector<Tensor<double>> xs;
  for (int j = 0; j < 4; ++j) xs.push_back(oracle::random_tensor<double>(Shape{5, 5}, gen, -j, j + 1.0));
  ScoringConfig cfg;
  cfg.k_temp = 0.0;
  for (double w : restoration_weights(y, xs, cfg)) EXPECT_EQ(w, 0.25);
}

TEST(Consolidate, WeightsMatchSoftmaxOfInverseResidual) {
  std::mt19937_64 gen(3);
  const Tensor<double> y = oracle::random_tensor<double>(Shape{3, 3}, gen);
  std::vector<Tensor<double>> xs;
  for (int j = 0; j < 3; ++j) xs.push_back(oracle::random_tensor<double>(Shape{3, 3}, gen));
  ScoringConfig cfg;
  cfg.k_temp = 2.0;
  std::vector<double> expected;
  double total = 0.0;
  for (const auto& x : xs) {
    double r = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) r += std::abs(y[i] - x[i]);
    expected.push_back(std::exp(cfg.k_temp / r));
    total += expected.back();
  }
  const auto w = restoration_weights(y, xs, cfg);
  for (int j = 0; j < 3; ++j) EXPECT_NEAR(w[j], expected[j] / total, 1e-12);
}

TEST(Consolidate, WeightsSumToOneAndMapIsBoundedByMaxResidual) {
  std::mt19937_64 gen(4);
  std::uniform_int_distribution<int> count(1, 8);
  std::uniform_real_distribution<double> temp(0.0, 1000.0);
  for (int trial = 0; trial < 200; ++trial) {
    const Tensor<double> y = oracle::random_tensor<double>(Shape{6, 6}, gen);
    std::vector<Tensor<double>> xs;
    const int s = count(gen);
    for (int j = 0; j < s; ++j) xs.push_back(oracle::random_tensor<double>(Shape{6, 6}, gen));
    // An exact copy drives the residual to eps_denom and the logit very high.
    if (trial % 10 == 0) xs.push_back(y);
    ScoringConfig cfg;
    cfg.k_temp = temp(gen);
    const auto w = restoration_weights(y, xs, cfg);
    double sum = 0.0;
    for (double v : w) {
      ASSERT_GE(v, 0.0);
      sum += v;
    }
    ASSERT_NEAR(sum, 1.0, 1e-6);
    const Tensor<double> map = consolidate(y, xs, cfg);
    for (std::size_t i = 0; i < y.size(); ++i) {
      double mx = 0.0;
      for (const auto& x : xs) mx = std::max(mx, std::abs(y[i] - x[i]));
      ASSERT_GE(map[i], 0.0);
      ASSERT_LE(map[i], mx + 1e-12);
    }
  }
}

TEST(Consolidate, InvariantToRestorationOrder) {
  std::mt19937_64 gen(5);
  const Tensor<double> y = oracle::random_tensor<double>(Shape{8, 8}, gen);
  std::vector<Tensor<double>> xs;
  for (int j = 0; j < 5; ++j) xs.push_back(oracle::random_tensor<double>(Shape{8, 8}, gen));
  ScoringConfig cfg;
  cfg.k_temp = 30.0;
  const Tensor<double> ref = consolidate(y, xs, cfg);
  for (int trial = 0; trial < 10; ++trial) {
    std::shuffle(xs.begin(), xs.end(), gen);
    const Tensor<double> other = consolidate(y, xs, cfg);
    for (std::size_t i = 0; i < ref.size(); ++i) ASSERT_NEAR(ref[i], other[i], 1e-6);
  }
}

TEST(Consolidate, RejectsMismatchedShapes) {
  ScoringConfig cfg;
  EXPECT_THROW(consolidate(grid2(1, 2, 3, 4), {Tensor<double>(Shape{3, 3})}, cfg), ShapeError);
  EXPECT_THROW(consolidate(grid2(1, 2, 3, 4), {}, cfg), ValueError);
}

// --- smoothing --------------------------------------------------------------

TEST(Smooth, ConstantMapIsUnchanged) {
  const Tensor<double> m(Shape{12, 12}, 0.75);
  const Tensor<double> s = smooth(m);
  for (double v : s.values()) EXPECT_NEAR(v, 0.75, 1e-15);
}

TEST(Smooth, IsolatedSpikeIsErased) {
  for (auto [y, x] : {std::pair{5, 5}, std::pair{0, 0}, std::pair{0, 7}, std::pair{11, 3}}) {
    Tensor<double> m(Shape{12, 12});
    m.at(y, x) = 100.0;
    const Tensor<double> s = smooth(m);
    for (double v : s.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Smooth, SolidBlockSurvives) {
  Tensor<double> m(Shape{16, 16});
  for (int y = 6; y < 9; ++y) {
    for (int x = 6; x < 9; ++x) m.at(y, x) = 2.0;
  }
  const Tensor<double> s = smooth(m);
  EXPECT_GT(s.at(7, 7), 0.0);
  EXPECT_NEAR(s.at(7, 7), 2.0 / 49.0, 1e-15);
  EXPECT_EQ(s.at(0, 0), 0.0);
}

TEST(Smooth, FiltersMatchDirectEvaluation) {
  std::mt19937_64 gen(6);
  for (Shape shape : {Shape{1, 1}, Shape{2, 5}, Shape{9, 9}, Shape{16, 12}}) {
    const Tensor<double> m = oracle::random_tensor<double>(shape, gen, 0.0, 1.0);
    for (int size : {1, 3, 5, 7}) {
      const Tensor<double> mn = min_filter(m, size);
      const Tensor<double> mean = mean_filter(m, size);
      const Tensor<double> mn_ref = naive_window(m, size, true);
      const Tensor<double> mean_ref = naive_window(m, size, false);
      for (std::size_t i = 0; i < m.size(); ++i) {
        ASSERT_EQ(mn[i], mn_ref[i]);
        ASSERT_NEAR(mean[i], mean_ref[i], 1e-12);
      }
    }
    const Tensor<double> s = smooth(m);
    const Tensor<double> s_ref = naive_window(naive_window(m, 3, true), 7, false);
    for (std::size_t i = 0; i < m.size(); ++i) ASSERT_NEAR(s[i], s_ref[i], 1e-12);
  }
}

TEST(Smooth, BoundedByMeanFilterOfInput) {
  std::mt19937_64 gen(7);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor<double> m = oracle::random_tensor<double>(Shape{10, 10}, gen, 0.0, 5.0);
    const Tensor<double> s = smooth(m);
    const Tensor<double> mean = mean_filter(m, 7);
    for (std::size_t i = 0; i < m.size(); ++i) ASSERT_LE(s[i], mean[i] + 1e-12);
  }
}

TEST(Smooth, RejectsEvenWindow) {
  EXPECT_THROW(min_filter(Tensor<double>(Shape{4, 4}), 2), ValueError);
}

// --- restoration pipeline ---------------------------------------------------

CodecConfig tiny_codec() {
  CodecConfig c;
  c.image_side = 16;
  c.blocks = 2;
  c.residual_blocks = 1;
  c.channels = 4;
  c.embedding_dim = 8;
  c.num_codes = 8;
  return c;
}

PriorConfig tiny_prior() {
  PriorConfig c;
  c.num_codes = 8;
  c.channels = 8;
  c.blocks = 1;
  c.residual_blocks = 1;
  return c;
}

struct TinyModels {
  VqCodec<double> codec{tiny_codec(), 1};
  ArPrior<double> prior{tiny_prior(), 2};
  Tensor<double> image;
  TinyModels() {
    std::mt19937_64 gen(3);
    image = oracle::random_tensor<double>(Shape{16, 16}, gen, 0.0, 1.0);
  }
};

TEST(Restore, InfiniteThresholdGivesPlainReconstruction) {
  TinyModels m;
  ScoringConfig cfg;
  cfg.lambda_p = std::numeric_limits<double>::infinity();
  Rng rng(1);
  const Tensor<double> restored = restore_image(m.image, m.codec, m.prior, Ctx{0.0}, cfg, rng);
  const Tensor<double> recon = m.codec.reconstruct(m.image);
  ASSERT_EQ(restored.shape(), recon.shape());
  for (std::size_t i = 0; i < recon.size(); ++i) EXPECT_NEAR(restored[i], recon[i], 1e-12);
}

TEST(Restore, SameSeedSameRestoration) {
  TinyModels m;
  ScoringConfig cfg;
  cfg.lambda_p = 0.0;
  Rng a(9), b(9);
  EXPECT_EQ(restore_image(m.image, m.codec, m.prior, Ctx{0.1}, cfg, a),
            restore_image(m.image, m.codec, m.prior, Ctx{0.1}, cfg, b));
}

TEST(PixelScore, SingleRestorationWithEmptyMaskIsSmoothedReconstructionError) {
  TinyModels m;
  ScoringConfig cfg;
  cfg.restorations = 1;
  cfg.lambda_p = 1e9;
  const Tensor<double> map = pixel_score(m.image, m.codec, m.prior, Ctx{0.0}, cfg, 5, 6);
  const Tensor<double> recon = m.codec.reconstruct(m.image);
  Tensor<double> residual(m.image.shape());
  for (std::size_t i = 0; i < residual.size(); ++i) residual[i] = std::abs(m.image[i] - recon[i]);
  const Tensor<double> expected = smooth(residual);
  for (std::size_t i = 0; i < map.size(); ++i) EXPECT_NEAR(map[i], expected[i], 1e-12);
}

TEST(PixelScore, DeterministicUnderMasterSeed) {
  TinyModels m;
  ScoringConfig cfg;
  cfg.restorations = 3;
  cfg.lambda_p = 0.0;
  const auto a = score_image(m.image, m.codec, m.prior, Ctx{0.0}, cfg, 5, 6);
  const auto b = score_image(m.image, m.codec, m.prior, Ctx{0.0}, cfg, 5, 6);
  EXPECT_EQ(a.anomaly_map, b.anomaly_map);
  EXPECT_EQ(a.sample_score, b.sample_score);
  for (double v : a.anomaly_map.values()) EXPECT_GE(v, 0.0);
}

TEST(PixelScore, SampleScoreUsesLatentNll) {
  TinyModels m;
  ScoringConfig cfg;
  cfg.restorations = 1;
  const auto s = score_image(m.image, m.codec, m.prior, Ctx{0.0}, cfg, 1, 1);
  const LatentGrid grid = m.codec.quantize(m.codec.encode(m.image)).indices;
  EXPECT_EQ(s.sample_score, sample_score(m.prior.nll_map(grid, Ctx{0.0}), cfg.lambda_s));
  EXPECT_EQ(s.mask, restoration_mask(s.nll, cfg.lambda_p));
}

TEST(RestorationRng, StreamsAreIndependent) {
  Rng a = restoration_rng(1, 2, 0);
  Rng b = restoration_rng(1, 2, 1);
  Rng c = restoration_rng(1, 3, 0);
  const auto va = a.next_u64(), vb = b.next_u64(), vc = c.next_u64();
  EXPECT_NE(va, vb);
  EXPECT_NE(va, vc);
  Rng a2 = restoration_rng(1, 2, 0);
  EXPECT_EQ(a2.next_u64(), va);
}

// --- baseline ---------------------------------------------------------------

TEST(VaeScores, PerfectReconstructionScoresZero) {
  Vae<double> vae(VaeConfig{tiny_codec(), 6}, 1);
  for (auto& p : vae.params().items()) p.value.fill(0.0);
  const auto [score, map] = vae_scores(Tensor<double>(Shape{16, 16}), vae);
  EXPECT_EQ(score, 0.0);
  for (double v : map.values()) EXPECT_EQ(v, 0.0);
}

TEST(VaeScores, MapIsNonNegativeSmoothedResidual) {
  const Vae<double> vae(VaeConfig{tiny_codec(), 6}, 2);
  std::mt19937_64 gen(8);
  const Tensor<double> img = oracle::random_tensor<double>(Shape{16, 16}, gen, 0.0, 1.0);
  const auto [score, map] = vae_scores(img, vae);
  EXPECT_GT(score, 0.0);
  const Tensor<double> recon = vae.reconstruct_mean(img);
  Tensor<double> residual(img.shape());
  for (std::size_t i = 0; i < img.size(); ++i) residual[i] = std::abs(img[i] - recon[i]);
  const Tensor<double> expected = smooth(residual);
  for (std::size_t i = 0; i < map.size(); ++i) {
    EXPECT_GE(map[i], 0.0);
    EXPECT_NEAR(map[i], expected[i], 1e-12);
  }
}

TEST(ScoringConfig, RejectsInvalidValues) {
  ScoringConfig c;
  c.restorations = 0;
  EXPECT_THROW(c.validate(), ValueError);
  c = ScoringConfig{};
  c.lambda_s = -1.0;
  EXPECT_THROW(c.validate(), ValueError);
  c = ScoringConfig{};
  c.eps_denom = 0.0;
  EXPECT_THROW(c.validate(), ValueError);
  c = ScoringConfig{};
  c.k_temp = -0.5;
  EXPECT_THROW(c.validate(), ValueError);
}

}  // namespace
}  // namespace lsr
