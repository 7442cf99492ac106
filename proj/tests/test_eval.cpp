#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lsr/eval.hpp"
#include "oracles.hpp"

namespace lsr {
namespace {

/// AP as the mean, over positives, of the precision at that positive's score
/// (every item scoring at least as high counts as predicted).
double per_positive_ap(const std::vector<double>& scores, const std::vector<int>& labels) {
  double total = 0.0, positives = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    positives += 1.0;
    double predicted = 0.0, tp = 0.0;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (scores[j] >= scores[i]) {
        predicted += 1.0;
        tp += labels[j];
      }
    }
    total += tp / predicted;
  }
  return total / positives;
}

TEST(Auroc, WorkedExamples) {
  EXPECT_EQ(auroc(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{2, 2, 2, 2}, std::vector<int>{0, 1, 1, 0}), 0.5);
  EXPECT_EQ(auroc(std::vector<double>{3, 1, 2, 0}, std::vector<int>{1, 0, 1, 0}), 1.0);
  EXPECT_EQ(auroc(std::vector<double>{1, 3, 0, 2}, std::vector<int>{1, 0, 1, 0}), 0.0);
}

TEST(Auroc, RequiresBothClasses) {
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{1, 1}), ValueError);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{0, 0}), ValueError);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{0}), ShapeError);
  EXPECT_THROW(auroc(std::vector<double>{1, 2}, std::vector<int>{0, 2}), ValueError);
  EXPECT_THROW(auroc(std::vector<double>{NAN, 2}, std::vector<int>{0, 1}), NonFiniteError);
}

TEST(AveragePrecision, WorkedExamples) {
  EXPECT_EQ(average_precision(std::vector<double>{0.1, 0.9}, std::vector<int>{0, 1}), 1.0);
  EXPECT_EQ(average_precision(std::vector<double>{0.2, 0.8}, std::vector<int>{1, 0}), 0.5);
  EXPECT_THROW(average_precision(std::vector<double>{0.2, 0.8}, std::vector<int>{0, 0}), ValueError);
}

TEST(RankingMetrics, MatchExhaustiveOraclesOnSmallSets) {
  // Every labelled score sequence of length 1..6 over a four-value alphabet.
  // The acceptance binary runs the same enumeration up to length 8.
  const double alphabet[4] = {0.0, 0.25, 0.5, 1.0};
  std::size_t checked = 0;
  for (int n = 1; n <= 6; ++n) {
    const int score_codes = 1 << (2 * n);
    for (int sc = 0; sc < score_codes; ++sc) {
      std::vector<double> scores(n);
      for (int i = 0; i < n; ++i) scores[i] = alphabet[(sc >> (2 * i)) & 3];
      for (int lc = 1; lc < (1 << n); ++lc) {
        std::vector<int> labels(n);
        for (int i = 0; i < n; ++i) labels[i] = (lc >> i) & 1;
        const double ap = average_precision(scores, labels);
        ASSERT_NEAR(ap, oracle::sweep_average_precision(scores, labels), 1e-12);
        ASSERT_NEAR(ap, per_positive_ap(scores, labels), 1e-12);
        if (lc != (1 << n) - 1) {
          ASSERT_NEAR(auroc(scores, labels), oracle::pairwise_auroc(scores, labels), 1e-12);
        }
        ++checked;
      }
    }
  }
  EXPECT_GT(checked, 250000u);
}

TEST(RankingMetrics, RandomLargerSetsMatchOracles) {
  std::mt19937_64 gen(1);
  std::uniform_int_distribution<int> len(2, 12);
  std::uniform_int_distribution<int> val(0, 5);
  for (int trial = 0; trial < 2000; ++trial) {
    const int n = len(gen);
    std::vector<double> scores(n);
    std::vector<int> labels(n);
    for (int i = 0; i < n; ++i) {
      scores[i] = val(gen) * 0.1;
      labels[i] = static_cast<int>(gen() & 1);
    }
    labels[0] = 1;
    labels[1] = 0;
    ASSERT_NEAR(auroc(scores, labels), oracle::pairwise_auroc(scores, labels), 1e-12);
    ASSERT_NEAR(average_precision(scores, labels), oracle::sweep_average_precision(scores, labels), 1e-12);
  }
}

TEST(Auroc, InvariantUnderMonotoneTransform) {
  std::mt19937_64 gen(2);
  std::normal_distribution<double> nd;
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> scores(30), transformed(30);
    std::vector<int> labels(30);
    for (int i = 0; i < 30; ++i) {
      scores[i] = std::round(nd(gen) * 4.0) / 4.0;
      transformed[i] = std::exp(3.0 * scores[i]) - 7.0;
      labels[i] = i % 3 == 0;
    }
    EXPECT_EQ(auroc(scores, labels), auroc(transformed, labels));
    EXPECT_EQ(average_precision(scores, labels), average_precision(transformed, labels));
  }
}

TEST(Auroc, InvariantToPoolingOrder) {
  std::mt19937_64 gen(3);
  std::vector<double> scores(200);
  std::vector<int> labels(200);
  for (int i = 0; i < 200; ++i) {
    scores[i] = static_cast<double>(gen() % 17);
    labels[i] = (gen() % 5) == 0;
  }
  const double ref = auroc(scores, labels);
  std::vector<std::size_t> perm(200);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  std::vector<double> s2(200);
  std::vector<int> l2(200);
  for (int i = 0; i < 200; ++i) {
    s2[i] = scores[perm[i]];
    l2[i] = labels[perm[i]];
  }
  EXPECT_NEAR(auroc(s2, l2), ref, 1e-12);
  EXPECT_NEAR(average_precision(s2, l2), average_precision(scores, labels), 1e-12);
}

TEST(Dice, Identities) {
  const std::vector<int> a{1, 1, 0, 1, 0, 0, 1, 0};
  EXPECT_EQ(dice(a, a), 1.0);
  const std::vector<int> b{0, 0, 1, 0, 1, 1, 0, 0};
  EXPECT_EQ(dice(a, b), 0.0);
  EXPECT_EQ(dice(std::vector<int>(5, 0), std::vector<int>(5, 0)), 1.0);
}

TEST(Dice, FourSixThreeFixture) {
  // |A| = 4, |B| = 6, |A and B| = 3.
  const std::vector<int> a{1, 1, 1, 1, 0, 0, 0, 0};
  const std::vector<int> b{0, 1, 1, 1, 1, 1, 1, 0};
  EXPECT_NEAR(dice(a, b), 0.6, 1e-15);
  EXPECT_EQ(dice(a, b), dice(b, a));
}

TEST(Dice, SymmetricOnRandomMasks) {
  std::mt19937_64 gen(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> a(20), b(20);
    for (int i = 0; i < 20; ++i) {
      a[i] = static_cast<int>(gen() & 1);
      b[i] = static_cast<int>(gen() & 1);
    }
    ASSERT_EQ(dice(a, b), dice(b, a));
  }
}

TEST(Dice, TensorOverloadChecksShape) {
  const Tensor<std::int32_t> a(Shape{2, 3});
  const Tensor<std::int32_t> b(Shape{3, 2});
  EXPECT_THROW(dice(a, b), ShapeError);
  EXPECT_THROW(dice(std::vector<int>{1}, std::vector<int>{1, 0}), ShapeError);
}

TEST(BestDice, IndicatorMapIsPerfect) {
  const std::vector<int> truth{0, 1, 1, 0, 0, 1};
  const std::vector<double> map{0, 1, 1, 0, 0, 1};
  const DiceResult r = best_dice(map, truth);
  EXPECT_EQ(r.dice, 1.0);
  EXPECT_GT(r.threshold, 0.0);
  EXPECT_LE(r.threshold, 1.0);
}

TEST(BestDice, ConstantMapPredictsEverything) {
  const std::vector<int> truth{0, 1, 1, 0, 0, 0};
  const DiceResult r = best_dice(std::vector<double>(6, 0.3), truth);
  EXPECT_EQ(r.dice, dice(std::vector<int>(6, 1), truth));
  EXPECT_EQ(r.threshold, 0.3);
}

TEST(BestDice, SeparatingThresholdOfMonotoneMap) {
  const std::vector<double> map{0.1, 0.2, 0.3, 0.7, 0.8, 0.9};
  const std::vector<int> truth{0, 0, 0, 1, 1, 1};
  const DiceResult r = best_dice(map, truth);
  EXPECT_EQ(r.dice, 1.0);
  EXPECT_EQ(r.threshold, 0.7);
}

TEST(BestDice, MatchesExhaustiveSweep) {
  std::mt19937_64 gen(5);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<double> map(15);
    std::vector<int> truth(15);
    for (int i = 0; i < 15; ++i) {
      map[i] = static_cast<double>(gen() % 6);
      truth[i] = (gen() % 3) == 0;
    }
    double best = -1.0, best_t = 0.0;
    std::vector<double> ts = map;
    std::sort(ts.begin(), ts.end());
    for (double t : ts) {
      std::vector<int> pred(15);
      for (int i = 0; i < 15; ++i) pred[i] = map[i] >= t;
      double inter = 0, sa = 0, sb = 0;
      for (int i = 0; i < 15; ++i) {
        inter += pred[i] && truth[i];
        sa += pred[i];
        sb += truth[i];
      }
      const double d = sa + sb == 0 ? 1.0 : 2.0 * inter / (sa + sb);
      if (d > best) {
        best = d;
        best_t = t;
      }
    }
    const DiceResult r = best_dice(map, truth);
    ASSERT_NEAR(r.dice, best, 1e-15);
    ASSERT_EQ(r.threshold, best_t);
  }
}

TEST(Percentile, LinearInterpolation) {
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_NEAR(percentile(v, 90.0), 90.1, 1e-12);
  EXPECT_NEAR(percentile(v, 98.0), 98.02, 1e-12);
  EXPECT_EQ(percentile(v, 0.0), 1.0);
  EXPECT_EQ(percentile(v, 100.0), 100.0);
  EXPECT_EQ(percentile({5.0}, 37.0), 5.0);
  EXPECT_NEAR(percentile({3.0, 1.0, 2.0}, 50.0), 2.0, 1e-15);
  EXPECT_THROW(percentile({}, 50.0), ValueError);
  EXPECT_THROW(percentile({1.0}, 101.0), ValueError);
}

}  // namespace
}  // namespace lsr
