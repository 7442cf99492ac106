#pragma once

// Ranking and overlap metrics: AUROC, step-wise average precision, Dice.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "lsr/tensor.hpp"

namespace lsr {

/// P(score+ > score-) + 0.5 * P(score+ == score-) over all positive/negative pairs.
double auroc(std::span<const double> scores, std::span<const int> labels);

/// Sum_n (R_n - R_{n-1}) * P_n over descending unique score thresholds.
double average_precision(std::span<const double> scores, std::span<const int> labels);

/// 2|A and B| / (|A| + |B|); 1.0 when both masks are empty.
double dice(std::span<const int> pred, std::span<const int> truth);
double dice(const Tensor<std::int32_t>& pred, const Tensor<std::int32_t>& truth);

struct DiceResult {
  double threshold = 0.0;
  double dice = 0.0;
};

/// Sweep pred = (map >= t) over the unique values t of the pooled maps and
/// return the best (threshold, dice); ties go to the lowest threshold.
DiceResult best_dice(std::span<const double> map, std::span<const int> truth);

template <class T>
DiceResult best_dice(const Tensor<T>& map, const Tensor<std::int32_t>& truth);

/// Percentile with linear interpolation between closest ranks (q in [0, 100]).
double percentile(std::vector<double> values, double q);

}  // namespace lsr
