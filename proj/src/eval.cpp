#include "lsr/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lsr {

namespace {

void check_scored_set(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) {
    throw ShapeError("scores and labels differ in length (" + std::to_string(scores.size()) + " vs " +
                     std::to_string(labels.size()) + ")");
  }
  for (double s : scores) {
    if (!std::isfinite(s)) throw NonFiniteError("scores must be finite");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw ValueError("labels must be 0 or 1");
  }
}

// Indices sorted by descending score (stable, so equal scores keep input order).
std::vector<std::size_t> descending_order(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
  check_scored_set(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t negatives = labels.size() - positives;
  if (positives == 0 || negatives == 0) throw ValueError("auroc needs both positive and negative labels");
  // Walk groups of tied scores from the top; each positive in a group beats
  // every negative below the group and ties with the negatives inside it.
  const auto order = descending_order(scores);
  double wins = 0.0;
  std::size_t neg_seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::size_t pos_group = 0;
    std::size_t neg_group = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_group : neg_group) += 1;
      ++j;
    }
    const std::size_t neg_below = negatives - neg_seen - neg_group;
    wins += static_cast<double>(pos_group) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_group));
    neg_seen += neg_group;
    i = j;
  }
  return wins / (static_cast<double>(positives) * static_cast<double>(negatives));
}

double average_precision(std::span<const double> scores, std::span<const int> labels) {
  check_scored_set(scores, labels);
  const auto positives = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  if (positives == 0) throw ValueError("average_precision needs at least one positive label");
  const auto order = descending_order(scores);
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0;
  std::size_t seen = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(seen);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double dice(std::span<const int> pred, std::span<const int> truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice: masks differ in size");
  std::int64_t a = 0;
  std::int64_t b = 0;
  std::int64_t both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0;
    const bool t = truth[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

double dice(const Tensor<std::int32_t>& pred, const Tensor<std::int32_t>& truth) {
  if (pred.shape() != truth.shape()) {
    throw ShapeError("dice: shapes " + shape_str(pred.shape()) + " and " + shape_str(truth.shape()) + " differ");
  }
  return dice(std::span<const int>(pred.data(), pred.size()), std::span<const int>(truth.data(), truth.size()));
}

DiceResult best_dice(std::span<const double> map, std::span<const int> truth) {
  if (map.size() != truth.size()) throw ShapeError("best_dice: map and mask differ in size");
  if (map.empty()) throw ValueError("best_dice: empty map");
  for (double v : map) {
    if (!std::isfinite(v)) throw NonFiniteError("best_dice: map must be finite");
  }
  std::int64_t truth_size = 0;
  for (int t : truth) truth_size += (t != 0);
  const auto order = descending_order(map);
  // Dice as an exact fraction num/den, compared by cross-multiplication.
  std::int64_t best_num = -1;
  std::int64_t best_den = 1;
  double best_t = map[order.front()];
  std::int64_t pred_size = 0;
  std::int64_t both = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && map[order[j]] == map[order[i]]) {
      ++pred_size;
      both += (truth[order[j]] != 0);
      ++j;
    }
    const std::int64_t num = 2 * both;
    const std::int64_t den = pred_size + truth_size;
    // Thresholds decrease along the sweep, so ">=" keeps the lowest on ties.
    if (best_num < 0 || num * best_den >= best_num * den) {
      best_num = num;
      best_den = den;
      best_t = map[order[i]];
    }
    i = j;
  }
  return {best_t, static_cast<double>(best_num) / static_cast<double>(best_den)};
}

template <class T>
DiceResult best_dice(const Tensor<T>& map, const Tensor<std::int32_t>& truth) {
  if (map.shape() != truth.shape()) throw ShapeError("best_dice: map and mask shapes differ");
  std::vector<double> m(map.values().begin(), map.values().end());
  return best_dice(std::span<const double>(m), std::span<const int>(truth.data(), truth.size()));
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ValueError("percentile of an empty set");
  if (!(q >= 0.0 && q <= 100.0)) throw ValueError("percentile q must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

template DiceResult best_dice(const Tensor<float>&, const Tensor<std::int32_t>&);
template DiceResult best_dice(const Tensor<double>&, const Tensor<std::int32_t>&);

}  // namespace lsr
