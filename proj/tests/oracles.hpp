#pragma once

// Independent reference implementations used by the unit tests and the
// acceptance binary. Each one is written the slow, obvious way and shares no
// code with the library routine it checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "lsr/autodiff.hpp"
#include "lsr/tensor.hpp"

namespace lsr::oracle {

// --- nearest neighbour ------------------------------------------------------

/// Exhaustive nearest codebook row of one feature vector, lowest index on ties.
inline int nearest_code(const double* feature, const Tensor<double>& codebook) {
  const int k = codebook.dim(0);
  const int d = codebook.dim(1);
  int best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (int j = 0; j < k; ++j) {
    double dist = 0.0;
    for (int c = 0; c < d; ++c) {
      const double diff = feature[c] - codebook[static_cast<std::size_t>(j) * d + c];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = j;
    }
  }
  return best;
}

// --- ranking metrics --------------------------------------------------------

/// Probability that a random positive outscores a random negative, ties
/// counting one half, by enumerating every (positive, negative) pair.
inline double pairwise_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

/// Average precision as the step-wise area under the precision-recall curve,
/// computed by sweeping every distinct score as a ">= t" threshold.
inline double sweep_average_precision(const std::vector<double>& scores, const std::vector<int>& labels) {
  std::vector<double> thresholds = scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  const double positives = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  double ap = 0.0;
  double prev_recall = 0.0;
  for (double t : thresholds) {
    double tp = 0.0;
    double predicted = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= t) {
        predicted += 1.0;
        tp += labels[i] == 1 ? 1.0 : 0.0;
      }
    }
    const double recall = tp / positives;
    ap += (recall - prev_recall) * (tp / predicted);
    prev_recall = recall;
  }
  return ap;
}

// --- finite differences -----------------------------------------------------

struct GradCheckReport {
  std::size_t checked = 0;
  // Perturbations that moved some relu or absolute-value input across its
  // kink. Central differences are meaningless there, so an instance is only
  // conclusive when this is zero.
  std::size_t kink_crossings = 0;
  double max_rel_error = 0.0;
  std::string worst;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with an absolute floor on the denominator. Central
/// differences at eps = 1e-5 carry about 1e-11 of rounding noise, so two
/// gradients that are both zero up to that noise are not compared relatively.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

/// Compare the analytic gradient of `build` (a scalar loss graph over
/// `params`) with central differences for every scalar of every parameter.
inline GradCheckReport finite_difference_check(ad::ParameterSet<double>& params,
                                               const std::function<ad::Var<double>(ad::Graph<double>&)>& build,
                                               double eps = 1e-5) {
  params.zero_grad();
  {
    ad::Graph<double> g;
    g.backward(build(g));
  }
  std::vector<Tensor<double>> analytic;
  for (const auto& p : params.items()) analytic.push_back(p.grad);

  std::vector<std::uint8_t> base_kinks, kinks;
  auto evaluate = [&](std::vector<std::uint8_t>& trace) {
    trace.clear();
    ad::Graph<double> g(false, nullptr, false);
    g.trace_kinks(&trace);
    return build(g).value()[0];
  };
  evaluate(base_kinks);

  GradCheckReport report;
  std::size_t pi = 0;
  for (auto& p : params.items()) {
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double saved = p.value[i];
      p.value[i] = saved + eps;
      const double up = evaluate(kinks);
      bool crossed = kinks != base_kinks;
      p.value[i] = saved - eps;
      const double down = evaluate(kinks);
      crossed = crossed || kinks != base_kinks;
      p.value[i] = saved;
      report.kink_crossings += crossed;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi].empty() ? 0.0 : analytic[pi][i];
      const double rel = relative_error(a, numeric);
      ++report.checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = p.name + "[" + std::to_string(i) + "]";
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
    ++pi;
  }
  return report;
}

/// Move every bias (and any other zero-initialized tensor) off zero. With
/// zero biases, units fed by an all-zero input sit exactly on the relu kink,
/// where the loss has no derivative and finite differences are one-sided.
inline void generic_point(ad::ParameterSet<double>& params, std::uint64_t seed, double scale = 0.1) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  for (auto& p : params.items()) {
    bool all_zero = true;
    for (double v : p.value.values()) all_zero = all_zero && v == 0.0;
    if (!all_zero) continue;
    for (auto& v : p.value.values()) v = dist(gen);
  }
}

// --- misc -------------------------------------------------------------------

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("lsr_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& gen, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(dist(gen));
  return t;
}

}  // namespace lsr::oracle
