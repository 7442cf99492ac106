#pragma once

// Causal autoregressive categorical model over latent grids, conditioned on
// the slice position. Positions are visited in raster (row-major) order;
// the prediction at scan index i reads only tokens at indices < i.
//
// Architecture: token embedding shifted one step in scan order, then blocks
// of [conditioning add, masked-conv residual sub-blocks, strictly causal
// single-head self-attention], then a 1x1 head to K logits.

#include <cstdint>
#include <vector>

#include "lsr/autodiff.hpp"
#include "lsr/tensor.hpp"

namespace lsr {

using LatentGrid = Tensor<std::int32_t>;
using BoolGrid = std::vector<bool>;

struct PriorConfig {
  int num_codes = 32;
  int channels = 64;
  int blocks = 2;
  int residual_blocks = 2;
  double dropout = 0.1;
  void validate() const;
};

/// Axial slice position in [-0.5, 0.5].
struct ConditioningContext {
  double slice_position = 0.0;
  void validate() const;
};

/// Raster scan order: (h, w) <-> h * width + w.
struct ScanOrder {
  int height = 0;
  int width = 0;
  int index(int h, int w) const { return h * width + w; }
  std::pair<int, int> position(int i) const { return {i / width, i % width}; }
  int size() const { return height * width; }
};

template <class T>
class ArPrior {
 public:
  ArPrior(const PriorConfig& cfg, std::uint64_t seed);
  ArPrior(const PriorConfig& cfg, ad::ParameterSet<T> params);

  const PriorConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }

  struct Forward {
    ad::Var<T> logits;  // [N,H,W,K]
    ad::Var<T> nll;     // [N,H,W]
    ad::Var<T> loss;    // mean nll
  };

  /// grids [N,H,W]; one context per grid. When `attention_out` is given it
  /// receives each block's [N,L,L] attention weights.
  Forward forward(ad::Graph<T>& g, const LatentGrid& grids, const std::vector<double>& ctx,
                  std::vector<Tensor<T>>* attention_out = nullptr);

  /// [H,W] -> [H,W,K]; [N,H,W] with one context per grid -> [N,H,W,K].
  Tensor<T> logits(const LatentGrid& grid, ConditioningContext ctx) const;
  Tensor<T> logits(const LatentGrid& grids, const std::vector<double>& ctx) const;

  /// Per-position -log p(x_i | x_<i, ctx) in nats: [H,W] (or [N,H,W]).
  Tensor<T> nll_map(const LatentGrid& grid, ConditioningContext ctx) const;
  Tensor<T> nll_map(const LatentGrid& grids, const std::vector<double>& ctx) const;

  /// Mean of nll_map.
  T loss(const LatentGrid& grid, ConditioningContext ctx) const;

  /// Sequential sampling in scan order from softmax(logits / temperature).
  /// temperature == 0 selects greedy argmax decoding (rng unused).
  LatentGrid sample(int height, int width, ConditioningContext ctx, Rng& rng, double temperature = 1.0) const;

  /// Resample masked positions in scan order conditioned on the current
  /// prefix; unmasked positions are copied from `grid`.
  LatentGrid restore(const LatentGrid& grid, const BoolGrid& mask, ConditioningContext ctx, Rng& rng,
                     double temperature = 1.0) const;

  /// One restoration per rng stream, evaluated as a batch.
  std::vector<LatentGrid> restore_many(const LatentGrid& grid, const BoolGrid& mask, ConditioningContext ctx,
                                       std::vector<Rng>& rngs, double temperature = 1.0) const;

 private:
  void check_grid(const LatentGrid& grids) const;

  PriorConfig cfg_;
  ad::ParameterSet<T> params_;
  Tensor<T> conv_mask_;  // [C,3,3,C] taps above, and left-or-centre on the current row
};

/// Draw one token from a logit row.
template <class T>
int sample_token(const T* logits, int k, double temperature, Rng& rng);

}  // namespace lsr
