#pragma once

// Sample-wise and pixel-wise anomaly scores from latent NLL maps and
// latent-space restorations.

#include <cstdint>
#include <vector>

#include "lsr/codec.hpp"
#include "lsr/prior.hpp"

namespace lsr {

struct ScoringConfig {
  double lambda_s = 7.0;       // nats; sample-score threshold
  double lambda_p = 5.0;       // nats; restoration threshold
  int restorations = 15;       // S
  double k_temp = 100.0;       // softmax temperature of the restoration weights (untuned)
  double eps_denom = 1e-8;
  double temperature = 1.0;    // sampling temperature for restorations
  void validate() const;
};

/// Sum of the entries strictly above lambda_s.
template <class T>
double sample_score(const Tensor<T>& nll, double lambda_s);

/// mask[i] = nll[i] > lambda_p.
template <class T>
BoolGrid restoration_mask(const Tensor<T>& nll, double lambda_p);

/// Residual weights: softmax over j of k / max(sum |original - restoration_j|, eps).
template <class T>
std::vector<double> restoration_weights(const Tensor<T>& original, const std::vector<Tensor<T>>& restorations,
                                        const ScoringConfig& cfg);

/// Weighted sum of residual images |original - restoration_j|.
template <class T>
Tensor<T> consolidate(const Tensor<T>& original, const std::vector<Tensor<T>>& restorations,
                      const ScoringConfig& cfg);

/// Stride-1 same-size min / mean filters with edge-replicate padding.
template <class T>
Tensor<T> min_filter(const Tensor<T>& map, int size);
template <class T>
Tensor<T> mean_filter(const Tensor<T>& map, int size);

/// 3x3 min filter followed by 7x7 mean filter.
template <class T>
Tensor<T> smooth(const Tensor<T>& map);

/// Latent pipeline of one image, shared by the scoring entry points.
template <class T>
struct LatentAnalysis {
  LatentGrid grid;
  Tensor<T> nll;
  BoolGrid mask;
};

template <class T>
LatentAnalysis<T> analyze_latents(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                                  ConditioningContext ctx, double lambda_p);

/// One restoration: resample latents whose NLL exceeds lambda_p, decode.
template <class T>
Tensor<T> restore_image(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                        ConditioningContext ctx, const ScoringConfig& cfg, Rng& rng);

/// One restoration per rng stream (batched prior and decoder evaluation).
template <class T>
std::vector<Tensor<T>> restore_images(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                                      ConditioningContext ctx, const ScoringConfig& cfg, std::vector<Rng>& rngs);

/// Independent stream for restoration draw `draw` of image `image_id`.
Rng restoration_rng(std::uint64_t master_seed, std::uint64_t image_id, std::uint64_t draw);

template <class T>
struct ImageScore {
  double sample_score = 0.0;
  Tensor<T> anomaly_map;  // smoothed AS_pixel
  Tensor<T> nll;
  BoolGrid mask;
};

/// Full method on one image: sample score plus smoothed pixel map.
template <class T>
ImageScore<T> score_image(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                          ConditioningContext ctx, const ScoringConfig& cfg, std::uint64_t master_seed,
                          std::uint64_t image_id);

/// Pixel-wise score only.
template <class T>
Tensor<T> pixel_score(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                      ConditioningContext ctx, const ScoringConfig& cfg, std::uint64_t master_seed,
                      std::uint64_t image_id);

/// Baseline: (full VAE loss at the posterior mean, smooth(|x - decode(mu)|)).
template <class T>
std::pair<double, Tensor<T>> vae_scores(const Tensor<T>& image, const Vae<T>& vae);

}  // namespace lsr
