#include "lsr/scoring.hpp"

#include <algorithm>
#include <cmath>

namespace lsr {

void ScoringConfig::validate() const {
  if (!(lambda_s >= 0.0) || !(lambda_p >= 0.0)) throw ValueError("lambda_s and lambda_p must be >= 0");
  if (restorations < 1) throw ValueError("scoring.restorations must be >= 1");
  if (!(k_temp >= 0.0)) throw ValueError("scoring.k_temp must be >= 0");
  if (!(eps_denom > 0.0)) throw ValueError("scoring.eps_denom must be > 0");
  if (!(temperature >= 0.0)) throw ValueError("scoring.temperature must be >= 0");
}

template <class T>
double sample_score(const Tensor<T>& nll, double lambda_s) {
  double total = 0.0;
  for (T v : nll.values()) {
    if (static_cast<double>(v) > lambda_s) total += static_cast<double>(v);
  }
  return total;
}

template <class T>
BoolGrid restoration_mask(const Tensor<T>& nll, double lambda_p) {
  BoolGrid mask(nll.size());
  for (std::size_t i = 0; i < nll.size(); ++i) mask[i] = static_cast<double>(nll[i]) > lambda_p;
  return mask;
}

template <class T>
std::vector<double> restoration_weights(const Tensor<T>& original, const std::vector<Tensor<T>>& restorations,
                                        const ScoringConfig& cfg) {
  if (restorations.empty()) throw ValueError("consolidate needs at least one restoration");
  std::vector<double> logits(restorations.size());
  for (std::size_t j = 0; j < restorations.size(); ++j) {
    if (restorations[j].shape() != original.shape()) {
      throw ShapeError("restoration " + std::to_string(j) + " has shape " + shape_str(restorations[j].shape()) +
                       ", expected " + shape_str(original.shape()));
    }
    double residual = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
      residual += std::abs(static_cast<double>(original[i]) - static_cast<double>(restorations[j][i]));
    }
    logits[j] = cfg.k_temp / std::max(residual, cfg.eps_denom);
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (auto& v : logits) {
    v = std::exp(v - mx);
    total += v;
  }
  for (auto& v : logits) v /= total;
  return logits;
}

template <class T>
Tensor<T> consolidate(const Tensor<T>& original, const std::vector<Tensor<T>>& restorations,
                      const ScoringConfig& cfg) {
  const std::vector<double> w = restoration_weights(original, restorations, cfg);
  std::vector<double> acc(original.size(), 0.0);
  for (std::size_t j = 0; j < restorations.size(); ++j) {
    for (std::size_t i = 0; i < original.size(); ++i) {
      acc[i] += w[j] * std::abs(static_cast<double>(original[i]) - static_cast<double>(restorations[j][i]));
    }
  }
  Tensor<T> out(original.shape());
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
  return out;
}

namespace {

template <class T, class Reduce>
Tensor<T> window_filter(const Tensor<T>& map, int size, Reduce reduce) {
  if (map.rank() != 2) throw ShapeError("filters expect a 2D map, got " + shape_str(map.shape()));
  if (size < 1 || size % 2 == 0) throw ValueError("filter size must be odd and positive");
  const int h = map.dim(0);
  const int w = map.dim(1);
  const int r = size / 2;
  Tensor<T> out(map.shape());
  std::vector<T> window;
  window.reserve(static_cast<std::size_t>(size) * size);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      window.clear();
      for (int dy = -r; dy <= r; ++dy) {
        const int yy = std::clamp(y + dy, 0, h - 1);
        for (int dx = -r; dx <= r; ++dx) window.push_back(map.at(yy, std::clamp(x + dx, 0, w - 1)));
      }
      out.at(y, x) = reduce(window);
    }
  }
  return out;
}

}  // namespace

template <class T>
Tensor<T> min_filter(const Tensor<T>& map, int size) {
  return window_filter(map, size, [](const std::vector<T>& v) { return *std::min_element(v.begin(), v.end()); });
}

template <class T>
Tensor<T> mean_filter(const Tensor<T>& map, int size) {
  return window_filter(map, size, [](const std::vector<T>& v) {
    double s = 0.0;
    for (T x : v) s += static_cast<double>(x);
    return static_cast<T>(s / static_cast<double>(v.size()));
  });
}

template <class T>
Tensor<T> smooth(const Tensor<T>& map) {
  return mean_filter(min_filter(map, 3), 7);
}

template <class T>
LatentAnalysis<T> analyze_latents(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                                  ConditioningContext ctx, double lambda_p) {
  if (image.rank() != 2) throw ShapeError("expected a single image [S,S]");
  LatentAnalysis<T> a;
  a.grid = codec.quantize(codec.encode(image)).indices;
  a.nll = prior.nll_map(a.grid, ctx);
  a.mask = restoration_mask(a.nll, lambda_p);
  return a;
}

namespace {

template <class T>
std::vector<Tensor<T>> decode_grids(const VqCodec<T>& codec, const std::vector<LatentGrid>& grids) {
  const int n = static_cast<int>(grids.size());
  const int h = grids.front().dim(0);
  const int w = grids.front().dim(1);
  LatentGrid batch(Shape{n, h, w});
  for (int s = 0; s < n; ++s) std::copy(grids[s].values().begin(), grids[s].values().end(), batch.data() + s * h * w);
  Tensor<T> images = codec.decode(codec.lookup(batch));
  const int side = images.dim(1);
  std::vector<Tensor<T>> out;
  out.reserve(grids.size());
  const std::size_t per = static_cast<std::size_t>(side) * images.dim(2);
  for (int s = 0; s < n; ++s) {
    std::vector<T> v(images.data() + s * per, images.data() + (s + 1) * per);
    out.emplace_back(Shape{side, images.dim(2)}, std::move(v));
  }
  return out;
}

template <class T>
std::vector<Tensor<T>> restore_from(const LatentAnalysis<T>& a, const VqCodec<T>& codec, const ArPrior<T>& prior,
                                    ConditioningContext ctx, const ScoringConfig& cfg, std::vector<Rng>& rngs) {
  return decode_grids(codec, prior.restore_many(a.grid, a.mask, ctx, rngs, cfg.temperature));
}

}  // namespace

template <class T>
std::vector<Tensor<T>> restore_images(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                                      ConditioningContext ctx, const ScoringConfig& cfg, std::vector<Rng>& rngs) {
  cfg.validate();
  if (rngs.empty()) return {};
  const LatentAnalysis<T> a = analyze_latents(image, codec, prior, ctx, cfg.lambda_p);
  return restore_from(a, codec, prior, ctx, cfg, rngs);
}

template <class T>
Tensor<T> restore_image(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                        ConditioningContext ctx, const ScoringConfig& cfg, Rng& rng) {
  std::vector<Rng> one{rng};
  auto out = restore_images(image, codec, prior, ctx, cfg, one);
  rng = one.front();
  return out.front();
}

Rng restoration_rng(std::uint64_t master_seed, std::uint64_t image_id, std::uint64_t draw) {
  return Rng(master_seed, "restoration", {image_id, draw});
}

template <class T>
ImageScore<T> score_image(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                          ConditioningContext ctx, const ScoringConfig& cfg, std::uint64_t master_seed,
                          std::uint64_t image_id) {
  cfg.validate();
  LatentAnalysis<T> a = analyze_latents(image, codec, prior, ctx, cfg.lambda_p);
  std::vector<Rng> rngs;
  rngs.reserve(static_cast<std::size_t>(cfg.restorations));
  for (int j = 0; j < cfg.restorations; ++j) rngs.push_back(restoration_rng(master_seed, image_id, j));
  const std::vector<Tensor<T>> restorations = restore_from(a, codec, prior, ctx, cfg, rngs);
  ImageScore<T> out;
  out.sample_score = sample_score(a.nll, cfg.lambda_s);
  out.anomaly_map = smooth(consolidate(image, restorations, cfg));
  out.nll = std::move(a.nll);
  out.mask = std::move(a.mask);
  return out;
}

template <class T>
Tensor<T> pixel_score(const Tensor<T>& image, const VqCodec<T>& codec, const ArPrior<T>& prior,
                      ConditioningContext ctx, const ScoringConfig& cfg, std::uint64_t master_seed,
                      std::uint64_t image_id) {
  return score_image(image, codec, prior, ctx, cfg, master_seed, image_id).anomaly_map;
}

template <class T>
std::pair<double, Tensor<T>> vae_scores(const Tensor<T>& image, const Vae<T>& vae) {
  if (image.rank() != 2) throw ShapeError("expected a single image [S,S]");
  const LossBreakdown<T> loss = vae_loss_mean(image, vae);
  const Tensor<T> recon = vae.reconstruct_mean(image);
  Tensor<T> residual(image.shape());
  for (std::size_t i = 0; i < image.size(); ++i) residual[i] = std::abs(image[i] - recon[i]);
  return {static_cast<double>(loss.total), smooth(residual)};
}

#define LSR_INSTANTIATE(T)                                                                                   \
  template double sample_score(const Tensor<T>&, double);                                                    \
  template BoolGrid restoration_mask(const Tensor<T>&, double);                                              \
  template std::vector<double> restoration_weights(const Tensor<T>&, const std::vector<Tensor<T>>&,          \
                                                   const ScoringConfig&);                                    \
  template Tensor<T> consolidate(const Tensor<T>&, const std::vector<Tensor<T>>&, const ScoringConfig&);     \
  template Tensor<T> min_filter(const Tensor<T>&, int);                                                      \
  template Tensor<T> mean_filter(const Tensor<T>&, int);                                                     \
  template Tensor<T> smooth(const Tensor<T>&);                                                               \
  template LatentAnalysis<T> analyze_latents(const Tensor<T>&, const VqCodec<T>&, const ArPrior<T>&,         \
                                             ConditioningContext, double);                                   \
  template Tensor<T> restore_image(const Tensor<T>&, const VqCodec<T>&, const ArPrior<T>&,                   \
                                   ConditioningContext, const ScoringConfig&, Rng&);                         \
  template std::vector<Tensor<T>> restore_images(const Tensor<T>&, const VqCodec<T>&, const ArPrior<T>&,     \
                                                 ConditioningContext, const ScoringConfig&, std::vector<Rng>&); \
  template ImageScore<T> score_image(const Tensor<T>&, const VqCodec<T>&, const ArPrior<T>&,                 \
                                     ConditioningContext, const ScoringConfig&, std::uint64_t, std::uint64_t); \
  template Tensor<T> pixel_score(const Tensor<T>&, const VqCodec<T>&, const ArPrior<T>&, ConditioningContext, \
                                 const ScoringConfig&, std::uint64_t, std::uint64_t);                        \
  template std::pair<double, Tensor<T>> vae_scores(const Tensor<T>&, const Vae<T>&);

LSR_INSTANTIATE(float)
LSR_INSTANTIATE(double)

#undef LSR_INSTANTIATE

}  // namespace lsr
