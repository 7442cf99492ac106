#pragma once

// Convolutional encoder/decoder with a vector-quantization bottleneck, and
// the Gaussian-latent VAE baseline built on the same backbone.
//
// Layout: images are [S,S] (single) or [N,S,S] (batch); feature grids are
// [h,w,D] or [N,h,w,D] with h = w = S / 2^blocks.

#include <cstdint>
#include <optional>

#include "lsr/autodiff.hpp"
#include "lsr/tensor.hpp"

namespace lsr {

struct CodecConfig {
  int image_side = 32;
  int blocks = 2;           // each: one 2x down/upsample + residual_blocks sub-blocks
  int residual_blocks = 2;
  int channels = 32;        // desk budget; the prior keeps 64
  int embedding_dim = 64;   // D
  int num_codes = 32;       // K
  double dropout = 0.1;     // training only
  double beta = 1.0;        // commitment weight

  int downsample_factor() const { return 1 << blocks; }
  int latent_side() const { return image_side / downsample_factor(); }
  /// Throws DimensionError / ValueError on inconsistent settings.
  void validate() const;
};

template <class T>
struct QuantizationResult {
  Tensor<std::int32_t> indices;  // [...]
  Tensor<T> quantized;           // [..., D], rows copied from the codebook
  Tensor<T> distances;           // [...], squared L2 to the chosen code
};

/// Nearest-code assignment of features [..., D] against codebook [K, D].
/// Squared distances are summed in dimension order; ties go to the lowest index.
template <class T>
QuantizationResult<T> quantize(const Tensor<T>& features, const Tensor<T>& codebook);

/// Codebook initialization: i.i.d. uniform on [-1/K, 1/K].
template <class T>
Tensor<T> init_codebook(int num_codes, int dim, Rng& rng);

template <class T>
struct LossBreakdown {
  T reconstruction{};
  T codebook_term{};
  T commitment_term{};
  T kl_term{};
  T total{};
};

/// Values of the stop-gradient operands of the loss at one parameter point:
/// code assignment, encoder features z_e and chosen codes e. Passed to
/// forward(), they turn the loss into an ordinary function of the parameters
/// whose exact gradient equals the straight-through gradient at that point,
/// so it can be checked against finite differences.
template <class T>
struct StopGradientPoint {
  Tensor<std::int32_t> indices;  // [N,h,w]
  Tensor<T> features;            // [N,h,w,D]
  Tensor<T> codes;               // [N,h,w,D]
};

template <class T>
class VqCodec {
 public:
  /// Fresh parameters drawn from `seed`.
  VqCodec(const CodecConfig& cfg, std::uint64_t seed);
  /// Adopt existing parameters (e.g. from a checkpoint); shapes are verified.
  VqCodec(const CodecConfig& cfg, ad::ParameterSet<T> params);

  const CodecConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }
  const Tensor<T>& codebook() const { return params_.get("codebook").value; }

  Tensor<T> encode(const Tensor<T>& images) const;
  Tensor<T> decode(const Tensor<T>& quantized) const;
  QuantizationResult<T> quantize(const Tensor<T>& features) const;
  /// Codebook rows for each index: [...] -> [..., D].
  Tensor<T> lookup(const Tensor<std::int32_t>& indices) const;
  /// decode(quantize(encode(x)).quantized)
  Tensor<T> reconstruct(const Tensor<T>& images) const;

  struct Forward {
    ad::Var<T> features;        // z_e
    ad::Var<T> quantized;       // straight-through z_q
    ad::Var<T> output;          // decoded image batch [N,S,S,1]
    ad::Var<T> reconstruction;  // mean |x - x_hat|
    ad::Var<T> codebook_term;   // mean ||sg[z_e] - e||^2, gradient to codebook only
    ad::Var<T> commitment_term; // mean ||z_e - sg[e]||^2, gradient to encoder only
    ad::Var<T> total;
    Tensor<std::int32_t> indices;
  };

  /// Build the full loss graph. `frozen_indices` pins the code assignment
  /// instead of recomputing the argmin; `frozen_point` additionally pins the
  /// stop-gradient operands (and takes precedence).
  Forward forward(ad::Graph<T>& g, const Tensor<T>& images,
                  const Tensor<std::int32_t>* frozen_indices = nullptr,
                  const StopGradientPoint<T>* frozen_point = nullptr);
  /// Stop-gradient operands at the current parameters for `images`.
  StopGradientPoint<T> stop_gradient_point(const Tensor<T>& images) const;

  /// Number of codes not selected by any position of `indices`.
  int unused_codes(const Tensor<std::int32_t>& indices) const;

 private:
  CodecConfig cfg_;
  ad::ParameterSet<T> params_;
};

/// Loss of one image (or batch) without gradients.
template <class T>
LossBreakdown<T> vqvae_loss(const Tensor<T>& images, const VqCodec<T>& codec,
                            const Tensor<std::int32_t>* frozen_indices = nullptr);

struct VaeConfig {
  CodecConfig backbone;
  int latent_dim = 128;
  void validate() const;
};

template <class T>
class Vae {
 public:
  Vae(const VaeConfig& cfg, std::uint64_t seed);
  Vae(const VaeConfig& cfg, ad::ParameterSet<T> params);

  const VaeConfig& config() const { return cfg_; }
  ad::ParameterSet<T>& params() { return params_; }
  const ad::ParameterSet<T>& params() const { return params_; }

  struct Forward {
    ad::Var<T> mu;
    ad::Var<T> logvar;
    ad::Var<T> output;          // [N,S,S,1]
    ad::Var<T> reconstruction;  // mean L1
    ad::Var<T> kl;
    ad::Var<T> total;
  };

  /// `eps` [N, latent_dim] is the reparameterization noise; null decodes mu.
  Forward forward(ad::Graph<T>& g, const Tensor<T>& images, const Tensor<T>* eps);

  /// Posterior mean decoded: [N,S,S] (or [S,S]).
  Tensor<T> reconstruct_mean(const Tensor<T>& images) const;
  /// (mu, logvar), each [N, latent_dim].
  std::pair<Tensor<T>, Tensor<T>> encode(const Tensor<T>& images) const;

 private:
  VaeConfig cfg_;
  ad::ParameterSet<T> params_;
};

/// Reconstruction of decode(mu + sigma * eps) with eps ~ N(0, I) from `rng`,
/// plus the closed-form KL to N(0, I).
template <class T>
LossBreakdown<T> vae_loss(const Tensor<T>& images, const Vae<T>& vae, Rng& rng);

/// The same loss with the noise fixed to zero (decode of mu).
template <class T>
LossBreakdown<T> vae_loss_mean(const Tensor<T>& images, const Vae<T>& vae);

namespace detail {
/// [S,S] -> [1,S,S,1], [N,S,S] -> [N,S,S,1]; validates side and finiteness.
template <class T>
Tensor<T> as_image_batch(const Tensor<T>& images, const CodecConfig& cfg);
}  // namespace detail

}  // namespace lsr
