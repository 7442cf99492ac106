#pragma once

// Adam and the stage training loops (VQ-VAE, AR prior, VAE baseline).

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lsr/codec.hpp"
#include "lsr/data.hpp"
#include "lsr/io.hpp"
#include "lsr/prior.hpp"

namespace lsr {

enum class Stage { VqVae, Prior, Vae };

std::string to_string(Stage stage);
Stage stage_from_string(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch_size = 16;
  int max_steps = 5000;
  int checkpoint_interval = 1000;  // 0 disables intermediate checkpoints
  int log_interval = 50;
  void validate() const;
};

/// First/second moment estimates per parameter plus the step count.
template <class T>
struct AdamState {
  std::int64_t step = 0;
  std::map<std::string, Tensor<T>> m;
  std::map<std::string, Tensor<T>> v;
};

/// One bias-corrected Adam update using the gradients stored in `params`.
/// Throws NonFiniteError (before touching anything) if a gradient is not finite.
template <class T>
void adam_step(ad::ParameterSet<T>& params, AdamState<T>& state, const TrainConfig& cfg);

template <class T>
void put_adam_state(io::NamedTensors& out, const AdamState<T>& state);
template <class T>
AdamState<T> take_adam_state(const io::NamedTensors& in, const ad::ParameterSet<T>& params);

/// One logged point of a loss curve.
struct LossRecord {
  int step = 0;
  std::map<std::string, double> terms;
};

struct TrainProgress {
  AdamState<float> adam;
  std::vector<LossRecord> curve;
  std::vector<int> unused_codes;        // VQ-VAE only: unused codes per epoch
  std::vector<int> epoch_codes_seen;    // VQ-VAE only: codes used so far in the current epoch
};

/// Called after `step` completed steps whenever a checkpoint is due and at the end.
using CheckpointFn = std::function<void(int step, const TrainProgress& progress)>;

struct ImageCorpus {
  std::vector<Tensor<float>> images;  // each [side, side]
  std::vector<double> slice_positions;
  std::size_t size() const { return images.size(); }
};

struct LatentCorpus {
  LatentGrid grids;  // [N, h, w]
  std::vector<double> slice_positions;
  std::size_t size() const { return slice_positions.size(); }
};

/// Encode every image with the frozen codec (batched; inference mode).
LatentCorpus encode_corpus(const VqCodec<float>& codec, const ImageCorpus& corpus, int batch = 64);

/// The three stage loops. Each continues from `progress` (fresh or resumed)
/// until cfg.max_steps. Step s draws its batch, augmentation and dropout
/// masks from streams derived from (seed, stage, s), so a resumed run
/// reproduces the uninterrupted one bit for bit.
void train_vqvae(VqCodec<float>& codec, const ImageCorpus& corpus, const TrainConfig& cfg,
                 const AugmentConfig& augment, std::uint64_t seed, TrainProgress& progress,
                 const CheckpointFn& checkpoint = {});
void train_prior(ArPrior<float>& prior, const LatentCorpus& corpus, const TrainConfig& cfg, std::uint64_t seed,
                 TrainProgress& progress, const CheckpointFn& checkpoint = {});
void train_vae(Vae<float>& vae, const ImageCorpus& corpus, const TrainConfig& cfg, const AugmentConfig& augment,
               std::uint64_t seed, TrainProgress& progress, const CheckpointFn& checkpoint = {});

/// Keep large freed buffers in the heap between training steps (glibc only;
/// no-op elsewhere).
void tune_allocator();

}  // namespace lsr
