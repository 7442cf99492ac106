#include "lsr/train.hpp"

#include <algorithm>
#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace lsr {

std::string to_string(Stage stage) {
  switch (stage) {
    case Stage::VqVae: return "vqvae";
    case Stage::Prior: return "prior";
    case Stage::Vae: return "vae";
  }
  return "unknown";
}

Stage stage_from_string(const std::string& name) {
  if (name == "vqvae") return Stage::VqVae;
  if (name == "prior") return Stage::Prior;
  if (name == "vae") return Stage::Vae;
  throw ValueError("unknown stage '" + name + "' (expected vqvae, prior or vae)");
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ValueError("learning_rate must be > 0");
  if (!(adam_beta1 > 0.0 && adam_beta1 < 1.0) || !(adam_beta2 > 0.0 && adam_beta2 < 1.0)) {
    throw ValueError("adam betas must lie in (0, 1)");
  }
  if (!(adam_eps > 0.0)) throw ValueError("adam_eps must be > 0");
  if (batch_size < 1) throw ValueError("batch_size must be >= 1");
  if (max_steps < 0) throw ValueError("max_steps must be >= 0");
  if (checkpoint_interval < 0) throw ValueError("checkpoint_interval must be >= 0");
  if (log_interval < 1) throw ValueError("log_interval must be >= 1");
}

template <class T>
void adam_step(ad::ParameterSet<T>& params, AdamState<T>& state, const TrainConfig& cfg) {
  for (const auto& p : params.items()) {
    if (p.grad.shape() != p.value.shape()) throw ShapeError("gradient of '" + p.name + "' has the wrong shape");
    if (!all_finite(p.grad)) throw NonFiniteError("non-finite gradient in parameter '" + p.name + "'");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const T b1 = static_cast<T>(cfg.adam_beta1);
  const T b2 = static_cast<T>(cfg.adam_beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.adam_beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.adam_beta2, t));
  const T lr = static_cast<T>(cfg.learning_rate);
  const T eps = static_cast<T>(cfg.adam_eps);
  for (auto& p : params.items()) {
    auto& m = state.m[p.name];
    auto& v = state.v[p.name];
    if (m.shape() != p.value.shape()) m = Tensor<T>(p.value.shape());
    if (v.shape() != p.value.shape()) v = Tensor<T>(p.value.shape());
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const T g = p.grad[i];
      m[i] = b1 * m[i] + (T(1) - b1) * g;
      v[i] = b2 * v[i] + (T(1) - b2) * g * g;
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

template <class T>
void put_adam_state(io::NamedTensors& out, const AdamState<T>& state) {
  const auto lo = static_cast<std::int32_t>(state.step & 0x7fffffff);
  const auto hi = static_cast<std::int32_t>(state.step >> 31);
  out["adam/step"] = Tensor<std::int32_t>(Shape{2}, std::vector<std::int32_t>{lo, hi});
  for (const auto& [name, t] : state.m) out["adam/m/" + name] = t.template cast<float>();
  for (const auto& [name, t] : state.v) out["adam/v/" + name] = t.template cast<float>();
}

template <class T>
AdamState<T> take_adam_state(const io::NamedTensors& in, const ad::ParameterSet<T>& params) {
  AdamState<T> state;
  auto it = in.find("adam/step");
  if (it == in.end()) throw FormatError("checkpoint has no optimizer state");
  const auto* step = std::get_if<Tensor<std::int32_t>>(&it->second);
  if (!step || step->size() != 2) throw FormatError("malformed adam/step tensor");
  state.step = static_cast<std::int64_t>((*step)[0]) + (static_cast<std::int64_t>((*step)[1]) << 31);
  for (const auto& p : params.items()) {
    for (const char* kind : {"m", "v"}) {
      auto t = in.find(std::string("adam/") + kind + "/" + p.name);
      if (t == in.end()) {
        if (state.step == 0) continue;
        throw FormatError("checkpoint lacks optimizer moment '" + std::string(kind) + "' for '" + p.name + "'");
      }
      const auto* f = std::get_if<Tensor<float>>(&t->second);
      if (!f || f->shape() != p.value.shape()) throw FormatError("malformed optimizer moment for '" + p.name + "'");
      (kind[0] == 'm' ? state.m : state.v)[p.name] = f->template cast<T>();
    }
  }
  return state;
}

LatentCorpus encode_corpus(const VqCodec<float>& codec, const ImageCorpus& corpus, int batch) {
  if (batch < 1) throw ValueError("encode batch must be >= 1");
  const int side = codec.config().image_side;
  const int ls = codec.config().latent_side();
  const int n = static_cast<int>(corpus.size());
  LatentCorpus out;
  out.grids = LatentGrid(Shape{n, ls, ls});
  out.slice_positions = corpus.slice_positions;
  const std::size_t per = static_cast<std::size_t>(side) * side;
  for (int start = 0; start < n; start += batch) {
    const int b = std::min(batch, n - start);
    Tensor<float> images(Shape{b, side, side});
    for (int i = 0; i < b; ++i) {
      const Tensor<float>& img = corpus.images[start + i];
      if (img.size() != per) throw ShapeError("corpus image has shape " + shape_str(img.shape()));
      std::copy(img.values().begin(), img.values().end(), images.data() + i * per);
    }
    const auto q = codec.quantize(codec.encode(images));
    std::copy(q.indices.values().begin(), q.indices.values().end(),
              out.grids.data() + static_cast<std::size_t>(start) * ls * ls);
  }
  return out;
}

namespace {

struct StepLoss {
  ad::Var<float> total;
  std::map<std::string, double> terms;
};

using StepFn = std::function<StepLoss(ad::Graph<float>&, Rng&)>;

void check_resume(const TrainProgress& progress, const TrainConfig& cfg) {
  if (progress.adam.step < 0) throw ValueError("negative step count in training state");
  if (progress.adam.step > cfg.max_steps) {
    throw ValueError("checkpoint is at step " + std::to_string(progress.adam.step) + ", beyond max_steps " +
                     std::to_string(cfg.max_steps));
  }
}

void run_loop(ad::ParameterSet<float>& params, const TrainConfig& cfg, std::uint64_t seed, Stage stage,
              TrainProgress& progress, const CheckpointFn& checkpoint, const StepFn& step_fn) {
  cfg.validate();
  check_resume(progress, cfg);
  const std::string purpose = "train." + to_string(stage);
  for (int step = static_cast<int>(progress.adam.step); step < cfg.max_steps; ++step) {
    Rng rng(seed, purpose, {static_cast<std::uint64_t>(step)});
    ad::Graph<float> g(true, &rng);
    StepLoss loss = step_fn(g, rng);
    const double total = static_cast<double>(loss.total.value()[0]);
    if (!std::isfinite(total)) {
      throw DivergenceError(to_string(stage) + " loss became non-finite at step " + std::to_string(step));
    }
    params.zero_grad();
    g.backward(loss.total);
    try {
      adam_step(params, progress.adam, cfg);
    } catch (const NonFiniteError& e) {
      throw DivergenceError(to_string(stage) + " diverged at step " + std::to_string(step) + ": " + e.what());
    }
    const int done = step + 1;
    if (step == 0 || done % cfg.log_interval == 0 || done == cfg.max_steps) {
      progress.curve.push_back(LossRecord{done, std::move(loss.terms)});
    }
    const bool last = done == cfg.max_steps;
    if (checkpoint && (last || (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0))) {
      checkpoint(done, progress);
    }
  }
}

Tensor<float> image_batch(const ImageCorpus& corpus, int batch, Rng& rng, const AugmentConfig& augment,
                          std::vector<double>* positions = nullptr) {
  if (corpus.size() == 0) throw ValueError("training corpus is empty");
  const int side = corpus.images.front().dim(0);
  const std::size_t per = static_cast<std::size_t>(side) * side;
  Tensor<float> out(Shape{batch, side, side}, uninitialized);
  const bool aug = augment.any();
  for (int b = 0; b < batch; ++b) {
    const auto idx = static_cast<std::size_t>(rng.uniform_int(corpus.size()));
    if (positions) positions->push_back(corpus.slice_positions[idx]);
    const Tensor<float>& src = corpus.images[idx];
    if (src.size() != per) throw ShapeError("corpus images must share one shape");
    if (aug) {
      const Tensor<float> a = lsr::augment(src, rng, augment);
      std::copy(a.values().begin(), a.values().end(), out.data() + b * per);
    } else {
      std::copy(src.values().begin(), src.values().end(), out.data() + b * per);
    }
  }
  return out;
}

}  // namespace

void train_vqvae(VqCodec<float>& codec, const ImageCorpus& corpus, const TrainConfig& cfg,
                 const AugmentConfig& augment, std::uint64_t seed, TrainProgress& progress,
                 const CheckpointFn& checkpoint) {
  augment.validate();
  const int k = codec.config().num_codes;
  const int steps_per_epoch = std::max(1, static_cast<int>(corpus.size()) / cfg.batch_size);
  auto& seen = progress.epoch_codes_seen;
  if (seen.size() != static_cast<std::size_t>(k)) seen.assign(static_cast<std::size_t>(k), 0);
  run_loop(codec.params(), cfg, seed, Stage::VqVae, progress, checkpoint, [&](ad::Graph<float>& g, Rng& rng) {
    const Tensor<float> batch = image_batch(corpus, cfg.batch_size, rng, augment);
    auto f = codec.forward(g, batch);
    for (std::int32_t idx : f.indices.values()) seen[static_cast<std::size_t>(idx)] = 1;
    const int done = static_cast<int>(progress.adam.step) + 1;
    if (done % steps_per_epoch == 0) {
      progress.unused_codes.push_back(static_cast<int>(std::count(seen.begin(), seen.end(), 0)));
      std::fill(seen.begin(), seen.end(), 0);
    }
    StepLoss out{f.total, {}};
    out.terms["total"] = f.total.value()[0];
    out.terms["reconstruction"] = f.reconstruction.value()[0];
    out.terms["codebook"] = f.codebook_term.value()[0];
    out.terms["commitment"] = f.commitment_term.value()[0];
    return out;
  });
}

void train_prior(ArPrior<float>& prior, const LatentCorpus& corpus, const TrainConfig& cfg, std::uint64_t seed,
                 TrainProgress& progress, const CheckpointFn& checkpoint) {
  if (corpus.size() == 0) throw ValueError("latent corpus is empty");
  if (corpus.grids.rank() != 3 || static_cast<std::size_t>(corpus.grids.dim(0)) != corpus.size()) {
    throw ShapeError("latent corpus grids must be [N,h,w] with one slice position per grid");
  }
  const int h = corpus.grids.dim(1);
  const int w = corpus.grids.dim(2);
  const std::size_t per = static_cast<std::size_t>(h) * w;
  run_loop(prior.params(), cfg, seed, Stage::Prior, progress, checkpoint, [&](ad::Graph<float>& g, Rng& rng) {
    LatentGrid batch(Shape{cfg.batch_size, h, w}, uninitialized);
    std::vector<double> ctx;
    ctx.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      const auto idx = static_cast<std::size_t>(rng.uniform_int(corpus.size()));
      std::copy(corpus.grids.data() + idx * per, corpus.grids.data() + (idx + 1) * per, batch.data() + b * per);
      ctx.push_back(corpus.slice_positions[idx]);
    }
    auto f = prior.forward(g, batch, ctx);
    StepLoss out{f.loss, {}};
    out.terms["nll"] = f.loss.value()[0];
    return out;
  });
}

void train_vae(Vae<float>& vae, const ImageCorpus& corpus, const TrainConfig& cfg, const AugmentConfig& augment,
               std::uint64_t seed, TrainProgress& progress, const CheckpointFn& checkpoint) {
  augment.validate();
  const int latent = vae.config().latent_dim;
  run_loop(vae.params(), cfg, seed, Stage::Vae, progress, checkpoint, [&](ad::Graph<float>& g, Rng& rng) {
    const Tensor<float> batch = image_batch(corpus, cfg.batch_size, rng, augment);
    Tensor<float> eps(Shape{cfg.batch_size, latent}, uninitialized);
    for (float& v : eps.values()) v = static_cast<float>(rng.normal());
    auto f = vae.forward(g, batch, &eps);
    StepLoss out{f.total, {}};
    out.terms["total"] = f.total.value()[0];
    out.terms["reconstruction"] = f.reconstruction.value()[0];
    out.terms["kl"] = f.kl.value()[0];
    return out;
  });
}

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1024 * 1024 * 1024);
  mallopt(M_TOP_PAD, 64 * 1024 * 1024);
#endif
}

template void adam_step(ad::ParameterSet<float>&, AdamState<float>&, const TrainConfig&);
template void adam_step(ad::ParameterSet<double>&, AdamState<double>&, const TrainConfig&);
template void put_adam_state(io::NamedTensors&, const AdamState<float>&);
template void put_adam_state(io::NamedTensors&, const AdamState<double>&);
template AdamState<float> take_adam_state(const io::NamedTensors&, const ad::ParameterSet<float>&);
template AdamState<double> take_adam_state(const io::NamedTensors&, const ad::ParameterSet<double>&);

}  // namespace lsr
