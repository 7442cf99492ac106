#include <gtest/gtest.h>

#include <cmath>

#include "lsr/train.hpp"
#include "oracles.hpp"

namespace lsr {
namespace {

CodecConfig tiny_codec() {
  CodecConfig c;
  c.image_side = 16;
  c.blocks = 2;
  c.residual_blocks = 1;
  c.channels = 4;
  c.embedding_dim = 8;
  c.num_codes = 8;
  return c;
}

PriorConfig tiny_prior() {
  PriorConfig c;
  c.num_codes = 8;
  c.channels = 8;
  c.blocks = 1;
  c.residual_blocks = 1;
  return c;
}

ImageCorpus tiny_images(int n) {
  ImageCorpus corpus;
  const PseudoVolume v = normalize(generate_volume(3, 0, n, 16));
  for (int i = 0; i < n; ++i) {
    corpus.images.push_back(v.slice(i).cast<float>());
    corpus.slice_positions.push_back(v.slice_positions[i]);
  }
  return corpus;
}

TrainConfig short_run(int steps) {
  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 2;
  tc.max_steps = steps;
  tc.checkpoint_interval = 0;
  tc.log_interval = 1;
  return tc;
}

AugmentConfig some_augmentation() {
  AugmentConfig a;
  a.p_noise = 0.5;
  a.p_affine = 0.5;
  return a;
}

ad::ParameterSet<double> single_param(std::vector<double> value, std::vector<double> grad) {
  ad::ParameterSet<double> p;
  const Shape s{static_cast<int>(value.size())};
  auto& q = p.add("w", Tensor<double>(s, std::move(value)));
  q.grad = Tensor<double>(s, std::move(grad));
  return p;
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  auto p = single_param({1.0, -2.0, 3.0}, {0.0, 0.0, 0.0});
  AdamState<double> state;
  adam_step(p, state, TrainConfig{});
  EXPECT_EQ(state.step, 1);
  EXPECT_EQ(p.get("w").value, Tensor<double>(Shape{3}, {1.0, -2.0, 3.0}));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  TrainConfig cfg;
  cfg.learning_rate = 0.01;
  auto p = single_param({1.0, -2.0, 3.0, 0.5}, {0.3, -4.0, 1e-3, 0.0});
  AdamState<double> state;
  adam_step(p, state, cfg);
  // After one step mhat = g and vhat = g^2, so the update is lr * g / (|g| + eps).
  const std::vector<double> g{0.3, -4.0, 1e-3, 0.0};
  const std::vector<double> x{1.0, -2.0, 3.0, 0.5};
  for (int i = 0; i < 4; ++i) {
    const double expected = x[i] - cfg.learning_rate * g[i] / (std::abs(g[i]) + cfg.adam_eps);
    EXPECT_NEAR(p.get("w").value[i], expected, 1e-15);
  }
  EXPECT_NEAR(p.get("w").value[0], 1.0 - 0.01, 1e-9);
  EXPECT_NEAR(p.get("w").value[1], -2.0 + 0.01, 1e-9);
}

TEST(Adam, SecondStepMatchesClosedForm) {
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  auto p = single_param({0.0}, {1.0});
  AdamState<double> state;
  adam_step(p, state, cfg);
  p.get("w").grad[0] = -2.0;
  adam_step(p, state, cfg);
  const double m = 0.9 * 0.1 * 1.0 + 0.1 * -2.0;
  const double v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0;
  const double mhat = m / (1 - 0.81), vhat = v / (1 - 0.999 * 0.999);
  const double first = -0.1 * 1.0 / (1.0 + 1e-8);
  EXPECT_NEAR(p.get("w").value[0], first - 0.1 * mhat / (std::sqrt(vhat) + 1e-8), 1e-12);
}

TEST(Adam, NonFiniteGradientAbortsBeforeUpdating) {
  auto p = single_param({1.0, 2.0}, {0.5, NAN});
  AdamState<double> state;
  EXPECT_THROW(adam_step(p, state, TrainConfig{}), NonFiniteError);
  EXPECT_EQ(state.step, 0);
  EXPECT_EQ(p.get("w").value, Tensor<double>(Shape{2}, {1.0, 2.0}));
}

TEST(Adam, StateRoundTripsThroughCheckpointTensors) {
  ad::ParameterSet<float> p;
  p.add("a", Tensor<float>(Shape{2, 2}, 1.0f)).grad = Tensor<float>(Shape{2, 2}, {0.1f, -0.2f, 0.3f, 0.0f});
  p.add("b", Tensor<float>(Shape{3}, 0.5f)).grad = Tensor<float>(Shape{3}, {1.0f, 2.0f, -3.0f});
  AdamState<float> state;
  adam_step(p, state, TrainConfig{});
  adam_step(p, state, TrainConfig{});
  io::NamedTensors tensors;
  put_adam_state(tensors, state);
  const auto dir = oracle::scratch_dir("adam_state");
  io::write_checkpoint(dir / "a.lsrc", tensors);
  const AdamState<float> back = take_adam_state(io::read_checkpoint(dir / "a.lsrc"), p);
  EXPECT_EQ(back.step, 2);
  EXPECT_EQ(back.m, state.m);
  EXPECT_EQ(back.v, state.v);
}

TEST(TrainConfig, RejectsInvalidValues) {
  TrainConfig c;
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ValueError);
  c = TrainConfig{};
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), ValueError);
  c = TrainConfig{};
  c.adam_beta1 = 1.0;
  EXPECT_THROW(c.validate(), ValueError);
}

TEST(TrainVqVae, IdenticalRunsAreBitwiseEqual) {
  const ImageCorpus corpus = tiny_images(4);
  VqCodec<float> a(tiny_codec(), 1), b(tiny_codec(), 1);
  TrainProgress pa, pb;
  train_vqvae(a, corpus, short_run(6), some_augmentation(), 9, pa);
  train_vqvae(b, corpus, short_run(6), some_augmentation(), 9, pb);
  for (std::size_t i = 0; i < a.params().items().size(); ++i) {
    ASSERT_EQ(a.params().items()[i].value, b.params().items()[i].value);
  }
  ASSERT_EQ(pa.curve.size(), pb.curve.size());
  for (std::size_t i = 0; i < pa.curve.size(); ++i) EXPECT_EQ(pa.curve[i].terms, pb.curve[i].terms);
}

TEST(TrainVqVae, ResumeReproducesUninterruptedRun) {
  const ImageCorpus corpus = tiny_images(4);
  const auto dir = oracle::scratch_dir("resume_vqvae");
  VqCodec<float> full(tiny_codec(), 1);
  TrainProgress full_progress;
  train_vqvae(full, corpus, short_run(8), some_augmentation(), 4, full_progress);

  // Interrupted run: stop after 3 steps, persist, reload into fresh objects.
  VqCodec<float> first(tiny_codec(), 1);
  TrainProgress first_progress;
  train_vqvae(first, corpus, short_run(3), some_augmentation(), 4, first_progress);
  io::NamedTensors saved;
  io::put_parameters(saved, first.params(), "model/");
  put_adam_state(saved, first_progress.adam);
  io::write_checkpoint(dir / "ckpt.lsrc", saved);

  const io::NamedTensors loaded = io::read_checkpoint(dir / "ckpt.lsrc");
  std::vector<std::string> names;
  for (const auto& p : first.params().items()) names.push_back(p.name);
  VqCodec<float> resumed(tiny_codec(), io::take_parameters<float>(loaded, names, "model/"));
  TrainProgress resumed_progress;
  resumed_progress.adam = take_adam_state(loaded, resumed.params());
  train_vqvae(resumed, corpus, short_run(8), some_augmentation(), 4, resumed_progress);

  for (std::size_t i = 0; i < full.params().items().size(); ++i) {
    ASSERT_EQ(full.params().items()[i].value, resumed.params().items()[i].value)
        << full.params().items()[i].name;
  }
}

TEST(TrainVqVae, LossDecreasesAndCurveIsFinite) {
  const ImageCorpus corpus = tiny_images(4);
  VqCodec<float> codec(tiny_codec(), 2);
  TrainProgress progress;
  train_vqvae(codec, corpus, short_run(150), AugmentConfig{}, 3, progress);
  ASSERT_EQ(progress.curve.size(), 150u);
  for (const auto& r : progress.curve) {
    for (const auto& [k, v] : r.terms) ASSERT_TRUE(std::isfinite(v)) << k;
  }
  EXPECT_LT(progress.curve.back().terms.at("reconstruction"), progress.curve.front().terms.at("reconstruction"));
}

TEST(TrainVqVae, CheckpointCallbackFiresOnSchedule) {
  const ImageCorpus corpus = tiny_images(4);
  VqCodec<float> codec(tiny_codec(), 2);
  TrainProgress progress;
  TrainConfig tc = short_run(7);
  tc.checkpoint_interval = 3;
  std::vector<int> steps;
  train_vqvae(codec, corpus, tc, AugmentConfig{}, 3, progress, [&](int s, const TrainProgress&) { steps.push_back(s); });
  EXPECT_EQ(steps, (std::vector<int>{3, 6, 7}));
}

TEST(TrainVqVae, RejectsCheckpointBeyondBudget) {
  const ImageCorpus corpus = tiny_images(4);
  VqCodec<float> codec(tiny_codec(), 2);
  TrainProgress progress;
  progress.adam.step = 10;
  EXPECT_THROW(train_vqvae(codec, corpus, short_run(5), AugmentConfig{}, 3, progress), ValueError);
}

TEST(TrainPrior, ResumeReproducesUninterruptedRun) {
  std::mt19937_64 gen(1);
  LatentCorpus corpus;
  corpus.grids = LatentGrid(Shape{4, 4, 4});
  for (auto& v : corpus.grids.values()) v = static_cast<int>(gen() % 8);
  corpus.slice_positions = {-0.5, -0.1, 0.2, 0.5};
  ArPrior<float> full(tiny_prior(), 1);
  TrainProgress fp;
  train_prior(full, corpus, short_run(6), 2, fp);

  ArPrior<float> part(tiny_prior(), 1);
  TrainProgress pp;
  train_prior(part, corpus, short_run(2), 2, pp);
  train_prior(part, corpus, short_run(6), 2, pp);
  for (std::size_t i = 0; i < full.params().items().size(); ++i) {
    ASSERT_EQ(full.params().items()[i].value, part.params().items()[i].value);
  }
}

TEST(TrainVae, IdenticalRunsAreBitwiseEqual) {
  const ImageCorpus corpus = tiny_images(4);
  Vae<float> a(VaeConfig{tiny_codec(), 6}, 1), b(VaeConfig{tiny_codec(), 6}, 1);
  TrainProgress pa, pb;
  train_vae(a, corpus, short_run(5), AugmentConfig{}, 9, pa);
  train_vae(b, corpus, short_run(5), AugmentConfig{}, 9, pb);
  for (std::size_t i = 0; i < a.params().items().size(); ++i) {
    ASSERT_EQ(a.params().items()[i].value, b.params().items()[i].value);
  }
}

TEST(EncodeCorpus, MatchesPerImageQuantization) {
  const ImageCorpus corpus = tiny_images(5);
  const VqCodec<float> codec(tiny_codec(), 3);
  const LatentCorpus latents = encode_corpus(codec, corpus, 2);
  ASSERT_EQ(latents.grids.shape(), (Shape{5, 4, 4}));
  EXPECT_EQ(latents.slice_positions, corpus.slice_positions);
  for (int i = 0; i < 5; ++i) {
    const LatentGrid one = codec.quantize(codec.encode(corpus.images[i])).indices;
    for (int j = 0; j < 16; ++j) ASSERT_EQ(latents.grids[i * 16 + j], one[j]);
  }
}

TEST(Stage, NamesRoundTrip) {
  for (Stage s : {Stage::VqVae, Stage::Prior, Stage::Vae}) EXPECT_EQ(stage_from_string(to_string(s)), s);
  EXPECT_THROW(stage_from_string("gan"), ValueError);
}

}  // namespace
}  // namespace lsr
