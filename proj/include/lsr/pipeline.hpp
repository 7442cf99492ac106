#pragma once

// File-level workflow: generate -> train (vqvae, prior, vae) -> calibrate ->
// score -> evaluate. Every command reads and writes inside one run
// directory:
//
//   <run>/data/manifest.json, <run>/data/<split>/...      corpus
//   <run>/models/<stage>.lsrc + .json + _loss.json        checkpoints
//   <run>/models/latents_train.lsrt + .json               cached latent grids
//   <run>/thresholds.json                                 calibrated lambdas
//   <run>/scores/scores.json, <run>/scores/maps/...       score reports
//   <run>/report.json                                     evaluation report
//
// Every JSON output carries schema_version, the full config hash and an
// artifact hash covering the config sections it depends on (chained through
// its inputs). Inputs whose artifact hash does not match the current config
// are rejected as stale.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "lsr/config.hpp"

namespace lsr {

namespace fs = std::filesystem;

struct RunOptions {
  bool deterministic = true;
  int threads = 1;            // scoring only; training is always sequential
  bool resume = true;         // continue training from a matching checkpoint
  std::ostream* log = nullptr;
};

struct RunLayout {
  fs::path root;
  explicit RunLayout(fs::path r) : root(std::move(r)) {}
  fs::path data() const { return root / "data"; }
  fs::path manifest() const { return data() / "manifest.json"; }
  fs::path models() const { return root / "models"; }
  fs::path checkpoint(Stage s) const { return models() / (to_string(s) + ".lsrc"); }
  fs::path sidecar(Stage s) const { return models() / (to_string(s) + ".json"); }
  fs::path loss_curve(Stage s) const { return models() / (to_string(s) + "_loss.json"); }
  fs::path latent_cache() const { return models() / "latents_train.lsrt"; }
  fs::path latent_cache_meta() const { return models() / "latents_train.json"; }
  fs::path thresholds() const { return root / "thresholds.json"; }
  fs::path scores() const { return root / "scores"; }
  fs::path score_report() const { return scores() / "scores.json"; }
  fs::path report() const { return root / "report.json"; }
};

/// One slice of the on-disk corpus.
struct SliceEntry {
  std::string split;  // train | val | probe_low | probe_high
  std::int64_t subject_id = 0;
  int index = 0;
  std::uint64_t uid = 0;  // unique per manifest; seeds per-image randomness
  double slice_position = 0.0;
  fs::path image;         // relative to the data directory
  fs::path mask;          // empty for training slices
  bool anomalous = false;
};

struct Dataset {
  fs::path dir;
  nlohmann::json manifest;
  std::vector<SliceEntry> slices;

  static Dataset load(const fs::path& data_dir);
  std::vector<const SliceEntry*> split(const std::string& name) const;
  Tensor<float> image(const SliceEntry& e) const;
  Tensor<std::int32_t> mask(const SliceEntry& e) const;
  ImageCorpus corpus(const std::string& split) const;
  std::string hash() const;  // hash of the manifest document
};

nlohmann::json cmd_generate(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts = {});
nlohmann::json cmd_train(const RunConfig& cfg, Stage stage, const fs::path& run_dir, const RunOptions& opts = {});
nlohmann::json cmd_calibrate(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts = {});
nlohmann::json cmd_score(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts = {});
nlohmann::json cmd_evaluate(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts = {});

/// All of the above in order; returns the evaluation report.
nlohmann::json run_pipeline(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts = {});

/// Trained models of a run directory, validated against the config hash.
VqCodec<float> load_codec(const RunConfig& cfg, const fs::path& run_dir);
ArPrior<float> load_prior(const RunConfig& cfg, const fs::path& run_dir);
Vae<float> load_vae(const RunConfig& cfg, const fs::path& run_dir);

/// Thresholds in effect for scoring: calibrated file when present, else config.
struct Thresholds {
  double lambda_s = 7.0;
  double lambda_p = 5.0;
  std::string source = "config";
};
Thresholds load_thresholds(const RunConfig& cfg, const fs::path& run_dir);

/// Percentile thresholds over a pooled NLL population.
Thresholds calibrate_thresholds(const std::vector<double>& nll_population, double percentile_s, double percentile_p);

}  // namespace lsr
