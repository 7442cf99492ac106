#pragma once

// Run configuration: one JSON document with data / codec / prior / scoring /
// train / eval sections. Missing fields take their defaults; unknown keys
// and wrongly typed values are rejected with SchemaError.

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "lsr/codec.hpp"
#include "lsr/data.hpp"
#include "lsr/prior.hpp"
#include "lsr/scoring.hpp"
#include "lsr/train.hpp"

namespace lsr {

inline constexpr int kSchemaVersion = 1;

struct DataConfig {
  int side = 32;
  int slices = 16;
  int train_subjects = 64;
  int val_subjects = 8;
  int val_clean_subjects = 2;
  AnomalyRanges anomaly;
  void validate(const CodecConfig& codec) const;
};

struct CalibrationConfig {
  bool enabled = true;
  double percentile_s = 98.0;
  double percentile_p = 90.0;
};

struct EvalConfig {
  double probe_low_delta = 0.5;
  double probe_high_delta = 2.0;
  bool probes = true;  // generate and score the fixed-contrast probe splits
};

struct StageTrainConfigs {
  TrainConfig vqvae;
  TrainConfig prior;
  TrainConfig vae;
  AugmentConfig augment;
  const TrainConfig& get(Stage stage) const;
};

struct RunConfig {
  std::uint64_t seed = 20200901;
  DataConfig data;
  CodecConfig codec;
  int vae_latent_dim = 128;
  PriorConfig prior;
  ScoringConfig scoring;
  CalibrationConfig calibration;
  StageTrainConfigs train;
  EvalConfig eval;

  /// Desk-scale defaults.
  static RunConfig defaults();

  void validate() const;
  VaeConfig vae_config() const { return VaeConfig{codec, vae_latent_dim}; }
  /// Prior settings with the code count taken from the codec.
  PriorConfig prior_config() const;

  nlohmann::json to_json() const;
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);

  /// Stable hash of the canonical JSON serialization.
  std::string hash() const;
};

/// Parse a JSON file; IoError when unreadable, SchemaError when malformed.
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);

/// Hex FNV-1a of the canonical dump of a JSON value.
std::string json_hash(const nlohmann::json& j);

}  // namespace lsr
