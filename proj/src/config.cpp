#include "lsr/config.hpp"

#include <fstream>
#include <set>

namespace lsr {

using nlohmann::json;

namespace {

// Reads the members of one JSON object, remembering which keys were used so
// that leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw SchemaError(where() + " must be a JSON object");
  }

  void get(const char* key, int& out) { read(key, out, [](const json& v) { return v.is_number_integer(); }, "an integer"); }
  void get(const char* key, std::uint64_t& out) {
    read(key, out, [](const json& v) { return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0); },
         "a non-negative integer");
  }
  void get(const char* key, double& out) { read(key, out, [](const json& v) { return v.is_number(); }, "a number"); }
  void get(const char* key, bool& out) { read(key, out, [](const json& v) { return v.is_boolean(); }, "a boolean"); }

  /// Sub-object accessor; returns nullptr when absent.
  const json* object(const char* key) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    return &*it;
  }
  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw SchemaError("unknown key '" + child(it.key().c_str()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

  template <class V, class Pred>
  void read(const char* key, V& out, Pred ok, const char* expected) {
    used_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (!ok(*it)) throw SchemaError("'" + child(key) + "' must be " + expected);
    out = it->template get<V>();
  }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

json train_to_json(const TrainConfig& t) {
  return json{{"learning_rate", t.learning_rate}, {"adam_beta1", t.adam_beta1},     {"adam_beta2", t.adam_beta2},
              {"adam_eps", t.adam_eps},           {"batch_size", t.batch_size},     {"max_steps", t.max_steps},
              {"checkpoint_interval", t.checkpoint_interval}, {"log_interval", t.log_interval}};
}

void train_from_json(Section s, TrainConfig& t) {
  s.get("learning_rate", t.learning_rate);
  s.get("adam_beta1", t.adam_beta1);
  s.get("adam_beta2", t.adam_beta2);
  s.get("adam_eps", t.adam_eps);
  s.get("batch_size", t.batch_size);
  s.get("max_steps", t.max_steps);
  s.get("checkpoint_interval", t.checkpoint_interval);
  s.get("log_interval", t.log_interval);
  s.finish();
}

json augment_to_json(const AugmentConfig& a) {
  return json{{"p_affine", a.p_affine},
              {"p_blur", a.p_blur},
              {"p_brightness", a.p_brightness},
              {"p_contrast", a.p_contrast},
              {"p_noise", a.p_noise},
              {"p_elastic", a.p_elastic},
              {"max_rotation_deg", a.max_rotation_deg},
              {"scale_min", a.scale_min},
              {"scale_max", a.scale_max},
              {"blur_sigma_max", a.blur_sigma_max},
              {"brightness", a.brightness},
              {"contrast_min", a.contrast_min},
              {"contrast_max", a.contrast_max},
              {"noise_sigma", a.noise_sigma},
              {"elastic_max_px", a.elastic_max_px}};
}

void augment_from_json(Section s, AugmentConfig& a) {
  s.get("p_affine", a.p_affine);
  s.get("p_blur", a.p_blur);
  s.get("p_brightness", a.p_brightness);
  s.get("p_contrast", a.p_contrast);
  s.get("p_noise", a.p_noise);
  s.get("p_elastic", a.p_elastic);
  s.get("max_rotation_deg", a.max_rotation_deg);
  s.get("scale_min", a.scale_min);
  s.get("scale_max", a.scale_max);
  s.get("blur_sigma_max", a.blur_sigma_max);
  s.get("brightness", a.brightness);
  s.get("contrast_min", a.contrast_min);
  s.get("contrast_max", a.contrast_max);
  s.get("noise_sigma", a.noise_sigma);
  s.get("elastic_max_px", a.elastic_max_px);
  s.finish();
}

}  // namespace

void DataConfig::validate(const CodecConfig& codec) const {
  if (side != codec.image_side) {
    throw DimensionError("data.side (" + std::to_string(side) + ") must equal codec.image_side (" +
                         std::to_string(codec.image_side) + ")");
  }
  if (side % codec.downsample_factor() != 0) {
    throw DimensionError("data.side " + std::to_string(side) + " is not divisible by 2^blocks = " +
                         std::to_string(codec.downsample_factor()) + "; use a multiple such as " +
                         std::to_string((side / codec.downsample_factor() + 1) * codec.downsample_factor()));
  }
  if (slices < 2) throw ValueError("data.slices must be >= 2");
  if (train_subjects < 1) throw ValueError("data.train_subjects must be >= 1");
  if (val_subjects < 0 || val_clean_subjects < 0 || val_clean_subjects > val_subjects) {
    throw ValueError("data.val_clean_subjects must lie in [0, val_subjects]");
  }
  anomaly.validate(side, slices);
}

const TrainConfig& StageTrainConfigs::get(Stage stage) const {
  switch (stage) {
    case Stage::VqVae: return vqvae;
    case Stage::Prior: return prior;
    case Stage::Vae: return vae;
  }
  return vqvae;
}

RunConfig RunConfig::defaults() { return RunConfig{}; }

PriorConfig RunConfig::prior_config() const {
  PriorConfig p = prior;
  p.num_codes = codec.num_codes;
  return p;
}

void RunConfig::validate() const {
  codec.validate();
  data.validate(codec);
  vae_config().validate();
  prior_config().validate();
  scoring.validate();
  if (!(calibration.percentile_s >= 0.0 && calibration.percentile_s <= 100.0) ||
      !(calibration.percentile_p >= 0.0 && calibration.percentile_p <= 100.0)) {
    throw ValueError("calibration percentiles must lie in [0, 100]");
  }
  train.vqvae.validate();
  train.prior.validate();
  train.vae.validate();
  train.augment.validate();
  for (double d : {eval.probe_low_delta, eval.probe_high_delta}) {
    if (!(d > 0.0)) throw ValueError("probe deltas must be > 0");
  }
}

json RunConfig::to_json() const {
  json j;
  j["schema_version"] = kSchemaVersion;
  j["seed"] = seed;
  const auto& a = data.anomaly;
  j["data"] = json{{"side", data.side},
                   {"slices", data.slices},
                   {"train_subjects", data.train_subjects},
                   {"val_subjects", data.val_subjects},
                   {"val_clean_subjects", data.val_clean_subjects},
                   {"anomaly", json{{"radius_min", a.radius_min},
                                    {"radius_max", a.radius_max},
                                    {"delta_min", a.delta_min},
                                    {"delta_max", a.delta_max},
                                    {"span_min", a.span_min},
                                    {"span_max", a.span_max},
                                    {"clamp_min", a.clamp_min},
                                    {"clamp_max", a.clamp_max}}}};
  j["codec"] = json{{"image_side", codec.image_side},   {"blocks", codec.blocks},
                    {"residual_blocks", codec.residual_blocks}, {"channels", codec.channels},
                    {"embedding_dim", codec.embedding_dim}, {"num_codes", codec.num_codes},
                    {"dropout", codec.dropout},         {"beta", codec.beta},
                    {"vae_latent_dim", vae_latent_dim}};
  j["prior"] = json{{"channels", prior.channels},
                    {"blocks", prior.blocks},
                    {"residual_blocks", prior.residual_blocks},
                    {"dropout", prior.dropout}};
  j["scoring"] = json{{"lambda_s", scoring.lambda_s},
                      {"lambda_p", scoring.lambda_p},
                      {"restorations", scoring.restorations},
                      {"k_temp", scoring.k_temp},
                      {"eps_denom", scoring.eps_denom},
                      {"temperature", scoring.temperature},
                      {"calibrate", calibration.enabled},
                      {"percentile_s", calibration.percentile_s},
                      {"percentile_p", calibration.percentile_p}};
  j["train"] = json{{"vqvae", train_to_json(train.vqvae)},
                    {"prior", train_to_json(train.prior)},
                    {"vae", train_to_json(train.vae)},
                    {"augment", augment_to_json(train.augment)}};
  j["eval"] = json{{"probe_low_delta", eval.probe_low_delta},
                   {"probe_high_delta", eval.probe_high_delta},
                   {"probes", eval.probes}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  int version = kSchemaVersion;
  root.get("schema_version", version);
  if (version != kSchemaVersion) {
    throw SchemaError("unsupported schema_version " + std::to_string(version) + " (expected " +
                      std::to_string(kSchemaVersion) + ")");
  }
  root.get("seed", c.seed);
  if (const json* d = root.object("data")) {
    Section s(*d, "data");
    s.get("side", c.data.side);
    s.get("slices", c.data.slices);
    s.get("train_subjects", c.data.train_subjects);
    s.get("val_subjects", c.data.val_subjects);
    s.get("val_clean_subjects", c.data.val_clean_subjects);
    if (const json* an = s.object("anomaly")) {
      Section a(*an, "data.anomaly");
      a.get("radius_min", c.data.anomaly.radius_min);
      a.get("radius_max", c.data.anomaly.radius_max);
      a.get("delta_min", c.data.anomaly.delta_min);
      a.get("delta_max", c.data.anomaly.delta_max);
      a.get("span_min", c.data.anomaly.span_min);
      a.get("span_max", c.data.anomaly.span_max);
      a.get("clamp_min", c.data.anomaly.clamp_min);
      a.get("clamp_max", c.data.anomaly.clamp_max);
      a.finish();
    }
    s.finish();
  }
  if (const json* d = root.object("codec")) {
    Section s(*d, "codec");
    s.get("image_side", c.codec.image_side);
    s.get("blocks", c.codec.blocks);
    s.get("residual_blocks", c.codec.residual_blocks);
    s.get("channels", c.codec.channels);
    s.get("embedding_dim", c.codec.embedding_dim);
    s.get("num_codes", c.codec.num_codes);
    s.get("dropout", c.codec.dropout);
    s.get("beta", c.codec.beta);
    s.get("vae_latent_dim", c.vae_latent_dim);
    s.finish();
  }
  if (const json* d = root.object("prior")) {
    Section s(*d, "prior");
    s.get("channels", c.prior.channels);
    s.get("blocks", c.prior.blocks);
    s.get("residual_blocks", c.prior.residual_blocks);
    s.get("dropout", c.prior.dropout);
    s.finish();
  }
  if (const json* d = root.object("scoring")) {
    Section s(*d, "scoring");
    s.get("lambda_s", c.scoring.lambda_s);
    s.get("lambda_p", c.scoring.lambda_p);
    s.get("restorations", c.scoring.restorations);
    s.get("k_temp", c.scoring.k_temp);
    s.get("eps_denom", c.scoring.eps_denom);
    s.get("temperature", c.scoring.temperature);
    s.get("calibrate", c.calibration.enabled);
    s.get("percentile_s", c.calibration.percentile_s);
    s.get("percentile_p", c.calibration.percentile_p);
    s.finish();
  }
  if (const json* d = root.object("train")) {
    Section s(*d, "train");
    if (const json* t = s.object("vqvae")) train_from_json(Section(*t, "train.vqvae"), c.train.vqvae);
    if (const json* t = s.object("prior")) train_from_json(Section(*t, "train.prior"), c.train.prior);
    if (const json* t = s.object("vae")) train_from_json(Section(*t, "train.vae"), c.train.vae);
    if (const json* t = s.object("augment")) augment_from_json(Section(*t, "train.augment"), c.train.augment);
    s.finish();
  }
  if (const json* d = root.object("eval")) {
    Section s(*d, "eval");
    s.get("probe_low_delta", c.eval.probe_low_delta);
    s.get("probe_high_delta", c.eval.probe_high_delta);
    s.get("probes", c.eval.probes);
    s.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return from_json(read_json(path)); }

std::string RunConfig::hash() const { return json_hash(to_json()); }

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw SchemaError("'" + path.string() + "' is not valid JSON: " + e.what());
  }
}

void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

std::string json_hash(const json& j) {
  const std::string s = j.dump();
  return hex64(fnv1a(s.data(), s.size()));
}

}  // namespace lsr
