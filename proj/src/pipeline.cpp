#include "lsr/pipeline.hpp"

#include <atomic>
#include <cstdio>
#include <exception>
#include <mutex>
#include <ostream>
#include <thread>

#include "lsr/eval.hpp"
#include "lsr/io.hpp"

namespace lsr {

using nlohmann::json;

namespace {

void log_line(const RunOptions& opts, const std::string& msg) {
  if (opts.log) *opts.log << msg << std::endl;
}

std::string slice_name(std::int64_t subject, int index) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "s%04lld_z%02d", static_cast<long long>(subject), index);
  return buf;
}

// Hash of the configuration sections an artifact depends on, chained through
// its upstream artifacts. Changing, say, the scoring section invalidates the
// score reports but not the trained models.
std::string artifact_hash(const RunConfig& cfg, const std::string& kind) {
  const json c = cfg.to_json();
  json part;
  if (kind == "data") {
    part = {{"seed", c["seed"]}, {"data", c["data"]}, {"eval", c["eval"]}};
  } else if (kind == "vqvae") {
    part = {{"up", artifact_hash(cfg, "data")}, {"codec", c["codec"]}, {"train", c["train"]["vqvae"]},
            {"augment", c["train"]["augment"]}};
  } else if (kind == "vae") {
    part = {{"up", artifact_hash(cfg, "data")}, {"codec", c["codec"]}, {"train", c["train"]["vae"]},
            {"augment", c["train"]["augment"]}};
  } else if (kind == "prior") {
    part = {{"up", artifact_hash(cfg, "vqvae")}, {"prior", c["prior"]}, {"train", c["train"]["prior"]}};
  } else if (kind == "thresholds") {
    part = {{"up", artifact_hash(cfg, "prior")},
            {"calibrate", c["scoring"]["calibrate"]},
            {"percentile_s", c["scoring"]["percentile_s"]},
            {"percentile_p", c["scoring"]["percentile_p"]}};
  } else if (kind == "scores") {
    part = {{"prior", artifact_hash(cfg, "prior")},
            {"vae", artifact_hash(cfg, "vae")},
            {"thresholds", artifact_hash(cfg, "thresholds")},
            {"scoring", c["scoring"]}};
  } else if (kind == "report") {
    part = {{"up", artifact_hash(cfg, "scores")}};
  } else {
    throw ValueError("unknown artifact kind " + kind);
  }
  part["kind"] = kind;
  return json_hash(part);
}

json stamp(const RunConfig& cfg, const std::string& kind) {
  return json{{"schema_version", kSchemaVersion},
              {"kind", kind},
              {"config_hash", cfg.hash()},
              {"artifact_hash", artifact_hash(cfg, kind)}};
}

void check_stamp(const json& j, const RunConfig& cfg, const std::string& kind, const fs::path& where) {
  if (!j.is_object() || !j.contains("schema_version") || j["schema_version"] != kSchemaVersion) {
    throw SchemaError("'" + where.string() + "' has a missing or unsupported schema_version");
  }
  if (!j.contains("artifact_hash") || j["artifact_hash"] != artifact_hash(cfg, kind)) {
    throw StaleArtifactError("'" + where.string() + "' was produced under a different configuration; rerun the " +
                             kind + " step");
  }
}

template <class F>
void atomic_write(const fs::path& path, F&& write) {
  const fs::path tmp = path.string() + ".tmp";
  write(tmp);
  fs::rename(tmp, path);
}

json curve_json(const std::vector<LossRecord>& curve) {
  json arr = json::array();
  for (const auto& r : curve) arr.push_back(json{{"step", r.step}, {"terms", r.terms}});
  return arr;
}

std::vector<LossRecord> curve_from_json(const json& arr) {
  std::vector<LossRecord> out;
  for (const auto& r : arr) out.push_back(LossRecord{r.at("step").get<int>(), r.at("terms").get<std::map<std::string, double>>()});
  return out;
}

json architecture_json(const RunConfig& cfg, Stage stage) {
  const json c = cfg.to_json();
  if (stage == Stage::Prior) return c["prior"];
  return c["codec"];
}

std::vector<std::string> param_names(const ad::ParameterSet<float>& ps) {
  std::vector<std::string> names;
  for (const auto& p : ps.items()) names.push_back(p.name);
  return names;
}

// --- checkpoints -----------------------------------------------------------

void save_stage(const RunConfig& cfg, const RunLayout& layout, Stage stage, const ad::ParameterSet<float>& params,
                const TrainProgress& progress, int step, const std::string& data_hash) {
  io::NamedTensors tensors;
  io::put_parameters(tensors, params, "model/");
  put_adam_state(tensors, progress.adam);
  if (!progress.epoch_codes_seen.empty()) {
    tensors["progress/codes_seen"] = Tensor<std::int32_t>(
        Shape{static_cast<int>(progress.epoch_codes_seen.size())},
        std::vector<std::int32_t>(progress.epoch_codes_seen.begin(), progress.epoch_codes_seen.end()));
  }
  fs::create_directories(layout.models());
  atomic_write(layout.checkpoint(stage), [&](const fs::path& p) { io::write_checkpoint(p, tensors); });

  const std::string kind = to_string(stage);
  json side = stamp(cfg, kind);
  side["seed"] = cfg.seed;
  side["step"] = step;
  side["max_steps"] = cfg.train.get(stage).max_steps;
  side["complete"] = step >= cfg.train.get(stage).max_steps;
  side["architecture"] = architecture_json(cfg, stage);
  side["train"] = cfg.to_json()["train"][kind];
  side["data_hash"] = data_hash;
  side["checkpoint_hash"] = hex64(io::file_hash(layout.checkpoint(stage)));
  side["parameters"] = params.scalar_count();
  if (stage == Stage::VqVae) side["unused_codes_per_epoch"] = progress.unused_codes;
  side["curve"] = curve_json(progress.curve);
  atomic_write(layout.sidecar(stage), [&](const fs::path& p) { write_json(p, side); });

  json curve = stamp(cfg, kind);
  curve["stage"] = kind;
  curve["curve"] = curve_json(progress.curve);
  atomic_write(layout.loss_curve(stage), [&](const fs::path& p) { write_json(p, curve); });
}

struct LoadedStage {
  json sidecar;
  io::NamedTensors tensors;
};

LoadedStage read_stage(const RunConfig& cfg, const RunLayout& layout, Stage stage) {
  const fs::path side_path = layout.sidecar(stage);
  if (!fs::exists(side_path) || !fs::exists(layout.checkpoint(stage))) {
    throw DependencyError("no " + to_string(stage) + " checkpoint in '" + layout.models().string() +
                          "'; run `train --stage " + to_string(stage) + "` first");
  }
  LoadedStage out;
  out.sidecar = read_json(side_path);
  check_stamp(out.sidecar, cfg, to_string(stage), side_path);
  const std::string expected = out.sidecar.value("checkpoint_hash", "");
  if (hex64(io::file_hash(layout.checkpoint(stage))) != expected) {
    throw StaleArtifactError("checkpoint '" + layout.checkpoint(stage).string() + "' does not match its sidecar");
  }
  out.tensors = io::read_checkpoint(layout.checkpoint(stage));
  return out;
}

LoadedStage read_complete_stage(const RunConfig& cfg, const RunLayout& layout, Stage stage) {
  LoadedStage s = read_stage(cfg, layout, stage);
  if (!s.sidecar.value("complete", false)) {
    throw DependencyError(to_string(stage) + " training is incomplete (step " + s.sidecar["step"].dump() + " of " +
                          s.sidecar["max_steps"].dump() + "); rerun `train --stage " + to_string(stage) + "`");
  }
  return s;
}

TrainProgress progress_from(const LoadedStage& s, const ad::ParameterSet<float>& params) {
  TrainProgress p;
  p.adam = take_adam_state<float>(s.tensors, params);
  p.curve = curve_from_json(s.sidecar.at("curve"));
  if (s.sidecar.contains("unused_codes_per_epoch")) p.unused_codes = s.sidecar["unused_codes_per_epoch"].get<std::vector<int>>();
  auto it = s.tensors.find("progress/codes_seen");
  if (it != s.tensors.end()) {
    const auto& t = std::get<Tensor<std::int32_t>>(it->second);
    p.epoch_codes_seen.assign(t.values().begin(), t.values().end());
  }
  return p;
}

std::uint64_t init_seed(const RunConfig& cfg, Stage stage) { return derive_seed(cfg.seed, "init." + to_string(stage)); }

Dataset load_checked_dataset(const RunConfig& cfg, const RunLayout& layout) {
  if (!fs::exists(layout.manifest())) {
    throw DependencyError("no dataset manifest at '" + layout.manifest().string() + "'; run `generate` first");
  }
  Dataset ds = Dataset::load(layout.data());
  check_stamp(ds.manifest, cfg, "data", layout.manifest());
  return ds;
}

template <class Model, class TrainFn>
json train_image_stage(const RunConfig& cfg, Stage stage, const RunLayout& layout, const RunOptions& opts,
                       Model model, TrainFn train) {
  const Dataset ds = load_checked_dataset(cfg, layout);
  const ImageCorpus corpus = ds.corpus("train");
  TrainProgress progress;
  if (opts.resume && fs::exists(layout.sidecar(stage))) {
    try {
      LoadedStage s = read_stage(cfg, layout, stage);
      model = Model(model.config(), io::take_parameters<float>(s.tensors, param_names(model.params()), "model/"));
      progress = progress_from(s, model.params());
      log_line(opts, "[" + to_string(stage) + "] resuming at step " + std::to_string(progress.adam.step));
    } catch (const StaleArtifactError&) {
      log_line(opts, "[" + to_string(stage) + "] existing checkpoint is stale; starting over");
    }
  }
  const std::string data_hash = ds.hash();
  const TrainConfig& tc = cfg.train.get(stage);
  train(model, corpus, progress, [&](int step, const TrainProgress& p) {
    save_stage(cfg, layout, stage, model.params(), p, step, data_hash);
    const auto& last = p.curve.back();
    std::string msg = "[" + to_string(stage) + "] step " + std::to_string(step) + "/" + std::to_string(tc.max_steps);
    for (const auto& [k, v] : last.terms) msg += " " + k + "=" + std::to_string(v);
    log_line(opts, msg);
  });
  if (tc.max_steps == 0 || progress.adam.step == tc.max_steps) {
    // A zero-step budget or an already complete checkpoint still leaves a
    // consistent artifact behind.
    if (!fs::exists(layout.sidecar(stage)) || tc.max_steps == 0) {
      save_stage(cfg, layout, stage, model.params(), progress, static_cast<int>(progress.adam.step), data_hash);
    }
  }
  return read_json(layout.sidecar(stage));
}

}  // namespace

// --- dataset -----------------------------------------------------------------

Dataset Dataset::load(const fs::path& data_dir) {
  Dataset ds;
  ds.dir = data_dir;
  ds.manifest = read_json(data_dir / "manifest.json");
  const json& m = ds.manifest;
  if (m.value("schema_version", -1) != kSchemaVersion) throw SchemaError("manifest has an unsupported schema_version");
  try {
    for (const auto& vol : m.at("volumes")) {
      const std::string split = vol.at("split").get<std::string>();
      const auto subject = vol.at("subject_id").get<std::int64_t>();
      for (const auto& s : vol.at("slices")) {
        SliceEntry e;
        e.split = split;
        e.subject_id = subject;
        e.index = s.at("index").get<int>();
        e.uid = s.at("uid").get<std::uint64_t>();
        e.slice_position = s.at("slice_position").get<double>();
        e.image = s.at("image").get<std::string>();
        if (!s.at("mask").is_null()) e.mask = s.at("mask").get<std::string>();
        e.anomalous = s.at("anomalous").get<bool>();
        ds.slices.push_back(std::move(e));
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed manifest: ") + e.what());
  }
  return ds;
}

std::vector<const SliceEntry*> Dataset::split(const std::string& name) const {
  std::vector<const SliceEntry*> out;
  for (const auto& s : slices) {
    if (s.split == name) out.push_back(&s);
  }
  return out;
}

Tensor<float> Dataset::image(const SliceEntry& e) const { return io::read_float_tensor(dir / e.image); }

Tensor<std::int32_t> Dataset::mask(const SliceEntry& e) const {
  if (e.mask.empty()) throw DependencyError("slice " + e.image.string() + " has no ground-truth mask");
  return io::read_int_tensor(dir / e.mask);
}

ImageCorpus Dataset::corpus(const std::string& split_name) const {
  ImageCorpus c;
  for (const SliceEntry* e : split(split_name)) {
    c.images.push_back(image(*e));
    c.slice_positions.push_back(e->slice_position);
  }
  if (c.images.empty()) throw DependencyError("dataset has no '" + split_name + "' slices");
  return c;
}

std::string Dataset::hash() const { return json_hash(manifest); }

// --- generate ----------------------------------------------------------------

json cmd_generate(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts) {
  cfg.validate();
  const RunLayout layout(run_dir);
  const DataConfig& dc = cfg.data;
  fs::create_directories(layout.data());
  json manifest = stamp(cfg, "data");
  manifest["seed"] = cfg.seed;
  manifest["side"] = dc.side;
  manifest["slices_per_volume"] = dc.slices;
  manifest["normalization"] = "subject-wise";
  json volumes = json::array();
  std::uint64_t uid = 0;

  auto write_volume = [&](const PseudoVolume& vol, const std::string& split, const std::vector<Tensor<std::int32_t>>* masks,
                          const AnomalySpec* spec) {
    json v{{"subject_id", vol.subject_id}, {"split", split}};
    if (spec) {
      v["anomaly"] = json{{"shape", to_string(spec->shape)},     {"center_y", spec->center_y},
                          {"center_x", spec->center_x},           {"radius", spec->radius},
                          {"intensity_delta", spec->intensity_delta}, {"slice_begin", spec->slice_begin},
                          {"slice_end", spec->slice_end}};
    } else {
      v["anomaly"] = nullptr;
    }
    json slices = json::array();
    for (int z = 0; z < vol.num_slices(); ++z) {
      const std::string base = split + "/" + slice_name(vol.subject_id, z);
      const Tensor<float> img = vol.slice(z).cast<float>();
      io::write_tensor(layout.data() / (base + ".lsrt"), img);
      json s{{"index", z},
             {"uid", uid++},
             {"slice_position", vol.slice_positions[z]},
             {"image", base + ".lsrt"},
             {"hash", hex64(tensor_hash(img))}};
      bool anomalous = false;
      if (masks) {
        const Tensor<std::int32_t>& m = (*masks)[z];
        for (std::int32_t x : m.values()) anomalous = anomalous || x != 0;
        io::write_tensor(layout.data() / (base + "_mask.lsrt"), m);
        s["mask"] = base + "_mask.lsrt";
      } else {
        s["mask"] = nullptr;
      }
      s["anomalous"] = anomalous;
      slices.push_back(std::move(s));
    }
    v["slices"] = std::move(slices);
    volumes.push_back(std::move(v));
  };

  for (int i = 0; i < dc.train_subjects; ++i) {
    write_volume(normalize(generate_volume(cfg.seed, i, dc.slices, dc.side)), "train", nullptr, nullptr);
  }
  log_line(opts, "[generate] wrote " + std::to_string(dc.train_subjects) + " training volumes");

  const int anomalous_count = dc.val_subjects - dc.val_clean_subjects;
  struct Probe {
    PseudoVolume base;
    AnomalySpec spec;
  };
  std::vector<Probe> probes;
  for (int i = 0; i < dc.val_subjects; ++i) {
    const std::int64_t id = dc.train_subjects + i;
    const PseudoVolume vol = normalize(generate_volume(cfg.seed, id, dc.slices, dc.side));
    if (i < anomalous_count) {
      Rng rng(cfg.seed, "anomaly", {static_cast<std::uint64_t>(id)});
      const AnomalySpec spec = sample_anomaly_spec(rng, dc.anomaly, dc.side, dc.slices);
      const InjectedVolume inj = inject_anomaly(vol, spec, dc.anomaly.clamp_min, dc.anomaly.clamp_max);
      write_volume(inj.volume, "val", &inj.masks, &spec);
      probes.push_back(Probe{vol, spec});
    } else {
      std::vector<Tensor<std::int32_t>> empty(static_cast<std::size_t>(dc.slices), Tensor<std::int32_t>(Shape{dc.side, dc.side}));
      write_volume(vol, "val", &empty, nullptr);
    }
  }
  log_line(opts, "[generate] wrote " + std::to_string(dc.val_subjects) + " validation volumes (" +
                     std::to_string(anomalous_count) + " with anomalies)");

  if (cfg.eval.probes) {
    for (const auto& [split, magnitude] :
         {std::pair<std::string, double>{"probe_low", cfg.eval.probe_low_delta}, {"probe_high", cfg.eval.probe_high_delta}}) {
      for (const Probe& p : probes) {
        AnomalySpec spec = p.spec;
        spec.intensity_delta = p.spec.intensity_delta < 0 ? -magnitude : magnitude;
        const InjectedVolume inj = inject_anomaly(p.base, spec, dc.anomaly.clamp_min, dc.anomaly.clamp_max);
        write_volume(inj.volume, split, &inj.masks, &spec);
      }
    }
    log_line(opts, "[generate] wrote fixed-contrast probe volumes");
  }
  manifest["volumes"] = std::move(volumes);
  write_json(layout.manifest(), manifest);
  return manifest;
}

// --- models ------------------------------------------------------------------

VqCodec<float> load_codec(const RunConfig& cfg, const fs::path& run_dir) {
  const RunLayout layout(run_dir);
  const LoadedStage s = read_complete_stage(cfg, layout, Stage::VqVae);
  const VqCodec<float> ref(cfg.codec, 0);
  return VqCodec<float>(cfg.codec, io::take_parameters<float>(s.tensors, param_names(ref.params()), "model/"));
}

ArPrior<float> load_prior(const RunConfig& cfg, const fs::path& run_dir) {
  const RunLayout layout(run_dir);
  const LoadedStage s = read_complete_stage(cfg, layout, Stage::Prior);
  const ArPrior<float> ref(cfg.prior_config(), 0);
  return ArPrior<float>(cfg.prior_config(), io::take_parameters<float>(s.tensors, param_names(ref.params()), "model/"));
}

Vae<float> load_vae(const RunConfig& cfg, const fs::path& run_dir) {
  const RunLayout layout(run_dir);
  const LoadedStage s = read_complete_stage(cfg, layout, Stage::Vae);
  const Vae<float> ref(cfg.vae_config(), 0);
  return Vae<float>(cfg.vae_config(), io::take_parameters<float>(s.tensors, param_names(ref.params()), "model/"));
}

// --- train -------------------------------------------------------------------

json cmd_train(const RunConfig& cfg, Stage stage, const fs::path& run_dir, const RunOptions& opts) {
  cfg.validate();
  const RunLayout layout(run_dir);
  if (stage == Stage::VqVae) {
    return train_image_stage(cfg, stage, layout, opts, VqCodec<float>(cfg.codec, init_seed(cfg, stage)),
                             [&](VqCodec<float>& m, const ImageCorpus& c, TrainProgress& p, const CheckpointFn& f) {
                               train_vqvae(m, c, cfg.train.vqvae, cfg.train.augment, cfg.seed, p, f);
                             });
  }
  if (stage == Stage::Vae) {
    return train_image_stage(cfg, stage, layout, opts, Vae<float>(cfg.vae_config(), init_seed(cfg, stage)),
                             [&](Vae<float>& m, const ImageCorpus& c, TrainProgress& p, const CheckpointFn& f) {
                               train_vae(m, c, cfg.train.vae, cfg.train.augment, cfg.seed, p, f);
                             });
  }

  // Prior: needs the finished codec, which stays frozen (read-only) here.
  if (!fs::exists(layout.checkpoint(Stage::VqVae))) {
    throw DependencyError("prior training needs a trained codec: no checkpoint at '" +
                          layout.checkpoint(Stage::VqVae).string() + "'; run `train --stage vqvae` first");
  }
  const VqCodec<float> codec = load_codec(cfg, run_dir);
  const Dataset ds = load_checked_dataset(cfg, layout);
  const std::string codec_hash = hex64(io::file_hash(layout.checkpoint(Stage::VqVae)));

  LatentCorpus latents;
  bool cached = false;
  if (fs::exists(layout.latent_cache_meta()) && fs::exists(layout.latent_cache())) {
    const json meta = read_json(layout.latent_cache_meta());
    if (meta.value("codec_checkpoint_hash", "") == codec_hash && meta.value("data_hash", "") == ds.hash()) {
      latents.grids = io::read_int_tensor(layout.latent_cache());
      latents.slice_positions = meta.at("slice_positions").get<std::vector<double>>();
      cached = latents.grids.rank() == 3 && static_cast<std::size_t>(latents.grids.dim(0)) == latents.size();
    }
  }
  if (!cached) {
    latents = encode_corpus(codec, ds.corpus("train"));
    atomic_write(layout.latent_cache(), [&](const fs::path& p) { io::write_tensor(p, latents.grids); });
    json meta = stamp(cfg, "vqvae");
    meta["codec_checkpoint_hash"] = codec_hash;
    meta["data_hash"] = ds.hash();
    meta["slice_positions"] = latents.slice_positions;
    write_json(layout.latent_cache_meta(), meta);
    log_line(opts, "[prior] cached " + std::to_string(latents.size()) + " latent grids");
  } else {
    log_line(opts, "[prior] using cached latent grids");
  }

  ArPrior<float> prior(cfg.prior_config(), init_seed(cfg, stage));
  TrainProgress progress;
  if (opts.resume && fs::exists(layout.sidecar(stage))) {
    try {
      LoadedStage s = read_stage(cfg, layout, stage);
      prior = ArPrior<float>(cfg.prior_config(), io::take_parameters<float>(s.tensors, param_names(prior.params()), "model/"));
      progress = progress_from(s, prior.params());
      log_line(opts, "[prior] resuming at step " + std::to_string(progress.adam.step));
    } catch (const StaleArtifactError&) {
      log_line(opts, "[prior] existing checkpoint is stale; starting over");
    }
  }
  const TrainConfig& tc = cfg.train.prior;
  const std::string data_hash = ds.hash();
  train_prior(prior, latents, tc, cfg.seed, progress, [&](int step, const TrainProgress& p) {
    save_stage(cfg, layout, stage, prior.params(), p, step, data_hash);
    log_line(opts, "[prior] step " + std::to_string(step) + "/" + std::to_string(tc.max_steps) +
                       " nll=" + std::to_string(p.curve.back().terms.at("nll")));
  });
  if (tc.max_steps == 0 || !fs::exists(layout.sidecar(stage))) {
    save_stage(cfg, layout, stage, prior.params(), progress, static_cast<int>(progress.adam.step), data_hash);
  }
  return read_json(layout.sidecar(stage));
}

// --- calibrate ---------------------------------------------------------------

Thresholds calibrate_thresholds(const std::vector<double>& nll_population, double percentile_s, double percentile_p) {
  Thresholds t;
  t.lambda_s = percentile(nll_population, percentile_s);
  t.lambda_p = percentile(nll_population, percentile_p);
  t.source = "calibrated";
  return t;
}

Thresholds load_thresholds(const RunConfig& cfg, const fs::path& run_dir) {
  const RunLayout layout(run_dir);
  Thresholds t{cfg.scoring.lambda_s, cfg.scoring.lambda_p, "config"};
  if (!fs::exists(layout.thresholds())) return t;
  const json j = read_json(layout.thresholds());
  check_stamp(j, cfg, "thresholds", layout.thresholds());
  t.lambda_s = j.at("lambda_s").get<double>();
  t.lambda_p = j.at("lambda_p").get<double>();
  t.source = j.at("source").get<std::string>();
  return t;
}

json cmd_calibrate(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts) {
  cfg.validate();
  const RunLayout layout(run_dir);
  const VqCodec<float> codec = load_codec(cfg, run_dir);
  const ArPrior<float> prior = load_prior(cfg, run_dir);
  const Dataset ds = load_checked_dataset(cfg, layout);
  const auto val = ds.split("val");
  Thresholds t{cfg.scoring.lambda_s, cfg.scoring.lambda_p, "config"};
  std::size_t population = 0;
  if (cfg.calibration.enabled && !val.empty()) {
    std::vector<double> pool;
    for (const SliceEntry* e : val) {
      const Tensor<float> img = ds.image(*e);
      const LatentGrid grid = codec.quantize(codec.encode(img)).indices;
      const Tensor<float> nll = prior.nll_map(grid, ConditioningContext{e->slice_position});
      pool.insert(pool.end(), nll.values().begin(), nll.values().end());
    }
    population = pool.size();
    t = calibrate_thresholds(pool, cfg.calibration.percentile_s, cfg.calibration.percentile_p);
  }
  json out = stamp(cfg, "thresholds");
  out["lambda_s"] = t.lambda_s;
  out["lambda_p"] = t.lambda_p;
  out["source"] = t.source;
  out["percentile_s"] = cfg.calibration.percentile_s;
  out["percentile_p"] = cfg.calibration.percentile_p;
  out["population"] = population;
  out["split"] = "val";
  write_json(layout.thresholds(), out);
  log_line(opts, "[calibrate] lambda_s=" + std::to_string(t.lambda_s) + " lambda_p=" + std::to_string(t.lambda_p) +
                     " (" + t.source + ", " + std::to_string(population) + " positions)");
  return out;
}

// --- score -------------------------------------------------------------------

json cmd_score(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts) {
  cfg.validate();
  const RunLayout layout(run_dir);
  const VqCodec<float> codec = load_codec(cfg, run_dir);
  const ArPrior<float> prior = load_prior(cfg, run_dir);
  const Vae<float> vae = load_vae(cfg, run_dir);
  const Dataset ds = load_checked_dataset(cfg, layout);
  const Thresholds th = load_thresholds(cfg, run_dir);
  ScoringConfig sc = cfg.scoring;
  sc.lambda_s = th.lambda_s;
  sc.lambda_p = th.lambda_p;
  sc.validate();

  std::vector<const SliceEntry*> entries;
  for (const char* split : {"val", "probe_low", "probe_high"}) {
    for (const SliceEntry* e : ds.split(split)) entries.push_back(e);
  }
  if (entries.empty()) throw DependencyError("dataset has no evaluation slices to score");
  fs::create_directories(layout.scores());

  std::vector<json> records(entries.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= entries.size()) return;
      try {
        const SliceEntry& e = *entries[i];
        const Tensor<float> img = ds.image(e);
        const ConditioningContext ctx{e.slice_position};
        const ImageScore<float> method = score_image(img, codec, prior, ctx, sc, cfg.seed, e.uid);
        const auto [baseline_score, baseline_map] = vae_scores(img, vae);
        const std::string base = "maps/" + e.split + "/" + slice_name(e.subject_id, e.index);
        io::write_tensor(layout.scores() / (base + "_method.lsrt"), method.anomaly_map);
        io::write_tensor(layout.scores() / (base + "_baseline.lsrt"), baseline_map);
        std::size_t masked = 0;
        for (bool b : method.mask) masked += b;
        records[i] = json{{"id", e.split + "/" + slice_name(e.subject_id, e.index)},
                          {"split", e.split},
                          {"subject_id", e.subject_id},
                          {"index", e.index},
                          {"uid", e.uid},
                          {"slice_position", e.slice_position},
                          {"anomalous", e.anomalous},
                          {"masked_latents", masked},
                          {"method", json{{"sample_score", method.sample_score}, {"map", base + "_method.lsrt"}}},
                          {"baseline", json{{"sample_score", baseline_score}, {"map", base + "_baseline.lsrt"}}}};
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = entries.size();
        return;
      }
    }
  };
  const int threads = std::max(1, opts.threads);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  json out = stamp(cfg, "scores");
  out["seed"] = cfg.seed;
  out["manifest_hash"] = ds.hash();
  out["thresholds"] = json{{"lambda_s", th.lambda_s}, {"lambda_p", th.lambda_p}, {"source", th.source}};
  out["restorations"] = sc.restorations;
  out["images"] = records;
  write_json(layout.score_report(), out);
  log_line(opts, "[score] scored " + std::to_string(entries.size()) + " slices");
  return out;
}

// --- evaluate ----------------------------------------------------------------

namespace {

struct SplitData {
  std::vector<double> sample_scores[2];  // method, baseline
  std::vector<int> slice_labels;
  std::vector<double> pixels[2];
  std::vector<int> pixel_labels;
  int localized[2] = {0, 0};
  int anomalous_slices = 0;
};

json metrics_for(const SplitData& d, int which) {
  const bool both = std::count(d.slice_labels.begin(), d.slice_labels.end(), 1) > 0 &&
                    std::count(d.slice_labels.begin(), d.slice_labels.end(), 0) > 0;
  const bool pixel_both = std::count(d.pixel_labels.begin(), d.pixel_labels.end(), 1) > 0 &&
                          std::count(d.pixel_labels.begin(), d.pixel_labels.end(), 0) > 0;
  json slice = json::object();
  slice["auroc"] = both ? json(auroc(d.sample_scores[which], d.slice_labels)) : json(nullptr);
  slice["ap"] = both ? json(average_precision(d.sample_scores[which], d.slice_labels)) : json(nullptr);
  json pixel = json::object();
  if (pixel_both) {
    pixel["auroc"] = auroc(d.pixels[which], d.pixel_labels);
    pixel["ap"] = average_precision(d.pixels[which], d.pixel_labels);
    const DiceResult dr = best_dice(d.pixels[which], d.pixel_labels);
    pixel["dice"] = dr.dice;
    pixel["dice_threshold"] = dr.threshold;
  } else {
    pixel["auroc"] = nullptr;
    pixel["ap"] = nullptr;
    pixel["dice"] = nullptr;
    pixel["dice_threshold"] = nullptr;
  }
  json loc{{"anomalous_slices", d.anomalous_slices},
           {"inside_above_outside", d.localized[which]},
           {"fraction", d.anomalous_slices > 0 ? json(static_cast<double>(d.localized[which]) / d.anomalous_slices)
                                               : json(nullptr)}};
  return json{{"slice", slice}, {"pixel", pixel}, {"localization", loc}};
}

}  // namespace

json cmd_evaluate(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts) {
  cfg.validate();
  const RunLayout layout(run_dir);
  const Dataset ds = load_checked_dataset(cfg, layout);
  if (!fs::exists(layout.score_report())) {
    throw DependencyError("no score report at '" + layout.score_report().string() + "'; run `score` first");
  }
  const json scores = read_json(layout.score_report());
  check_stamp(scores, cfg, "scores", layout.score_report());
  if (scores.at("manifest_hash") != ds.hash()) {
    throw StaleArtifactError("score report was computed on a different dataset manifest");
  }
  std::map<std::string, const SliceEntry*> by_id;
  for (const auto& e : ds.slices) by_id[e.split + "/" + slice_name(e.subject_id, e.index)] = &e;

  std::map<std::string, SplitData> splits;
  for (const auto& rec : scores.at("images")) {
    const std::string id = rec.at("id").get<std::string>();
    auto it = by_id.find(id);
    if (it == by_id.end()) throw SchemaError("score report references unknown slice '" + id + "'");
    const SliceEntry& e = *it->second;
    SplitData& d = splits[e.split];
    const Tensor<std::int32_t> mask = ds.mask(e);
    d.slice_labels.push_back(e.anomalous ? 1 : 0);
    const char* keys[2] = {"method", "baseline"};
    for (int w = 0; w < 2; ++w) {
      d.sample_scores[w].push_back(rec.at(keys[w]).at("sample_score").get<double>());
      const Tensor<float> map = io::read_float_tensor(layout.scores() / rec.at(keys[w]).at("map").get<std::string>());
      if (map.shape() != mask.shape()) throw ShapeError("anomaly map and mask shapes differ for " + id);
      double inside = 0.0, outside = 0.0;
      std::size_t n_in = 0, n_out = 0;
      for (std::size_t i = 0; i < map.size(); ++i) {
        const double v = map[i];
        if (!(v >= 0.0) || !std::isfinite(v)) throw NonFiniteError("anomaly map of " + id + " has invalid entries");
        d.pixels[w].push_back(v);
        if (mask[i]) {
          inside += v;
          ++n_in;
        } else {
          outside += v;
          ++n_out;
        }
      }
      if (n_in > 0 && n_out > 0 && inside / n_in > outside / n_out) d.localized[w] += 1;
    }
    for (std::size_t i = 0; i < mask.size(); ++i) d.pixel_labels.push_back(mask[i] != 0 ? 1 : 0);
    if (e.anomalous) d.anomalous_slices += 1;
  }
  if (!splits.count("val")) throw DependencyError("score report has no validation slices");

  json report = stamp(cfg, "report");
  report["dataset"] = json{{"name", "synthetic-pseudo-volumes"},
                           {"manifest_hash", ds.hash()},
                           {"side", cfg.data.side},
                           {"slices_per_volume", cfg.data.slices},
                           {"train_volumes", cfg.data.train_subjects},
                           {"val_volumes", cfg.data.val_subjects},
                           {"val_slices", splits["val"].slice_labels.size()}};
  report["seeds"] = json{{"master", cfg.seed}};
  report["thresholds"] = scores.at("thresholds");
  const SplitData& val = splits["val"];
  report["metrics"] = json{{"method", metrics_for(val, 0)}, {"baseline", metrics_for(val, 1)}};
  json probes = json::object();
  for (const auto& [name, delta] : {std::pair<std::string, double>{"probe_low", cfg.eval.probe_low_delta},
                                    {"probe_high", cfg.eval.probe_high_delta}}) {
    auto it = splits.find(name);
    if (it == splits.end()) continue;
    probes[name] = json{{"abs_delta", delta}, {"method", metrics_for(it->second, 0)}, {"baseline", metrics_for(it->second, 1)}};
  }
  report["probes"] = probes;
  write_json(layout.report(), report);
  log_line(opts, "[evaluate] report written to " + layout.report().string());
  return report;
}

json run_pipeline(const RunConfig& cfg, const fs::path& run_dir, const RunOptions& opts) {
  cmd_generate(cfg, run_dir, opts);
  cmd_train(cfg, Stage::VqVae, run_dir, opts);
  cmd_train(cfg, Stage::Prior, run_dir, opts);
  cmd_train(cfg, Stage::Vae, run_dir, opts);
  cmd_calibrate(cfg, run_dir, opts);
  cmd_score(cfg, run_dir, opts);
  return cmd_evaluate(cfg, run_dir, opts);
}

}  // namespace lsr
