// Command-line front end: generate, train, calibrate, score, evaluate, run.
// Success prints a one-line JSON summary on stdout; failures print a JSON
// error object on stderr and exit nonzero.

#include <cstdint>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "lsr/pipeline.hpp"

namespace {

using nlohmann::json;

int exit_code_for(const std::string& kind) {
  if (kind == "schema" || kind == "dimension_mismatch" || kind == "invalid_value") return 3;
  if (kind == "missing_dependency" || kind == "stale_artifact") return 4;
  if (kind == "divergence" || kind == "non_finite") return 5;
  if (kind == "io" || kind == "format") return 6;
  return 1;
}

int fail(const std::string& kind, const std::string& message) {
  std::cerr << json{{"status", "error"}, {"error", {{"kind", kind}, {"message", message}}}}.dump() << std::endl;
  return exit_code_for(kind);
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "run";
  bool deterministic = true;
  int threads = 1;
  bool fresh = false;
  bool quiet = false;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Run configuration JSON (defaults when omitted)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "Master seed; overrides the config");
  sub->add_option("--out", c.out, "Run directory")->capture_default_str();
  sub->add_flag("--deterministic,!--no-deterministic", c.deterministic, "Deterministic execution (default on)");
  sub->add_option("--threads", c.threads, "Worker threads for scoring")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_flag("--fresh", c.fresh, "Ignore existing checkpoints and train from scratch");
  sub->add_flag("--quiet", c.quiet, "Suppress progress logging");
}

lsr::RunConfig resolve_config(const Common& c) {
  lsr::RunConfig cfg = c.config.empty() ? lsr::RunConfig::defaults() : lsr::RunConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  cfg.validate();
  return cfg;
}

lsr::RunOptions options_for(const Common& c) {
  lsr::RunOptions o;
  o.deterministic = c.deterministic;
  o.threads = c.threads;
  o.resume = !c.fresh;
  o.log = c.quiet ? nullptr : &std::cerr;
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  lsr::tune_allocator();
  CLI::App app{"Latent-space restoration anomaly scoring: synthetic data, training, scoring and evaluation"};
  app.require_subcommand(1);

  Common common;
  std::string stage_name;
  auto* generate = app.add_subcommand("generate", "Write the synthetic corpus and its manifest");
  auto* train = app.add_subcommand("train", "Train one stage (vqvae, prior or vae)");
  auto* calibrate = app.add_subcommand("calibrate", "Calibrate lambda_s / lambda_p on validation NLLs");
  auto* score = app.add_subcommand("score", "Score validation and probe slices with the method and the baseline");
  auto* evaluate = app.add_subcommand("evaluate", "Compute metrics and write the evaluation report");
  auto* run = app.add_subcommand("run", "Run the whole pipeline");
  auto* defaults = app.add_subcommand("defaults", "Print the default configuration as JSON");
  for (auto* sub : {generate, train, calibrate, score, evaluate, run}) add_common(sub, common);
  train->add_option("--stage", stage_name, "vqvae | prior | vae")
      ->required()
      ->check(CLI::IsMember({"vqvae", "prior", "vae"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"status", "error"}, {"error", {{"kind", "usage"}, {"message", e.what()}}}}.dump() << std::endl;
    return 2;
  }

  try {
    if (defaults->parsed()) {
      std::cout << lsr::RunConfig::defaults().to_json().dump(2) << std::endl;
      return 0;
    }
    const lsr::RunConfig cfg = resolve_config(common);
    const lsr::RunOptions opts = options_for(common);
    const lsr::RunLayout layout(common.out);
    json summary{{"status", "ok"}, {"config_hash", cfg.hash()}, {"run_dir", layout.root.string()}};
    if (generate->parsed()) {
      const json m = lsr::cmd_generate(cfg, layout.root, opts);
      summary["command"] = "generate";
      summary["manifest"] = layout.manifest().string();
      summary["manifest_hash"] = lsr::json_hash(m);
      summary["volumes"] = m["volumes"].size();
    } else if (train->parsed()) {
      const lsr::Stage stage = lsr::stage_from_string(stage_name);
      const json side = lsr::cmd_train(cfg, stage, layout.root, opts);
      summary["command"] = "train";
      summary["stage"] = stage_name;
      summary["checkpoint"] = layout.checkpoint(stage).string();
      summary["loss_curve"] = layout.loss_curve(stage).string();
      summary["step"] = side["step"];
      summary["complete"] = side["complete"];
    } else if (calibrate->parsed()) {
      const json t = lsr::cmd_calibrate(cfg, layout.root, opts);
      summary["command"] = "calibrate";
      summary["thresholds"] = layout.thresholds().string();
      summary["lambda_s"] = t["lambda_s"];
      summary["lambda_p"] = t["lambda_p"];
      summary["source"] = t["source"];
    } else if (score->parsed()) {
      const json s = lsr::cmd_score(cfg, layout.root, opts);
      summary["command"] = "score";
      summary["scores"] = layout.score_report().string();
      summary["images"] = s["images"].size();
    } else if (evaluate->parsed() || run->parsed()) {
      const json r = run->parsed() ? lsr::run_pipeline(cfg, layout.root, opts) : lsr::cmd_evaluate(cfg, layout.root, opts);
      summary["command"] = run->parsed() ? "run" : "evaluate";
      summary["report"] = layout.report().string();
      summary["report_hash"] = lsr::json_hash(r);
      summary["metrics"] = r["metrics"];
    }
    std::cout << summary.dump() << std::endl;
    return 0;
  } catch (const lsr::Error& e) {
    return fail(e.kind(), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail("io", e.what());
  } catch (const std::exception& e) {
    return fail("internal", e.what());
  }
}
