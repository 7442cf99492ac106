#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "lsr/config.hpp"
#include "lsr/data.hpp"
#include "lsr/errors.hpp"
#include "lsr/eval.hpp"
#include "lsr/pipeline.hpp"
#include "lsr/scoring.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using IntArray = py::array_t<int, py::array::c_style | py::array::forcecast>;

lsr::Tensor<double> to_tensor(const Array& a) {
  lsr::Shape shape(a.shape(), a.shape() + a.ndim());
  lsr::Tensor<double> t(shape, lsr::uninitialized);
  std::copy(a.data(), a.data() + a.size(), t.data());
  return t;
}

template <class T>
py::array_t<T> to_array(const lsr::Tensor<T>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<T> out(shape);
  std::copy(t.data(), t.data() + t.size(), out.mutable_data());
  return out;
}

std::span<const double> span_of(const Array& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }
std::span<const int> span_of(const IntArray& a) { return {a.data(), static_cast<std::size_t>(a.size())}; }

lsr::RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw lsr::SchemaError(std::string("config is not valid JSON: ") + e.what());
  }
  lsr::RunConfig cfg = lsr::RunConfig::from_json(j);
  cfg.validate();
  return cfg;
}

lsr::RunOptions options(int threads, bool verbose, std::ostringstream& log) {
  lsr::RunOptions o;
  o.threads = threads;
  o.log = verbose ? &log : nullptr;
  return o;
}

/// Runs one pipeline command without the GIL; returns (summary json, log text).
template <class F>
py::tuple run_command(F&& f, int threads, bool verbose) {
  std::ostringstream log;
  const lsr::RunOptions opts = options(threads, verbose, log);
  json out;
  {
    py::gil_scoped_release release;
    out = f(opts);
  }
  return py::make_tuple(out.dump(), log.str());
}

}  // namespace

PYBIND11_MODULE(_lsr, m) {
  m.doc() = "Latent-space restoration anomaly detection (native core)";

  auto base = py::register_exception<lsr::Error>(m, "LsrError");
  py::register_exception<lsr::ShapeError>(m, "ShapeError", base);
  py::register_exception<lsr::DimensionError>(m, "DimensionError", base);
  py::register_exception<lsr::NonFiniteError>(m, "NonFiniteError", base);
  py::register_exception<lsr::IndexError>(m, "OutOfRangeError", base);
  py::register_exception<lsr::ValueError>(m, "InvalidValueError", base);
  py::register_exception<lsr::ZeroVarianceError>(m, "ZeroVarianceError", base);
  py::register_exception<lsr::DivergenceError>(m, "DivergenceError", base);
  py::register_exception<lsr::DependencyError>(m, "DependencyError", base);
  py::register_exception<lsr::IoError>(m, "IoError", base);
  py::register_exception<lsr::FormatError>(m, "FormatError", base);
  py::register_exception<lsr::SchemaError>(m, "SchemaError", base);
  py::register_exception<lsr::StaleArtifactError>(m, "StaleArtifactError", base);

  // Configuration travels as JSON text; the Python layer converts to dicts.
  m.def("default_config", [] { return lsr::RunConfig::defaults().to_json().dump(); });
  m.def(
      "normalize_config", [](const std::string& text) { return parse_config(text).to_json().dump(); },
      py::arg("config"), "Fill defaults, validate and return the canonical config.");
  m.def(
      "config_hash", [](const std::string& text) { return parse_config(text).hash(); }, py::arg("config"));

  m.def(
      "cmd_generate",
      [](const std::string& cfg, const std::string& dir, int threads, bool verbose) {
        const lsr::RunConfig c = parse_config(cfg);
        return run_command([&](const lsr::RunOptions& o) { return lsr::cmd_generate(c, dir, o); }, threads, verbose);
      },
      py::arg("config"), py::arg("run_dir"), py::arg("threads") = 1, py::arg("verbose") = false);
  m.def(
      "cmd_train",
      [](const std::string& cfg, const std::string& stage, const std::string& dir, int threads, bool verbose) {
        const lsr::RunConfig c = parse_config(cfg);
        const lsr::Stage s = lsr::stage_from_string(stage);
        return run_command([&](const lsr::RunOptions& o) { return lsr::cmd_train(c, s, dir, o); }, threads, verbose);
      },
      py::arg("config"), py::arg("stage"), py::arg("run_dir"), py::arg("threads") = 1, py::arg("verbose") = false);
  m.def(
      "cmd_calibrate",
      [](const std::string& cfg, const std::string& dir, int threads, bool verbose) {
        const lsr::RunConfig c = parse_config(cfg);
        return run_command([&](const lsr::RunOptions& o) { return lsr::cmd_calibrate(c, dir, o); }, threads, verbose);
      },
      py::arg("config"), py::arg("run_dir"), py::arg("threads") = 1, py::arg("verbose") = false);
  m.def(
      "cmd_score",
      [](const std::string& cfg, const std::string& dir, int threads, bool verbose) {
        const lsr::RunConfig c = parse_config(cfg);
        return run_command([&](const lsr::RunOptions& o) { return lsr::cmd_score(c, dir, o); }, threads, verbose);
      },
      py::arg("config"), py::arg("run_dir"), py::arg("threads") = 1, py::arg("verbose") = false);
  m.def(
      "cmd_evaluate",
      [](const std::string& cfg, const std::string& dir, int threads, bool verbose) {
        const lsr::RunConfig c = parse_config(cfg);
        return run_command([&](const lsr::RunOptions& o) { return lsr::cmd_evaluate(c, dir, o); }, threads, verbose);
      },
      py::arg("config"), py::arg("run_dir"), py::arg("threads") = 1, py::arg("verbose") = false);
  m.def(
      "run_pipeline",
      [](const std::string& cfg, const std::string& dir, int threads, bool verbose) {
        const lsr::RunConfig c = parse_config(cfg);
        return run_command([&](const lsr::RunOptions& o) { return lsr::run_pipeline(c, dir, o); }, threads, verbose);
      },
      py::arg("config"), py::arg("run_dir"), py::arg("threads") = 1, py::arg("verbose") = false);

  m.def(
      "auroc", [](const Array& s, const IntArray& y) { return lsr::auroc(span_of(s), span_of(y)); }, py::arg("scores"),
      py::arg("labels"));
  m.def(
      "average_precision",
      [](const Array& s, const IntArray& y) { return lsr::average_precision(span_of(s), span_of(y)); },
      py::arg("scores"), py::arg("labels"));
  m.def(
      "dice", [](const IntArray& p, const IntArray& t) { return lsr::dice(span_of(p), span_of(t)); }, py::arg("pred"),
      py::arg("truth"));
  m.def(
      "best_dice",
      [](const Array& map, const IntArray& t) {
        const lsr::DiceResult r = lsr::best_dice(span_of(map), span_of(t));
        return py::make_tuple(r.threshold, r.dice);
      },
      py::arg("map"), py::arg("truth"), "Return (threshold, dice) of the best binarization.");
  m.def(
      "percentile",
      [](const Array& v, double q) {
        const auto s = span_of(v);
        return lsr::percentile(std::vector<double>(s.begin(), s.end()), q);
      },
      py::arg("values"), py::arg("q"));

  m.def(
      "sample_score", [](const Array& nll, double lambda_s) { return lsr::sample_score(to_tensor(nll), lambda_s); },
      py::arg("nll"), py::arg("lambda_s"));
  m.def(
      "restoration_mask",
      [](const Array& nll, double lambda_p) {
        const lsr::Tensor<double> t = to_tensor(nll);
        const lsr::BoolGrid mask = lsr::restoration_mask(t, lambda_p);
        lsr::Tensor<std::int32_t> out(t.shape());
        for (std::size_t i = 0; i < mask.size(); ++i) out.data()[i] = mask[i] ? 1 : 0;
        return to_array(out);
      },
      py::arg("nll"), py::arg("lambda_p"));
  m.def(
      "consolidate",
      [](const Array& original, const std::vector<Array>& restorations, double k_temp, double eps_denom) {
        lsr::ScoringConfig cfg;
        cfg.k_temp = k_temp;
        cfg.eps_denom = eps_denom;
        std::vector<lsr::Tensor<double>> rs;
        for (const Array& r : restorations) rs.push_back(to_tensor(r));
        return to_array(lsr::consolidate(to_tensor(original), rs, cfg));
      },
      py::arg("original"), py::arg("restorations"), py::arg("k_temp") = 100.0, py::arg("eps_denom") = 1e-8);
  m.def(
      "smooth", [](const Array& map) { return to_array(lsr::smooth(to_tensor(map))); }, py::arg("map"));
  m.def(
      "min_filter", [](const Array& map, int size) { return to_array(lsr::min_filter(to_tensor(map), size)); },
      py::arg("map"), py::arg("size"));
  m.def(
      "mean_filter", [](const Array& map, int size) { return to_array(lsr::mean_filter(to_tensor(map), size)); },
      py::arg("map"), py::arg("size"));

  m.def(
      "generate_volume",
      [](std::uint64_t seed, std::int64_t subject, int slices, int side) {
        const lsr::PseudoVolume v = lsr::generate_volume(seed, subject, slices, side);
        return py::make_tuple(to_array(v.slices), v.slice_positions);
      },
      py::arg("seed"), py::arg("subject_id"), py::arg("slices"), py::arg("side"),
      "Return (volume [N, side, side], slice positions).");
}
