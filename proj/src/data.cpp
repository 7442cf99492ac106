#include "lsr/data.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace lsr {

Tensor<double> PseudoVolume::slice(int i) const {
  if (i < 0 || i >= num_slices()) throw IndexError("slice index " + std::to_string(i) + " out of range");
  const std::size_t per = static_cast<std::size_t>(side()) * side();
  std::vector<double> v(slices.data() + i * per, slices.data() + (i + 1) * per);
  return Tensor<double>(Shape{side(), side()}, std::move(v));
}

void PseudoVolume::set_slice(int i, const Tensor<double>& image) {
  if (i < 0 || i >= num_slices()) throw IndexError("slice index " + std::to_string(i) + " out of range");
  if (image.shape() != Shape{side(), side()}) throw ShapeError("slice shape " + shape_str(image.shape()));
  std::copy(image.values().begin(), image.values().end(), slices.data() + i * image.size());
}

std::string to_string(AnomalyShape shape) { return shape == AnomalyShape::Disk ? "disk" : "square"; }

AnomalyShape anomaly_shape_from_string(const std::string& name) {
  if (name == "disk") return AnomalyShape::Disk;
  if (name == "square") return AnomalyShape::Square;
  throw ValueError("unknown anomaly shape '" + name + "' (expected disk or square)");
}

void AnomalyRanges::validate(int side, int n_slices) const {
  if (radius_min < 0 || radius_max < radius_min) throw ValueError("anomaly radius range is invalid");
  if (2 * radius_max + 1 > side) throw ValueError("anomaly radius_max does not fit the image side");
  if (!(delta_min > 0.0) || delta_max < delta_min) throw ValueError("anomaly |delta| range must satisfy 0 < min <= max");
  if (span_min < 1 || span_max < span_min || span_max > n_slices) throw ValueError("anomaly slice span range is invalid");
  if (!(clamp_min < clamp_max)) throw ValueError("anomaly clamp range is empty");
}

namespace {

struct Organ {
  double cy, cx;      // fraction of side
  double ry, rx;      // fraction of side
  double angle;
  double intensity;
  double profile_center;  // slice position of maximal extent
  double profile_rate;
  double intensity_phase;
};

struct Wave {
  double fy, fx, phase, amplitude;
};

constexpr double kPi = std::numbers::pi;

// Smoothly saturating ellipse indicator with an edge about one pixel wide.
double soft_ellipse(double y, double x, double cy, double cx, double ry, double rx, double angle, double edge_px) {
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double dy = y - cy;
  const double dx = x - cx;
  const double u = (c * dx + s * dy) / rx;
  const double v = (-s * dx + c * dy) / ry;
  const double d = std::sqrt(u * u + v * v);
  const double signed_px = (1.0 - d) * std::min(rx, ry);
  return std::clamp(0.5 + signed_px / edge_px, 0.0, 1.0);
}

}  // namespace

PseudoVolume generate_volume(std::uint64_t seed, std::int64_t subject_id, int n_slices, int side) {
  if (n_slices < 2) throw DimensionError("a pseudo-volume needs at least 2 slices");
  if (side < 8) throw DimensionError("image side must be >= 8");
  Rng rng(seed, "subject", {static_cast<std::uint64_t>(subject_id)});

  // Shared anatomy template; subjects differ by jitter and organ count.
  static constexpr double kTemplate[4][5] = {
      {0.40, 0.36, 0.12, 0.10, 0.80},
      {0.40, 0.64, 0.11, 0.12, 0.65},
      {0.66, 0.50, 0.09, 0.18, 0.95},
      {0.28, 0.50, 0.07, 0.07, 0.50},
  };
  const int n_organs = 2 + static_cast<int>(rng.uniform_int(3));
  std::vector<Organ> organs;
  for (int k = 0; k < n_organs; ++k) {
    Organ o;
    o.cy = kTemplate[k][0] + rng.uniform(-0.03, 0.03);
    o.cx = kTemplate[k][1] + rng.uniform(-0.03, 0.03);
    o.ry = kTemplate[k][2] * rng.uniform(0.85, 1.15);
    o.rx = kTemplate[k][3] * rng.uniform(0.85, 1.15);
    o.angle = rng.uniform(-0.3, 0.3);
    o.intensity = kTemplate[k][4] + rng.uniform(-0.06, 0.06);
    o.profile_center = rng.uniform(-0.15, 0.15);
    o.profile_rate = rng.uniform(1.0, 1.6);
    o.intensity_phase = rng.uniform(0.0, 2.0 * kPi);
    organs.push_back(o);
  }
  const double body_ry = 0.40 * rng.uniform(0.95, 1.05);
  const double body_rx = 0.44 * rng.uniform(0.95, 1.05);
  const double body_intensity = 0.30 + rng.uniform(-0.03, 0.03);

  PseudoVolume vol;
  vol.subject_id = subject_id;
  vol.slices = Tensor<double>(Shape{n_slices, side, side});
  vol.slice_positions.resize(static_cast<std::size_t>(n_slices));
  const double s = static_cast<double>(side);
  for (int z = 0; z < n_slices; ++z) {
    const double p = static_cast<double>(z) / static_cast<double>(n_slices - 1) - 0.5;
    vol.slice_positions[z] = p;
    Rng noise_rng(seed, "slice-noise", {static_cast<std::uint64_t>(subject_id), static_cast<std::uint64_t>(z)});
    std::vector<Wave> waves(4);
    for (auto& w : waves) {
      w.fy = noise_rng.uniform(-2.0, 2.0);
      w.fx = noise_rng.uniform(-2.0, 2.0);
      w.phase = noise_rng.uniform(0.0, 2.0 * kPi);
      w.amplitude = noise_rng.uniform(0.005, 0.015);
    }
    const double body_scale = 0.9 + 0.1 * std::cos(kPi * p);
    double* out = vol.slices.data() + static_cast<std::size_t>(z) * side * side;
    for (int yi = 0; yi < side; ++yi) {
      for (int xi = 0; xi < side; ++xi) {
        const double y = (yi + 0.5) / s;
        const double x = (xi + 0.5) / s;
        double v = body_intensity * soft_ellipse(y * s, x * s, 0.5 * s, 0.5 * s, body_ry * body_scale * s,
                                                 body_rx * body_scale * s, 0.0, 1.5);
        for (const Organ& o : organs) {
          const double extent = 0.65 + 0.35 * std::cos(kPi * o.profile_rate * (p - o.profile_center));
          const double inten = o.intensity + 0.06 * std::sin(kPi * p + o.intensity_phase);
          const double a = soft_ellipse(y * s, x * s, o.cy * s, o.cx * s, o.ry * extent * s, o.rx * extent * s,
                                        o.angle, 1.5);
          v = v * (1.0 - a) + inten * a;
        }
        for (const Wave& w : waves) v += w.amplitude * std::cos(2.0 * kPi * (w.fy * y + w.fx * x) + w.phase);
        out[static_cast<std::size_t>(yi) * side + xi] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return vol;
}

std::vector<PseudoVolume> generate_normal(std::uint64_t seed, int n_subjects, int n_slices, int side,
                                          std::int64_t first_subject) {
  if (n_subjects < 0) throw ValueError("n_subjects must be >= 0");
  std::vector<PseudoVolume> out;
  out.reserve(static_cast<std::size_t>(n_subjects));
  for (int i = 0; i < n_subjects; ++i) out.push_back(generate_volume(seed, first_subject + i, n_slices, side));
  return out;
}

Tensor<std::int32_t> anomaly_mask(const AnomalySpec& spec, int side) {
  const int r = spec.radius;
  if (r < 0) throw ValueError("anomaly radius must be >= 0");
  if (spec.center_y - r < 0 || spec.center_x - r < 0 || spec.center_y + r >= side || spec.center_x + r >= side) {
    throw IndexError("anomaly at (" + std::to_string(spec.center_y) + ", " + std::to_string(spec.center_x) +
                     ") with radius " + std::to_string(r) + " leaves the " + std::to_string(side) + "px image");
  }
  Tensor<std::int32_t> mask(Shape{side, side});
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const bool inside = spec.shape == AnomalyShape::Square || dy * dy + dx * dx <= r * r;
      if (inside) mask.at(spec.center_y + dy, spec.center_x + dx) = 1;
    }
  }
  return mask;
}

Tensor<std::int32_t> inject_anomaly(Tensor<double>& image, const AnomalySpec& spec, double lo, double hi) {
  if (image.rank() != 2 || image.dim(0) != image.dim(1)) throw ShapeError("inject_anomaly expects a square image");
  Tensor<std::int32_t> mask = anomaly_mask(spec, image.dim(0));
  for (std::size_t i = 0; i < image.size(); ++i) {
    if (mask[i]) image[i] = std::clamp(image[i] + spec.intensity_delta, lo, hi);
  }
  return mask;
}

InjectedVolume inject_anomaly(const PseudoVolume& volume, const AnomalySpec& spec, double lo, double hi) {
  if (spec.slice_begin < 0 || spec.slice_end > volume.num_slices() || spec.slice_begin >= spec.slice_end) {
    throw IndexError("anomaly slice span [" + std::to_string(spec.slice_begin) + ", " +
                     std::to_string(spec.slice_end) + ") is outside the volume");
  }
  InjectedVolume out{volume, {}};
  const int side = volume.side();
  for (int z = 0; z < volume.num_slices(); ++z) {
    if (z < spec.slice_begin || z >= spec.slice_end) {
      out.masks.emplace_back(Shape{side, side});
      continue;
    }
    Tensor<double> img = volume.slice(z);
    out.masks.push_back(inject_anomaly(img, spec, lo, hi));
    out.volume.set_slice(z, img);
  }
  return out;
}

AnomalySpec sample_anomaly_spec(Rng& rng, const AnomalyRanges& ranges, int side, int n_slices) {
  ranges.validate(side, n_slices);
  AnomalySpec spec;
  spec.shape = rng.bernoulli(0.5) ? AnomalyShape::Disk : AnomalyShape::Square;
  spec.radius = ranges.radius_min + static_cast<int>(rng.uniform_int(ranges.radius_max - ranges.radius_min + 1));
  // Keep anomalies inside the central region where the anatomy lives.
  int lo = std::max(spec.radius, side / 5);
  int hi = std::min(side - 1 - spec.radius, side - 1 - side / 5);
  if (hi < lo) {
    lo = spec.radius;
    hi = side - 1 - spec.radius;
  }
  spec.center_y = lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
  spec.center_x = lo + static_cast<int>(rng.uniform_int(hi - lo + 1));
  const double magnitude = rng.uniform(ranges.delta_min, ranges.delta_max);
  spec.intensity_delta = rng.bernoulli(0.5) ? magnitude : -magnitude;
  const int span = ranges.span_min + static_cast<int>(rng.uniform_int(ranges.span_max - ranges.span_min + 1));
  spec.slice_begin = static_cast<int>(rng.uniform_int(n_slices - span + 1));
  spec.slice_end = spec.slice_begin + span;
  return spec;
}

PseudoVolume normalize(const PseudoVolume& volume) {
  const std::size_t n = volume.slices.size();
  if (n == 0) throw ValueError("cannot normalize an empty volume");
  double mean = 0.0;
  for (double v : volume.slices.values()) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : volume.slices.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double sd = std::sqrt(var);
  if (!(sd > 0.0) || sd < 1e-12 * std::max(1.0, std::abs(mean))) {
    throw ZeroVarianceError("subject " + std::to_string(volume.subject_id) + " has zero intensity variance");
  }
  PseudoVolume out = volume;
  for (double& v : out.slices.values()) v = (v - mean) / sd;
  return out;
}

void AugmentConfig::validate() const {
  for (double p : {p_affine, p_blur, p_brightness, p_contrast, p_noise, p_elastic}) {
    if (!(p >= 0.0 && p <= 1.0)) throw ValueError("augmentation probabilities must lie in [0, 1]");
  }
  if (max_rotation_deg < 0.0 || scale_min <= 0.0 || scale_max < scale_min) throw ValueError("invalid affine ranges");
  if (blur_sigma_max < 0.0 || brightness < 0.0 || noise_sigma < 0.0 || elastic_max_px < 0.0) {
    throw ValueError("augmentation magnitudes must be >= 0");
  }
  if (contrast_min <= 0.0 || contrast_max < contrast_min) throw ValueError("invalid contrast range");
}

bool AugmentConfig::any() const {
  return p_affine > 0 || p_blur > 0 || p_brightness > 0 || p_contrast > 0 || p_noise > 0 || p_elastic > 0;
}

namespace transforms {

namespace {

template <class T>
double bilinear(const Tensor<T>& img, double y, double x) {
  const int h = img.dim(0);
  const int w = img.dim(1);
  y = std::clamp(y, 0.0, static_cast<double>(h - 1));
  x = std::clamp(x, 0.0, static_cast<double>(w - 1));
  const int y0 = std::min(static_cast<int>(std::floor(y)), h - 1);
  const int x0 = std::min(static_cast<int>(std::floor(x)), w - 1);
  const int y1 = std::min(y0 + 1, h - 1);
  const int x1 = std::min(x0 + 1, w - 1);
  const double fy = y - y0;
  const double fx = x - x0;
  const double top = (1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1);
  const double bottom = (1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1);
  return (1 - fy) * top + fy * bottom;
}

template <class T>
void check_image(const Tensor<T>& image) {
  if (image.rank() != 2) throw ShapeError("expected a 2D image, got " + shape_str(image.shape()));
}

}  // namespace

template <class T>
Tensor<T> affine(const Tensor<T>& image, double angle_rad, double scale) {
  check_image(image);
  const int h = image.dim(0);
  const int w = image.dim(1);
  const double cy = (h - 1) / 2.0;
  const double cx = (w - 1) / 2.0;
  const double c = std::cos(angle_rad);
  const double s = std::sin(angle_rad);
  Tensor<T> out(image.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: output pixel -> source location.
      const double dy = (y - cy) / scale;
      const double dx = (x - cx) / scale;
      const double sy = cy + c * dy - s * dx;
      const double sx = cx + s * dy + c * dx;
      out.at(y, x) = static_cast<T>(bilinear(image, sy, sx));
    }
  }
  return out;
}

template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& image, double sigma) {
  check_image(image);
  if (sigma <= 1e-3) return image;
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0.0;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += k[i + r];
  }
  for (double& v : k) v /= total;
  const int h = image.dim(0);
  const int w = image.dim(1);
  Tensor<double> tmp(image.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * image.at(y, std::clamp(x + i, 0, w - 1));
      tmp.at(y, x) = acc;
    }
  }
  Tensor<T> out(image.shape());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(std::clamp(y + i, 0, h - 1), x);
      out.at(y, x) = static_cast<T>(acc);
    }
  }
  return out;
}

Tensor<double> displacement_field(Rng& rng, int side, double max_px, int coarse) {
  Tensor<double> grid(Shape{coarse, coarse});
  for (double& v : grid.values()) v = rng.uniform(-1.0, 1.0);
  Tensor<double> field(Shape{side, side});
  double peak = 0.0;
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      const double gy = static_cast<double>(y) * (coarse - 1) / std::max(side - 1, 1);
      const double gx = static_cast<double>(x) * (coarse - 1) / std::max(side - 1, 1);
      field.at(y, x) = bilinear(grid, gy, gx);
      peak = std::max(peak, std::abs(field.at(y, x)));
    }
  }
  if (peak > 0.0) {
    for (double& v : field.values()) v *= max_px / peak;
  }
  return field;
}

template <class T>
Tensor<T> warp(const Tensor<T>& image, const Tensor<double>& dy, const Tensor<double>& dx) {
  check_image(image);
  if (dy.shape() != image.shape() || dx.shape() != image.shape()) throw ShapeError("displacement field shape");
  Tensor<T> out(image.shape());
  for (int y = 0; y < image.dim(0); ++y) {
    for (int x = 0; x < image.dim(1); ++x) {
      out.at(y, x) = static_cast<T>(bilinear(image, y + dy.at(y, x), x + dx.at(y, x)));
    }
  }
  return out;
}

}  // namespace transforms

template <class T>
Tensor<T> augment(const Tensor<T>& image, Rng& rng, const AugmentConfig& cfg) {
  cfg.validate();
  if (image.rank() != 2) throw ShapeError("augment expects a 2D image");
  Tensor<T> out = image;
  // Every gate draws its parameters whether or not it fires, so the random
  // stream consumed per image does not depend on earlier gate outcomes.
  const bool do_affine = rng.bernoulli(cfg.p_affine);
  const double angle = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg) * kPi / 180.0;
  const double scale = rng.uniform(cfg.scale_min, cfg.scale_max);
  const bool do_elastic = rng.bernoulli(cfg.p_elastic);
  const double elastic_amount = rng.uniform(0.0, cfg.elastic_max_px);
  const bool do_blur = rng.bernoulli(cfg.p_blur);
  const double sigma = rng.uniform(0.0, cfg.blur_sigma_max);
  const bool do_contrast = rng.bernoulli(cfg.p_contrast);
  const double contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
  const bool do_brightness = rng.bernoulli(cfg.p_brightness);
  const double brightness = rng.uniform(-cfg.brightness, cfg.brightness);
  const bool do_noise = rng.bernoulli(cfg.p_noise);

  if (do_affine) out = transforms::affine(out, angle, scale);
  if (do_elastic && elastic_amount > 0.0) {
    const Tensor<double> fy = transforms::displacement_field(rng, out.dim(0), elastic_amount);
    const Tensor<double> fx = transforms::displacement_field(rng, out.dim(0), elastic_amount);
    out = transforms::warp(out, fy, fx);
  }
  if (do_blur) out = transforms::gaussian_blur(out, sigma);
  if (do_contrast) {
    double mean = 0.0;
    for (T v : out.values()) mean += static_cast<double>(v);
    mean /= static_cast<double>(out.size());
    for (T& v : out.values()) v = static_cast<T>(mean + contrast * (static_cast<double>(v) - mean));
  }
  if (do_brightness) {
    for (T& v : out.values()) v = static_cast<T>(static_cast<double>(v) + brightness);
  }
  if (do_noise) {
    for (T& v : out.values()) v = static_cast<T>(static_cast<double>(v) + cfg.noise_sigma * rng.normal());
  }
  return out;
}

template Tensor<float> augment(const Tensor<float>&, Rng&, const AugmentConfig&);
template Tensor<double> augment(const Tensor<double>&, Rng&, const AugmentConfig&);
template Tensor<float> transforms::affine(const Tensor<float>&, double, double);
template Tensor<double> transforms::affine(const Tensor<double>&, double, double);
template Tensor<float> transforms::gaussian_blur(const Tensor<float>&, double);
template Tensor<double> transforms::gaussian_blur(const Tensor<double>&, double);
template Tensor<float> transforms::warp(const Tensor<float>&, const Tensor<double>&, const Tensor<double>&);
template Tensor<double> transforms::warp(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&);

}  // namespace lsr
