#pragma once

// Synthetic pseudo-volumes with ground-truth anomalies, subject-wise
// normalization and training-time augmentation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lsr/rng.hpp"
#include "lsr/tensor.hpp"

namespace lsr {

struct PseudoVolume {
  std::int64_t subject_id = 0;
  Tensor<double> slices;                // [N, side, side]
  std::vector<double> slice_positions;  // i/(N-1) - 0.5

  int num_slices() const { return slices.rank() == 3 ? slices.dim(0) : 0; }
  int side() const { return slices.rank() == 3 ? slices.dim(1) : 0; }
  Tensor<double> slice(int i) const;
  void set_slice(int i, const Tensor<double>& image);
};

enum class AnomalyShape { Disk, Square };

std::string to_string(AnomalyShape shape);
AnomalyShape anomaly_shape_from_string(const std::string& name);

/// One anomaly, applied to slices [slice_begin, slice_end) of a volume.
/// For a square, `radius` is the half side length (side = 2*radius + 1).
struct AnomalySpec {
  AnomalyShape shape = AnomalyShape::Disk;
  int center_y = 0;
  int center_x = 0;
  int radius = 0;
  double intensity_delta = 0.0;
  int slice_begin = 0;
  int slice_end = 0;
};

struct AnomalyRanges {
  int radius_min = 3;
  int radius_max = 8;
  double delta_min = 0.5;  // |delta|, normalized units
  double delta_max = 2.0;
  int span_min = 4;        // number of affected slices
  int span_max = 8;
  double clamp_min = -6.0;  // valid normalized intensity range
  double clamp_max = 6.0;
  void validate(int side, int n_slices) const;
};

/// Deterministic rendering of `n_subjects` normal volumes. Subject ids are
/// first_subject, first_subject+1, ...; each depends only on (seed, id).
std::vector<PseudoVolume> generate_normal(std::uint64_t seed, int n_subjects, int n_slices, int side,
                                          std::int64_t first_subject = 0);
PseudoVolume generate_volume(std::uint64_t seed, std::int64_t subject_id, int n_slices, int side);

/// Pixel mask of the anomaly shape on a side x side image; throws IndexError
/// when the shape leaves the image.
Tensor<std::int32_t> anomaly_mask(const AnomalySpec& spec, int side);

/// Shift intensities inside the shape on one image, clamped to [lo, hi].
/// Returns the mask of the shape.
Tensor<std::int32_t> inject_anomaly(Tensor<double>& image, const AnomalySpec& spec, double lo, double hi);

struct InjectedVolume {
  PseudoVolume volume;
  std::vector<Tensor<std::int32_t>> masks;  // one per slice, empty shape outside the span
};

/// Apply `spec` to every slice in its span. Masks for unaffected slices are all zero.
InjectedVolume inject_anomaly(const PseudoVolume& volume, const AnomalySpec& spec, double lo, double hi);

/// Draw a random anomaly spec that fits the image and the volume.
AnomalySpec sample_anomaly_spec(Rng& rng, const AnomalyRanges& ranges, int side, int n_slices);

/// Subject-wise standardization: (x - mean) / std over the whole volume.
PseudoVolume normalize(const PseudoVolume& volume);

struct AugmentConfig {
  double p_affine = 0.0;
  double p_blur = 0.0;
  double p_brightness = 0.0;
  double p_contrast = 0.0;
  double p_noise = 0.0;
  double p_elastic = 0.0;
  double max_rotation_deg = 15.0;
  double scale_min = 0.9;
  double scale_max = 1.1;
  double blur_sigma_max = 1.5;
  double brightness = 0.1;
  double contrast_min = 0.9;
  double contrast_max = 1.1;
  double noise_sigma = 0.05;
  double elastic_max_px = 3.0;
  void validate() const;
  bool any() const;
};

template <class T>
Tensor<T> augment(const Tensor<T>& image, Rng& rng, const AugmentConfig& cfg);

/// Individual transforms, exposed for testing.
namespace transforms {
template <class T>
Tensor<T> affine(const Tensor<T>& image, double angle_rad, double scale);
template <class T>
Tensor<T> gaussian_blur(const Tensor<T>& image, double sigma);
template <class T>
Tensor<T> warp(const Tensor<T>& image, const Tensor<double>& dy, const Tensor<double>& dx);
Tensor<double> displacement_field(Rng& rng, int side, double max_px, int coarse = 5);
}  // namespace transforms

}  // namespace lsr
