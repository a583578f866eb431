// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/priors.hpp"
#include "gssd/tensor.hpp"

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace gssd {

inline constexpr float kHuWindowLow = -100.0f;
inline constexpr float kHuWindowHigh = 400.0f;
/// Phase order: precontrast, arterial, portal, delayed.
inline constexpr int kPortalPhase = 2;

/// Clamp to the liver window [-100, 400] HU and map linearly onto [0, 1].
float window_hu(float hu);
void window_hu(std::span<const float> hu, std::span<float> out);

/// Aligned multi-phase HU volume, stored phase-major then z-major row-major.
struct PhaseVolume {
  Index phases = 0, depth = 0, height = 0, width = 0;
  Eigen::ArrayXf hu;
  float vendor_bias = 0;

  PhaseVolume() = default;
  PhaseVolume(Index p, Index d, Index h, Index w, float fill = 0)
      : phases(p), depth(d), height(h), width(w), hu(Eigen::ArrayXf::Constant(p * d * h * w, fill)) {}

  float &at(Index p, Index z, Index y, Index x) { return hu[((p * depth + z) * height + y) * width + x]; }
  float at(Index p, Index z, Index y, Index x) const {
    return hu[((p * depth + z) * height + y) * width + x];
  }
  const float *slice(Index p, Index z) const { return hu.data() + (p * depth + z) * height * width; }
};

/// Phase-level label: the same box on every slice in [z_start, z_end].
struct WeakLabel {
  int phase = 0;
  int z_start = 0, z_end = 0;
  BoundingBox box;
  int label = 1;
};

enum class InputMode {
  MultiPhase,
  PortalOnly,  // portal slices copied into every phase block
};

struct Sample {
  Tensor<float> input;  // [phases * 3, H, W], phase-major then slice
  std::vector<GroundTruth> gts;
  int center_z = 0;
  int volume = 0;
};

/// Three consecutive slices z-1, z, z+1 for every phase (edges repeated),
/// bias-corrected and windowed, concatenated phase-major.
Tensor<float> stack_phases(const PhaseVolume &pv, Index z, InputMode mode = InputMode::MultiPhase);

/// Ground truths of one slice: per-phase boxes of the same lesion (IoU >= 0.3,
/// same class, different phases) are merged by coordinate-wise union.
std::vector<GroundTruth> slice_ground_truths(std::span<const WeakLabel> labels, int z);

/// Multiplicative coordinate noise z_i ~ U(1-alpha, 1+alpha), then re-clamped
/// and re-ordered.
std::vector<GroundTruth> jitter_boxes(const std::vector<GroundTruth> &gts, double alpha, std::mt19937_64 &rng);

struct AugmentConfig {
  double mirror_prob = 0.5;
  double scale_prob = 0.5;
  double scale_min = 0.5;
  double scale_max = 1.5;
  double photometric_prob = 0.5;
  double brightness = 0.05;  // additive, in windowed units
  double contrast = 0.1;     // multiplicative half-range
  double min_area_px = 10;
  int max_tries = 50;
};

/// Random mirror, scale with crop/pad back to the input size (keeping at
/// least one ground-truth center), brightness/contrast jitter. The same
/// geometric transform is applied to every channel.
Sample augment(const Sample &sample, std::mt19937_64 &rng, const AugmentConfig &cfg);

/// Horizontal reflection of a normalized box.
BoundingBox mirror_box(const BoundingBox &b);

struct LesionSpec {
  double z = 0, y = 0, x = 0;  // center in voxels
  double radius = 8;           // in-plane voxels
  std::vector<float> delta;    // HU change per phase
};

struct PhantomSpec {
  Index phases = 4, depth = 40, height = 128, width = 128;
  double slice_spacing = 2.5;  // slice thickness over pixel size
  float background_hu = 30;
  float liver_hu = 60;
  Eigen::Vector3d liver_center{0.5, 0.5, 0.5};  // z, y, x as fractions of the volume
  Eigen::Vector3d liver_radii{0.45, 0.32, 0.38};
  float noise_sigma = 10;
  float vendor_bias = 0;
  std::vector<LesionSpec> lesions;

  /// Throws ConfigError naming the first lesion outside the liver.
  void validate() const;
};

struct Phantom {
  PhaseVolume volume;
  std::vector<WeakLabel> labels;
};

/// Soft tissue background, liver ellipsoid, spherical lesions (anisotropic in
/// voxels by slice_spacing) with per-phase HU deltas, Gaussian noise. Labels
/// are the tight box of each lesion's widest cross-section, emitted for every
/// phase over the lesion's full slice range.
Phantom generate_phantom(const PhantomSpec &spec, std::mt19937_64 &rng);

/// Lesion randomization for dataset generation.
struct LesionSampler {
  int count_min = 1, count_max = 3;
  double radius_min = 10, radius_max = 16;
  double contrast_min = 60, contrast_max = 100;
  /// Fraction of lesions with no portal-phase contrast.
  double portal_hidden_fraction = 0.0;
  int max_tries = 200;
};

std::vector<LesionSpec> sample_lesions(const PhantomSpec &base, const LesionSampler &sampler,
                                       std::mt19937_64 &rng);

struct Fold {
  std::vector<std::size_t> train;  // sample indices
  std::vector<std::size_t> val;
  std::vector<int> val_volumes;
};

/// Volume-level k-fold split: every sample of a volume lands on the same side.
std::vector<Fold> split_folds(std::span<const int> sample_volume, int k, std::uint64_t seed);

} // namespace gssd
