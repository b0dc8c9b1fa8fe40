#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <json.hpp>

#include "longiseg/rng.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// Flip then affine warp about the volume centre (A_g).
struct GeometricParams {
  std::array<bool, 3> flip{false, false, false};
  std::array<double, 3> rotation{0, 0, 0};  // radians, |.| <= 0.15
  std::array<double, 3> scale{1, 1, 1};     // each in [0.9, 1.1]
  std::array<double, 3> translation{0, 0, 0};  // voxels, |.| <= 4

  void validate() const;
  bool is_identity() const;
};

/// Intensity corruption chain (A_i). gamma is any positive exponent here; the
/// random sampler keeps it inside [0.7, 1.5].
struct IntensityParams {
  double blur_sigma = 0.0;  // voxels, <= 2
  double noise_std = 0.0;
  double gamma = 1.0;
  // Coefficients of exp(poly) over normalised coordinates in [-1, 1]:
  // 1, x, y, z, x^2, y^2, z^2, xy, xz, yz (missing entries are zero).
  std::vector<double> bias_field;
  int motion_severity = 0;  // number of shifted copies blended in
  std::uint64_t seed = 0;   // noise and motion shifts

  void validate() const;
  bool is_identity() const;
};

/// Sampling ranges for random augmentation; each family can be switched off.
struct AugmentRanges {
  bool geometric = true;
  bool intensity = true;
  double flip_probability = 0.5;     // left-right (x) only
  double max_rotation = 0.15;
  double max_scale_delta = 0.1;
  double max_translation = 4.0;
  double max_blur_sigma = 1.0;
  double max_noise_std = 0.05;
  double gamma_min = 0.7;
  double gamma_max = 1.5;
  double max_bias_coefficient = 0.15;
  int max_motion_severity = 2;
  double motion_probability = 0.2;
};

void to_json(nlohmann::json& j, const AugmentRanges& r);
void from_json(const nlohmann::json& j, AugmentRanges& r);

GeometricParams sample_geometric(const AugmentRanges& ranges, Rng& rng);
IntensityParams sample_intensity(const AugmentRanges& ranges, Rng& rng);

/// Trilinear resampling with zero padding; output shape equals input shape.
Volume apply_geometric(const Volume& v, const GeometricParams& g);
/// Same transform with nearest-neighbour lookup (background outside).
LabelVolume apply_geometric(const LabelVolume& v, const GeometricParams& g);

/// blur -> noise -> gamma -> bias multiply -> motion blend.
Volume apply_intensity(const Volume& v, const IntensityParams& a);

struct DenoisingPair {
  Volume input;   // A_i(A_g(x))
  Volume target;  // A_g(x)
};

DenoisingPair make_denoising_pair(const Volume& x, const GeometricParams& g, const IntensityParams& a);

}  // namespace longiseg
