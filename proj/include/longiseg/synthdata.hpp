#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <json.hpp>

#include "longiseg/dataset.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// Per-label mean intensities at one age; ages between knots interpolate linearly.
struct ContrastKnot {
  double age = 0.0;
  std::vector<double> means;  // one per label, background first
};

/// Nested-ellipsoid longitudinal phantom.
struct PhantomConfig {
  Index3 grid_size{32, 32, 32};
  Spacing spacing{1.0, 1.0, 1.0};
  int num_subjects = 10;
  int min_timepoints = 2;
  int max_timepoints = 5;
  std::vector<double> age_grid{0.0, 1.0, 2.0, 3.0, 4.0};  // candidate scan ages
  int num_labels = 4;  // background, outer tissue, inner tissue, core
  std::vector<ContrastKnot> contrast_schedule{{0.0, {0.0, 0.35, 0.65, 0.95}},
                                              {4.0, {0.0, 0.40, 0.70, 0.90}}};
  double growth_rate = 0.5;  // voxels of radius per unit age
  double noise_std = 0.03;
  // Outer semi-axes as a fraction of the half grid, drawn per subject and axis.
  double outer_axis_min = 0.45;
  double outer_axis_max = 0.60;
  double center_jitter = 2.0;  // voxels
  std::uint64_t rng_seed = 0;

  /// Throws ErrorKind::config, including when grown geometry could leave the grid.
  void validate() const;

  /// Label means at `age`.
  std::vector<double> contrast_at(double age) const;

  /// Three scans per subject: contrast at the first age, isointense labels 1/2
  /// at the middle age, full contrast at the last age.
  static PhantomConfig isointense_preset();
};

void to_json(nlohmann::json& j, const PhantomConfig& cfg);
void from_json(const nlohmann::json& j, PhantomConfig& cfg);

SubjectTimeSeries generate_subject(const PhantomConfig& cfg, std::uint64_t subject_seed,
                                   const std::string& subject_id = "sub");

/// Split sizes for n subjects under fractions (largest remainder, every split >= 1).
std::vector<int> split_sizes(int n, const std::vector<double>& fractions);

/// Writes <out>/<subject>/<age>_img.vol, <age>_lbl.vol and <out>/manifest.json.
/// `workers` > 1 generates subjects concurrently; output bytes do not depend on it.
DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::filesystem::path& out_dir,
                                 int workers = 1);

/// File-name form of an age: shortest round-trip decimal.
std::string format_age(double age);

}  // namespace longiseg
