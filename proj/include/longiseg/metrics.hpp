#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "longiseg/dataset.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

using Mask = std::vector<std::uint8_t>;

/// 2|a∩b| / (|a|+|b|); 1 when both are empty.
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);
/// |a∩b| / |a∪b|; 1 when both are empty.
double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

/// Foreground voxels with at least one background 6-neighbour (outside counts as background).
Mask boundary(std::span<const std::uint8_t> mask, const Index3& dims);

/// Squared Euclidean distance (in mm²) from every voxel to the nearest set
/// voxel of `sites`; +inf everywhere when `sites` is empty.
std::vector<double> squared_distance_transform(std::span<const std::uint8_t> sites, const Index3& dims,
                                               const Spacing& spacing);

/// 95th percentile (linear interpolation at rank 0.95(n-1)) of the pooled
/// boundary-to-boundary distances in both directions, in mm. nullopt when
/// either mask is empty.
std::optional<double> hd95(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                           const Index3& dims, const Spacing& spacing);

/// Linear-interpolation percentile of unsorted values, q in [0, 1].
double percentile(std::vector<double> values, double q);

/// Mean over foreground labels of the per-label Dice between two segmentations.
double stcs(const LabelVolume& s1, const LabelVolume& s2);

/// 100 |v2 - v1| / (0.5 (v1 + v2)); needs v1 + v2 > 0.
double aspc(double v1, double v2);

/// Voxel count times voxel volume.
double label_volume_mm3(const LabelVolume& labels, int label);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 below two values
  double median = 0.0;
  int count = 0;
};

Summary summarize(const std::vector<double>& values);

struct ImageMetrics {
  std::string subject;
  double age = 0.0;
  std::vector<double> dice;                 // per foreground label (index 0 = label 1)
  std::vector<double> iou;
  std::vector<std::optional<double>> hd95;  // nullopt: undefined (empty mask)
};

struct PairMetrics {
  std::string subject;
  double age_j = 0.0, age_k = 0.0;
  std::vector<double> stcs;                 // per foreground label
  std::vector<std::optional<double>> aspc;  // nullopt when both volumes are zero
};

struct MetricReport {
  std::string split;
  int num_labels = 0;
  std::vector<ImageMetrics> images;
  std::vector<PairMetrics> pairs;

  /// Mean over labels per image / pair, summarised over images / pairs.
  Summary mean_dice() const;
  Summary mean_iou() const;
  Summary mean_hd95() const;
  Summary mean_stcs() const;
  Summary mean_aspc() const;

  nlohmann::json to_json() const;
  /// Writes <path> (JSON), <stem>_images.csv and <stem>_per_label.csv beside it.
  void write(const std::filesystem::path& path) const;
};

using Segmenter = std::function<LabelVolume(const Volume&)>;

/// Performance over every labelled image of the split; consistency (STCS,
/// ASPC) over adjacent timepoints of subjects with at least two scans.
MetricReport evaluate_split(const Segmenter& segment, const DatasetManifest& manifest,
                            const std::string& split);

}  // namespace longiseg
