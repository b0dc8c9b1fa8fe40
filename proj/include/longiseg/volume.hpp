#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace longiseg {

using Index3 = std::array<int, 3>;
using Spacing = std::array<double, 3>;

/// Scalar or multi-channel image stored as [W, H, D, C] row-major (channel fastest).
class Volume {
 public:
  Volume() = default;
  Volume(std::array<int, 4> dims, Spacing spacing, std::vector<float> data, std::string id = {});
  /// Zero-filled volume.
  Volume(std::array<int, 4> dims, Spacing spacing, std::string id = {});

  const std::array<int, 4>& dims() const noexcept { return dims_; }
  Index3 spatial() const noexcept { return {dims_[0], dims_[1], dims_[2]}; }
  int channels() const noexcept { return dims_[3]; }
  const Spacing& spacing() const noexcept { return spacing_; }
  const std::string& id() const noexcept { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  std::size_t voxel_count() const noexcept {
    return static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
  }
  std::size_t offset(int w, int h, int d, int c = 0) const noexcept {
    return ((static_cast<std::size_t>(w) * dims_[1] + h) * dims_[2] + d) * dims_[3] + c;
  }
  float& at(int w, int h, int d, int c = 0) { return data_[offset(w, h, d, c)]; }
  float at(int w, int h, int d, int c = 0) const { return data_[offset(w, h, d, c)]; }

  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }

  friend bool operator==(const Volume& a, const Volume& b) {
    return a.dims_ == b.dims_ && a.spacing_ == b.spacing_ && a.data_ == b.data_;
  }

 private:
  std::array<int, 4> dims_{1, 1, 1, 1};
  Spacing spacing_{1.0, 1.0, 1.0};
  std::vector<float> data_ = std::vector<float>(1, 0.0f);
  std::string id_;
};

/// Integer segmentation map stored as [W, H, D] row-major.
class LabelVolume {
 public:
  LabelVolume() = default;
  LabelVolume(Index3 dims, int num_labels, std::vector<std::uint16_t> data, Spacing spacing = {1, 1, 1});
  LabelVolume(Index3 dims, int num_labels, Spacing spacing = {1, 1, 1});

  const Index3& dims() const noexcept { return dims_; }
  int num_labels() const noexcept { return num_labels_; }
  const Spacing& spacing() const noexcept { return spacing_; }
  std::size_t voxel_count() const noexcept {
    return static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
  }
  std::size_t offset(int w, int h, int d) const noexcept {
    return (static_cast<std::size_t>(w) * dims_[1] + h) * dims_[2] + d;
  }
  std::uint16_t& at(int w, int h, int d) { return data_[offset(w, h, d)]; }
  std::uint16_t at(int w, int h, int d) const { return data_[offset(w, h, d)]; }

  std::span<std::uint16_t> values() noexcept { return data_; }
  std::span<const std::uint16_t> values() const noexcept { return data_; }

  /// Binary mask of one label.
  std::vector<std::uint8_t> mask(int label) const;
  /// Voxel count of one label.
  std::size_t count(int label) const;

  friend bool operator==(const LabelVolume& a, const LabelVolume& b) {
    return a.dims_ == b.dims_ && a.num_labels_ == b.num_labels_ && a.data_ == b.data_;
  }

 private:
  Index3 dims_{1, 1, 1};
  int num_labels_ = 1;
  std::vector<std::uint16_t> data_ = std::vector<std::uint16_t>(1, 0);
  Spacing spacing_{1.0, 1.0, 1.0};
};

struct Timepoint {
  double age = 0.0;
  Volume image;
  std::optional<LabelVolume> label;
};

/// Registered scans of one subject ordered by age.
struct SubjectTimeSeries {
  std::string subject_id;
  std::vector<Timepoint> timepoints;
  int reference_timepoint = 0;

  /// Throws on empty series, non-increasing ages, or shape/spacing disagreement.
  void validate() const;
};

Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& volume, const std::filesystem::path& path);

/// num_labels <= 0 infers max(value) + 1.
LabelVolume load_label_volume(const std::filesystem::path& path, int num_labels = 0);
void save_label_volume(const LabelVolume& labels, const std::filesystem::path& path);

/// Sub-volume [offset, offset + size) of every channel.
Volume crop(const Volume& v, const Index3& offset, const Index3& size);
LabelVolume crop(const LabelVolume& v, const Index3& offset, const Index3& size);

struct CorrespondingCrops {
  Volume crop_j;
  Volume crop_k;
  Index3 offset{};
};

/// Crops timepoints j and k at one shared, uniformly drawn offset.
CorrespondingCrops corresponding_crops(const SubjectTimeSeries& series, int j, int k,
                                       const Index3& size, std::uint64_t rng_seed);

/// Offset drawn uniformly over the valid range for a crop of `size` from `dims`.
Index3 sample_crop_offset(const Index3& dims, const Index3& size, std::uint64_t rng_seed);

}  // namespace longiseg
