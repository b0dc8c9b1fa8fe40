#include "longiseg/volume.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "longiseg/error.hpp"
#include "longiseg/rng.hpp"

namespace longiseg {

namespace {

using ordered_json = nlohmann::ordered_json;

constexpr std::size_t kMaxHeaderBytes = 1 << 16;

void check_dims(const std::array<int, 4>& dims) {
  for (int d : dims) require(d >= 1, ErrorKind::shape, "volume extents must be >= 1");
}

void check_spacing(const Spacing& spacing) {
  for (double s : spacing) {
    require(std::isfinite(s) && s > 0.0, ErrorKind::invalid, "voxel spacing must be positive");
  }
}

template <typename T>
T to_little_endian(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

struct Container {
  std::vector<int> dims;
  Spacing spacing{};
  std::string dtype;
  std::string payload;
};

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open " + path.string());
  std::string header;
  char ch;
  while (in.get(ch) && ch != '\n') {
    header.push_back(ch);
    if (header.size() > kMaxHeaderBytes) {
      throw Error(ErrorKind::format, path.string() + ": header line too long");
    }
  }
  if (!in) throw Error(ErrorKind::format, path.string() + ": missing header terminator");

  ordered_json j;
  try {
    j = ordered_json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": malformed header: " + e.what());
  }
  Container c;
  try {
    c.dims = j.at("dims").get<std::vector<int>>();
    const auto sp = j.at("spacing").get<std::vector<double>>();
    c.dtype = j.at("dtype").get<std::string>();
    const auto order = j.at("order").get<std::string>();
    require(order == "row-major", ErrorKind::format, path.string() + ": unsupported order " + order);
    require(sp.size() == 3, ErrorKind::format, path.string() + ": spacing must have 3 entries");
    std::copy(sp.begin(), sp.end(), c.spacing.begin());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": malformed header: " + e.what());
  }
  c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  return c;
}

void write_container(const std::filesystem::path& path, const ordered_json& header,
                     const void* payload, std::size_t bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  const std::string line = header.dump() + "\n";
  out.write(line.data(), static_cast<std::streamsize>(line.size()));
  out.write(static_cast<const char*>(payload), static_cast<std::streamsize>(bytes));
  if (!out) throw Error(ErrorKind::io, "write failed: " + path.string());
}

ordered_json make_header(const std::vector<int>& dims, const Spacing& spacing, const char* dtype) {
  ordered_json j;
  j["dims"] = dims;
  j["spacing"] = std::vector<double>(spacing.begin(), spacing.end());
  j["dtype"] = dtype;
  j["order"] = "row-major";
  return j;
}

}  // namespace

Volume::Volume(std::array<int, 4> dims, Spacing spacing, std::vector<float> data, std::string id)
    : dims_(dims), spacing_(spacing), data_(std::move(data)), id_(std::move(id)) {
  check_dims(dims_);
  check_spacing(spacing_);
  require(data_.size() == voxel_count() * static_cast<std::size_t>(dims_[3]), ErrorKind::shape,
          "volume data size does not match dims");
}

Volume::Volume(std::array<int, 4> dims, Spacing spacing, std::string id)
    : dims_(dims), spacing_(spacing), id_(std::move(id)) {
  check_dims(dims_);
  check_spacing(spacing_);
  data_.assign(voxel_count() * static_cast<std::size_t>(dims_[3]), 0.0f);
}

LabelVolume::LabelVolume(Index3 dims, int num_labels, std::vector<std::uint16_t> data, Spacing spacing)
    : dims_(dims), num_labels_(num_labels), data_(std::move(data)), spacing_(spacing) {
  for (int d : dims_) require(d >= 1, ErrorKind::shape, "label extents must be >= 1");
  require(num_labels_ >= 1, ErrorKind::invalid, "num_labels must be positive");
  check_spacing(spacing_);
  require(data_.size() == voxel_count(), ErrorKind::shape, "label data size does not match dims");
  for (auto v : data_) {
    require(v < num_labels_, ErrorKind::invalid,
            "label value " + std::to_string(v) + " >= num_labels " + std::to_string(num_labels_));
  }
}

LabelVolume::LabelVolume(Index3 dims, int num_labels, Spacing spacing)
    : LabelVolume(dims, num_labels,
                  std::vector<std::uint16_t>(static_cast<std::size_t>(dims[0]) * dims[1] * dims[2], 0),
                  spacing) {}

std::vector<std::uint8_t> LabelVolume::mask(int label) const {
  std::vector<std::uint8_t> m(data_.size());
  for (std::size_t i = 0; i < data_.size(); ++i) m[i] = data_[i] == label ? 1 : 0;
  return m;
}

std::size_t LabelVolume::count(int label) const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), static_cast<std::uint16_t>(label)));
}

void SubjectTimeSeries::validate() const {
  require(!timepoints.empty(), ErrorKind::data, subject_id + ": no timepoints");
  const auto& ref = timepoints.front().image;
  for (std::size_t i = 0; i < timepoints.size(); ++i) {
    const auto& tp = timepoints[i];
    if (i > 0) {
      require(tp.age > timepoints[i - 1].age, ErrorKind::data,
              subject_id + ": ages must be strictly increasing");
    }
    require(tp.image.dims() == ref.dims() && tp.image.spacing() == ref.spacing(), ErrorKind::data,
            subject_id + ": timepoints differ in shape or spacing (not registered)");
    if (tp.label) {
      require(tp.label->dims() == tp.image.spatial(), ErrorKind::data,
              subject_id + ": label shape differs from image");
    }
  }
  require(reference_timepoint >= 0 && reference_timepoint < static_cast<int>(timepoints.size()),
          ErrorKind::data, subject_id + ": reference timepoint out of range");
}

Volume load_volume(const std::filesystem::path& path) {
  Container c = read_container(path);
  require(c.dtype == "f32", ErrorKind::format, path.string() + ": expected dtype f32, got " + c.dtype);
  require(c.dims.size() == 4, ErrorKind::format, path.string() + ": dims must have 4 entries");
  std::array<int, 4> dims{c.dims[0], c.dims[1], c.dims[2], c.dims[3]};
  for (int d : dims) require(d >= 1, ErrorKind::format, path.string() + ": non-positive dims");
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2] * dims[3];
  if (c.payload.size() != n * sizeof(float)) {
    throw Error(ErrorKind::format, path.string() + ": payload size mismatch (expected " +
                                       std::to_string(n * sizeof(float)) + " bytes, found " +
                                       std::to_string(c.payload.size()) + ")");
  }
  std::vector<float> data(n);
  std::memcpy(data.data(), c.payload.data(), c.payload.size());
  for (auto& v : data) {
    v = to_little_endian(v);
    require(std::isfinite(v), ErrorKind::format, path.string() + ": NaN/Inf in payload");
  }
  for (double s : c.spacing) {
    require(std::isfinite(s) && s > 0.0, ErrorKind::format, path.string() + ": non-positive spacing");
  }
  return Volume(dims, c.spacing, std::move(data), path.stem().string());
}

void save_volume(const Volume& volume, const std::filesystem::path& path) {
  const auto& d = volume.dims();
  auto header = make_header({d[0], d[1], d[2], d[3]}, volume.spacing(), "f32");
  if constexpr (std::endian::native == std::endian::little) {
    write_container(path, header, volume.values().data(), volume.values().size_bytes());
  } else {
    std::vector<float> le(volume.values().begin(), volume.values().end());
    for (auto& v : le) v = to_little_endian(v);
    write_container(path, header, le.data(), le.size() * sizeof(float));
  }
}

LabelVolume load_label_volume(const std::filesystem::path& path, int num_labels) {
  Container c = read_container(path);
  require(c.dtype == "u16", ErrorKind::format, path.string() + ": expected dtype u16, got " + c.dtype);
  require(c.dims.size() == 4 && c.dims[3] == 1, ErrorKind::format,
          path.string() + ": label dims must be [W,H,D,1]");
  Index3 dims{c.dims[0], c.dims[1], c.dims[2]};
  for (int v : dims) require(v >= 1, ErrorKind::format, path.string() + ": non-positive dims");
  const std::size_t n = static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  if (c.payload.size() != n * sizeof(std::uint16_t)) {
    throw Error(ErrorKind::format, path.string() + ": payload size mismatch");
  }
  std::vector<std::uint16_t> data(n);
  std::memcpy(data.data(), c.payload.data(), c.payload.size());
  int max_value = 0;
  for (auto& v : data) {
    v = to_little_endian(v);
    max_value = std::max<int>(max_value, v);
  }
  if (num_labels <= 0) num_labels = max_value + 1;
  require(max_value < num_labels, ErrorKind::format,
          path.string() + ": label value exceeds num_labels");
  return LabelVolume(dims, num_labels, std::move(data), c.spacing);
}

void save_label_volume(const LabelVolume& labels, const std::filesystem::path& path) {
  const auto& d = labels.dims();
  auto header = make_header({d[0], d[1], d[2], 1}, labels.spacing(), "u16");
  std::vector<std::uint16_t> le(labels.values().begin(), labels.values().end());
  for (auto& v : le) v = to_little_endian(v);
  write_container(path, header, le.data(), le.size() * sizeof(std::uint16_t));
}

namespace {
void check_crop(const Index3& dims, const Index3& offset, const Index3& size) {
  for (int a = 0; a < 3; ++a) {
    require(size[a] >= 1 && size[a] <= dims[a], ErrorKind::invalid,
            "crop size exceeds volume extent");
    require(offset[a] >= 0 && offset[a] + size[a] <= dims[a], ErrorKind::invalid,
            "crop window outside volume");
  }
}
}  // namespace

Volume crop(const Volume& v, const Index3& offset, const Index3& size) {
  check_crop(v.spatial(), offset, size);
  Volume out({size[0], size[1], size[2], v.channels()}, v.spacing(), v.id());
  const int C = v.channels();
  for (int w = 0; w < size[0]; ++w)
    for (int h = 0; h < size[1]; ++h) {
      const float* src = &v.values()[v.offset(w + offset[0], h + offset[1], offset[2])];
      float* dst = &out.values()[out.offset(w, h, 0)];
      std::copy(src, src + static_cast<std::size_t>(size[2]) * C, dst);
    }
  return out;
}

LabelVolume crop(const LabelVolume& v, const Index3& offset, const Index3& size) {
  check_crop(v.dims(), offset, size);
  LabelVolume out(size, v.num_labels(), v.spacing());
  for (int w = 0; w < size[0]; ++w)
    for (int h = 0; h < size[1]; ++h)
      for (int d = 0; d < size[2]; ++d) out.at(w, h, d) = v.at(w + offset[0], h + offset[1], d + offset[2]);
  return out;
}

Index3 sample_crop_offset(const Index3& dims, const Index3& size, std::uint64_t rng_seed) {
  Rng rng(rng_seed);
  Index3 offset{};
  for (int a = 0; a < 3; ++a) {
    require(size[a] >= 1 && size[a] <= dims[a], ErrorKind::invalid, "crop larger than volume");
    offset[a] = static_cast<int>(rng.below(static_cast<std::uint64_t>(dims[a] - size[a] + 1)));
  }
  return offset;
}

CorrespondingCrops corresponding_crops(const SubjectTimeSeries& series, int j, int k,
                                       const Index3& size, std::uint64_t rng_seed) {
  const int n = static_cast<int>(series.timepoints.size());
  require(j >= 0 && j < n && k >= 0 && k < n && j != k, ErrorKind::invalid,
          "corresponding_crops: invalid timepoint pair");
  const Volume& vj = series.timepoints[j].image;
  const Volume& vk = series.timepoints[k].image;
  require(vj.dims() == vk.dims(), ErrorKind::data, "corresponding_crops: unregistered timepoints");
  const Index3 offset = sample_crop_offset(vj.spatial(), size, rng_seed);
  return {crop(vj, offset, size), crop(vk, offset, size), offset};
}

}  // namespace longiseg
