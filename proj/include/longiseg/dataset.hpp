#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "longiseg/volume.hpp"

namespace longiseg {

struct TimepointEntry {
  double age = 0.0;
  std::string image;                 // path relative to the manifest root
  std::optional<std::string> label;  // same
};

struct SubjectEntry {
  std::string id;
  int reference_timepoint = 0;  // registration target; not otherwise modelled
  std::vector<TimepointEntry> timepoints;
};

/// Dataset index: subjects, their scans, and subject-wise splits.
struct DatasetManifest {
  std::filesystem::path root;
  int num_labels = 0;
  std::vector<SubjectEntry> subjects;
  std::map<std::string, std::vector<std::string>> splits;

  const SubjectEntry& subject(const std::string& id) const;
  const std::vector<std::string>& split(const std::string& name) const;

  /// Subjects of `split_name` with at least two timepoints (pretraining pool).
  std::vector<std::string> longitudinal_subjects(const std::string& split_name) const;

  /// Throws on overlapping splits, unknown subject ids, or missing files.
  void validate(bool check_files = true) const;

  SubjectTimeSeries load_subject(const std::string& id) const;
};

DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path);

}  // namespace longiseg
