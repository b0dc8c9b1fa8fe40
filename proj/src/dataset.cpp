#include "longiseg/dataset.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "longiseg/error.hpp"

namespace longiseg {

using ordered_json = nlohmann::ordered_json;

const SubjectEntry& DatasetManifest::subject(const std::string& id) const {
  for (const auto& s : subjects) {
    if (s.id == id) return s;
  }
  throw Error(ErrorKind::data, "unknown subject " + id);
}

const std::vector<std::string>& DatasetManifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw Error(ErrorKind::data, "unknown split " + name);
  return it->second;
}

std::vector<std::string> DatasetManifest::longitudinal_subjects(const std::string& split_name) const {
  std::vector<std::string> out;
  for (const auto& id : split(split_name)) {
    if (subject(id).timepoints.size() >= 2) out.push_back(id);
  }
  return out;
}

void DatasetManifest::validate(bool check_files) const {
  require(num_labels >= 1, ErrorKind::data, "manifest: num_labels must be positive");
  std::set<std::string> ids;
  for (const auto& s : subjects) {
    require(ids.insert(s.id).second, ErrorKind::data, "manifest: duplicate subject " + s.id);
    require(!s.timepoints.empty(), ErrorKind::data, "manifest: subject without timepoints " + s.id);
    for (std::size_t i = 1; i < s.timepoints.size(); ++i) {
      require(s.timepoints[i].age > s.timepoints[i - 1].age, ErrorKind::data,
              "manifest: ages not strictly increasing for " + s.id);
    }
    if (check_files) {
      for (const auto& tp : s.timepoints) {
        require(std::filesystem::exists(root / tp.image), ErrorKind::io,
                "manifest: missing file " + (root / tp.image).string());
        if (tp.label) {
          require(std::filesystem::exists(root / *tp.label), ErrorKind::io,
                  "manifest: missing file " + (root / *tp.label).string());
        }
      }
    }
  }
  std::set<std::string> assigned;
  for (const auto& [name, members] : splits) {
    for (const auto& id : members) {
      require(ids.count(id) == 1, ErrorKind::data, "manifest: split " + name + " names unknown subject " + id);
      require(assigned.insert(id).second, ErrorKind::data,
              "manifest: subject " + id + " appears in more than one split");
    }
  }
}

SubjectTimeSeries DatasetManifest::load_subject(const std::string& id) const {
  const SubjectEntry& entry = subject(id);
  SubjectTimeSeries series;
  series.subject_id = entry.id;
  series.reference_timepoint = entry.reference_timepoint;
  for (const auto& tp : entry.timepoints) {
    Timepoint t;
    t.age = tp.age;
    t.image = load_volume(root / tp.image);
    if (tp.label) t.label = load_label_volume(root / *tp.label, num_labels);
    series.timepoints.push_back(std::move(t));
  }
  series.validate();
  return series;
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::io, "cannot open manifest " + path.string());
  ordered_json j;
  try {
    j = ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.root = path.parent_path();
  try {
    m.num_labels = j.at("num_labels").get<int>();
    for (const auto& s : j.at("subjects")) {
      SubjectEntry e;
      e.id = s.at("id").get<std::string>();
      e.reference_timepoint = s.value("reference_timepoint", 0);
      for (const auto& t : s.at("timepoints")) {
        TimepointEntry tp;
        tp.age = t.at("age").get<double>();
        tp.image = t.at("image").get<std::string>();
        if (t.contains("label") && !t["label"].is_null()) tp.label = t["label"].get<std::string>();
        e.timepoints.push_back(std::move(tp));
      }
      m.subjects.push_back(std::move(e));
    }
    for (const auto& [name, members] : j.at("splits").items()) {
      m.splits[name] = members.get<std::vector<std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& path) {
  ordered_json j;
  j["num_labels"] = manifest.num_labels;
  j["subjects"] = ordered_json::array();
  for (const auto& s : manifest.subjects) {
    ordered_json js;
    js["id"] = s.id;
    js["reference_timepoint"] = s.reference_timepoint;
    js["timepoints"] = ordered_json::array();
    for (const auto& t : s.timepoints) {
      ordered_json jt;
      jt["age"] = t.age;
      jt["image"] = t.image;
      jt["label"] = t.label ? ordered_json(*t.label) : ordered_json(nullptr);
      js["timepoints"].push_back(std::move(jt));
    }
    j["subjects"].push_back(std::move(js));
  }
  j["splits"] = ordered_json::object();
  for (const auto& [name, members] : manifest.splits) j["splits"][name] = members;
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write manifest " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw Error(ErrorKind::io, "write failed: " + path.string());
}

}  // namespace longiseg
