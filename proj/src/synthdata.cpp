#include "longiseg/synthdata.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <thread>

#include "longiseg/error.hpp"
#include "longiseg/rng.hpp"

namespace longiseg {

namespace {

// Semi-axis scale of nested shell l (1-based) relative to the outer shell.
double shell_fraction(int label, int num_labels) {
  if (num_labels <= 2) return 1.0;
  return 1.0 - (label - 1) * (0.7 / (num_labels - 2));
}

struct Geometry {
  std::array<double, 3> center{};
  std::array<double, 3> outer_axes{};
};

Geometry draw_geometry(const PhantomConfig& cfg, Rng& rng) {
  Geometry g;
  for (int a = 0; a < 3; ++a) {
    const double half = cfg.grid_size[a] / 2.0;
    g.center[a] = (cfg.grid_size[a] - 1) / 2.0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter);
    g.outer_axes[a] = half * rng.uniform(cfg.outer_axis_min, cfg.outer_axis_max);
  }
  return g;
}

}  // namespace

std::vector<double> PhantomConfig::contrast_at(double age) const {
  require(!contrast_schedule.empty(), ErrorKind::config, "empty contrast schedule");
  if (age <= contrast_schedule.front().age) return contrast_schedule.front().means;
  if (age >= contrast_schedule.back().age) return contrast_schedule.back().means;
  for (std::size_t i = 1; i < contrast_schedule.size(); ++i) {
    const auto& a = contrast_schedule[i - 1];
    const auto& b = contrast_schedule[i];
    if (age <= b.age) {
      const double t = (age - a.age) / (b.age - a.age);
      std::vector<double> out(a.means.size());
      for (std::size_t l = 0; l < out.size(); ++l) out[l] = (1.0 - t) * a.means[l] + t * b.means[l];
      return out;
    }
  }
  return contrast_schedule.back().means;
}

void PhantomConfig::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(grid_size[a] >= 8, ErrorKind::config, "phantom grid must be at least 8 per axis");
    require(spacing[a] > 0.0, ErrorKind::config, "phantom spacing must be positive");
  }
  require(num_subjects >= 1, ErrorKind::config, "num_subjects must be >= 1");
  require(min_timepoints >= 1 && min_timepoints <= max_timepoints, ErrorKind::config,
          "invalid timepoint range");
  require(static_cast<int>(age_grid.size()) >= max_timepoints, ErrorKind::config,
          "age grid shorter than max_timepoints");
  for (std::size_t i = 1; i < age_grid.size(); ++i) {
    require(age_grid[i] > age_grid[i - 1], ErrorKind::config, "age grid must be strictly increasing");
  }
  require(num_labels >= 2 && num_labels <= 65535, ErrorKind::config, "num_labels out of range");
  require(!contrast_schedule.empty(), ErrorKind::config, "contrast schedule is empty");
  for (std::size_t i = 0; i < contrast_schedule.size(); ++i) {
    require(static_cast<int>(contrast_schedule[i].means.size()) == num_labels, ErrorKind::config,
            "contrast knot must list one mean per label");
    if (i > 0) {
      require(contrast_schedule[i].age > contrast_schedule[i - 1].age, ErrorKind::config,
              "contrast knots must have increasing ages");
    }
  }
  require(growth_rate >= 0.0 && noise_std >= 0.0, ErrorKind::config,
          "growth_rate and noise_std must be non-negative");
  require(outer_axis_min > 0.0 && outer_axis_min <= outer_axis_max, ErrorKind::config,
          "invalid outer axis range");
  const double span = age_grid.back() - age_grid.front();
  for (int a = 0; a < 3; ++a) {
    const double half = grid_size[a] / 2.0;
    const double reach = half * outer_axis_max + growth_rate * span + center_jitter;
    require(reach <= half - 1.0, ErrorKind::config,
            "phantom geometry can grow outside the grid (reach " + std::to_string(reach) +
                " voxels, half grid " + std::to_string(half) + ")");
    const double smallest = shell_fraction(num_labels - 1, num_labels) * half * outer_axis_min;
    require(smallest >= 1.0, ErrorKind::config, "innermost structure smaller than one voxel");
  }
}

PhantomConfig PhantomConfig::isointense_preset() {
  PhantomConfig cfg;
  cfg.min_timepoints = 3;
  cfg.max_timepoints = 3;
  cfg.age_grid = {0.0, 1.0, 2.0};
  cfg.contrast_schedule = {{0.0, {0.0, 0.60, 0.35, 0.85}},
                           {1.0, {0.0, 0.50, 0.50, 0.85}},
                           {2.0, {0.0, 0.40, 0.75, 0.95}}};
  cfg.growth_rate = 0.75;
  cfg.noise_std = 0.04;
  return cfg;
}

void to_json(nlohmann::json& j, const PhantomConfig& cfg) {
  nlohmann::json schedule = nlohmann::json::array();
  for (const auto& k : cfg.contrast_schedule) schedule.push_back({{"age", k.age}, {"means", k.means}});
  j = nlohmann::json{{"grid_size", cfg.grid_size},
                     {"spacing", cfg.spacing},
                     {"num_subjects", cfg.num_subjects},
                     {"min_timepoints", cfg.min_timepoints},
                     {"max_timepoints", cfg.max_timepoints},
                     {"age_grid", cfg.age_grid},
                     {"num_labels", cfg.num_labels},
                     {"contrast_schedule", schedule},
                     {"growth_rate", cfg.growth_rate},
                     {"noise_std", cfg.noise_std},
                     {"outer_axis_min", cfg.outer_axis_min},
                     {"outer_axis_max", cfg.outer_axis_max},
                     {"center_jitter", cfg.center_jitter},
                     {"rng_seed", cfg.rng_seed}};
}

void from_json(const nlohmann::json& j, PhantomConfig& cfg) {
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "isointense") {
      cfg = PhantomConfig::isointense_preset();
    } else if (preset != "default") {
      throw Error(ErrorKind::config, "unknown phantom preset " + preset);
    }
  }
  if (j.contains("grid_size")) cfg.grid_size = j.at("grid_size").get<Index3>();
  if (j.contains("spacing")) cfg.spacing = j.at("spacing").get<Spacing>();
  cfg.num_subjects = j.value("num_subjects", cfg.num_subjects);
  cfg.min_timepoints = j.value("min_timepoints", cfg.min_timepoints);
  cfg.max_timepoints = j.value("max_timepoints", cfg.max_timepoints);
  if (j.contains("age_grid")) cfg.age_grid = j.at("age_grid").get<std::vector<double>>();
  cfg.num_labels = j.value("num_labels", cfg.num_labels);
  if (j.contains("contrast_schedule")) {
    cfg.contrast_schedule.clear();
    for (const auto& k : j.at("contrast_schedule")) {
      cfg.contrast_schedule.push_back({k.at("age").get<double>(), k.at("means").get<std::vector<double>>()});
    }
  }
  cfg.growth_rate = j.value("growth_rate", cfg.growth_rate);
  cfg.noise_std = j.value("noise_std", cfg.noise_std);
  cfg.outer_axis_min = j.value("outer_axis_min", cfg.outer_axis_min);
  cfg.outer_axis_max = j.value("outer_axis_max", cfg.outer_axis_max);
  cfg.center_jitter = j.value("center_jitter", cfg.center_jitter);
  cfg.rng_seed = j.value("rng_seed", cfg.rng_seed);
}

SubjectTimeSeries generate_subject(const PhantomConfig& cfg, std::uint64_t subject_seed,
                                   const std::string& subject_id) {
  cfg.validate();
  Rng rng(subject_seed);
  const int span = cfg.max_timepoints - cfg.min_timepoints + 1;
  const int T = cfg.min_timepoints + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));

  // T distinct ages from the grid (partial Fisher-Yates), then sorted.
  std::vector<double> ages = cfg.age_grid;
  for (int i = 0; i < T; ++i) {
    const auto r = i + static_cast<int>(rng.below(static_cast<std::uint64_t>(ages.size() - i)));
    std::swap(ages[i], ages[r]);
  }
  ages.resize(T);
  std::sort(ages.begin(), ages.end());

  const Geometry geo = draw_geometry(cfg, rng);
  const Index3 n = cfg.grid_size;

  SubjectTimeSeries series;
  series.subject_id = subject_id;
  series.reference_timepoint = T - 1;
  for (int t = 0; t < T; ++t) {
    const double age = ages[t];
    const double grow = cfg.growth_rate * (age - cfg.age_grid.front());
    const auto means = cfg.contrast_at(age);

    LabelVolume label(n, cfg.num_labels, cfg.spacing);
    Volume image({n[0], n[1], n[2], 1}, cfg.spacing, subject_id + "_" + format_age(age));
    Rng noise(derive_seed({subject_seed, 0x6e6f697365ULL, static_cast<std::uint64_t>(t)}));
    for (int w = 0; w < n[0]; ++w) {
      for (int h = 0; h < n[1]; ++h) {
        for (int d = 0; d < n[2]; ++d) {
          const double p[3] = {w - geo.center[0], h - geo.center[1], d - geo.center[2]};
          int value = 0;
          for (int l = cfg.num_labels - 1; l >= 1; --l) {
            const double f = shell_fraction(l, cfg.num_labels);
            double r2 = 0.0;
            for (int a = 0; a < 3; ++a) {
              const double axis = f * geo.outer_axes[a] + grow;
              r2 += (p[a] * p[a]) / (axis * axis);
            }
            if (r2 <= 1.0) {
              value = l;
              break;
            }
          }
          label.at(w, h, d) = static_cast<std::uint16_t>(value);
          double v = means[value];
          if (cfg.noise_std > 0.0) v += cfg.noise_std * noise.normal();
          image.at(w, h, d) = static_cast<float>(v);
        }
      }
    }
    series.timepoints.push_back({age, std::move(image), std::move(label)});
  }
  series.validate();
  return series;
}

std::vector<int> split_sizes(int n, const std::vector<double>& fractions) {
  const int k = static_cast<int>(fractions.size());
  require(n >= k, ErrorKind::invalid, "fewer subjects than splits");
  std::vector<int> sizes(k);
  std::vector<double> remainders(k);
  int assigned = 0;
  for (int i = 0; i < k; ++i) {
    const double quota = fractions[i] * n;
    sizes[i] = static_cast<int>(std::floor(quota + 1e-9));
    remainders[i] = quota - sizes[i];
    assigned += sizes[i];
  }
  for (int i = 0; i < k; ++i) {
    if (sizes[i] == 0) {
      sizes[i] = 1;
      remainders[i] = -1.0;
      ++assigned;
    }
  }
  while (assigned < n) {
    int best = 0;
    for (int i = 1; i < k; ++i) {
      if (remainders[i] > remainders[best] + 1e-12) best = i;
    }
    ++sizes[best];
    remainders[best] = -1.0;
    ++assigned;
  }
  while (assigned > n) {
    int largest = 0;
    for (int i = 1; i < k; ++i) {
      if (sizes[i] > sizes[largest]) largest = i;
    }
    --sizes[largest];
    --assigned;
  }
  return sizes;
}

std::string format_age(double age) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), age);
  return std::string(buf, res.ptr);
}

DatasetManifest generate_dataset(const PhantomConfig& cfg, const std::filesystem::path& out_dir,
                                 int workers) {
  cfg.validate();
  require(cfg.num_subjects >= 5, ErrorKind::config, "generate_dataset needs at least 5 subjects");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  require(!ec && std::filesystem::is_directory(out_dir), ErrorKind::io,
          "cannot create output directory " + out_dir.string());

  const int n = cfg.num_subjects;
  std::vector<SubjectEntry> entries(n);
  std::vector<std::string> errors(n);
  auto build = [&](int i) {
    try {
      char id[32];
      std::snprintf(id, sizeof(id), "sub-%03d", i);
      const auto seed = derive_seed({cfg.rng_seed, 0x7375626aULL, static_cast<std::uint64_t>(i)});
      SubjectTimeSeries s = generate_subject(cfg, seed, id);
      const auto dir = out_dir / id;
      std::filesystem::create_directories(dir);
      SubjectEntry e;
      e.id = id;
      e.reference_timepoint = s.reference_timepoint;
      for (const auto& tp : s.timepoints) {
        const std::string stem = format_age(tp.age);
        save_volume(tp.image, dir / (stem + "_img.vol"));
        save_label_volume(*tp.label, dir / (stem + "_lbl.vol"));
        e.timepoints.push_back({tp.age, std::string(id) + "/" + stem + "_img.vol",
                                std::string(id) + "/" + stem + "_lbl.vol"});
      }
      entries[i] = std::move(e);
    } catch (const std::exception& ex) {
      errors[i] = ex.what();
    }
  };
  workers = std::max(1, std::min(workers, n));
  if (workers == 1) {
    for (int i = 0; i < n; ++i) build(i);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (int i = w; i < n; i += workers) build(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (!e.empty()) throw Error(ErrorKind::io, e);
  }

  // Subject-wise 70/10/20 split over a seeded permutation.
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed({cfg.rng_seed, 0x73706c6974ULL}));
  for (int i = n - 1; i > 0; --i) std::swap(order[i], order[rng.below(static_cast<std::uint64_t>(i + 1))]);
  const auto sizes = split_sizes(n, {0.7, 0.1, 0.2});
  const char* names[3] = {"train", "val", "test"};

  DatasetManifest m;
  m.root = out_dir;
  m.num_labels = cfg.num_labels;
  m.subjects = std::move(entries);
  int pos = 0;
  for (int s = 0; s < 3; ++s) {
    auto& members = m.splits[names[s]];
    for (int i = 0; i < sizes[s]; ++i) members.push_back(m.subjects[order[pos++]].id);
    std::sort(members.begin(), members.end());
  }
  m.validate();
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace longiseg
