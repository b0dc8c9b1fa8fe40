#include "longiseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "longiseg/error.hpp"

namespace longiseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_masks(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  require(a.size() == b.size(), ErrorKind::shape, "mask sizes differ");
}

// One pass of the lower-envelope transform along a line of n samples with stride.
void edt_line(double* f, int n, std::size_t stride, double w2, std::vector<double>& g,
              std::vector<int>& v, std::vector<double>& z) {
  g.resize(n);
  for (int i = 0; i < n; ++i) g[i] = f[i * stride];
  v.resize(n);
  z.resize(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (g[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      const int p = v[k];
      s = ((g[q] + w2 * q * q) - (g[p] + w2 * p * p)) / (2.0 * w2 * (q - p));
      if (s <= z[k] && k > 0) {
        --k;
        continue;
      }
      break;
    }
    if (s <= z[k]) {
      v[k] = q;  // k == 0 and q dominates everywhere
      z[k + 1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  if (k < 0) return;  // no sites on this line: stays +inf
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    const double d = q - v[j];
    f[q * stride] = w2 * d * d + g[v[j]];
  }
}

nlohmann::json summary_json(const Summary& s) {
  return {{"mean", s.mean}, {"std", s.std}, {"median", s.median}, {"n", s.count}};
}

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::string opt_csv(const std::optional<double>& v) {
  if (!v) return "";
  nlohmann::json j = *v;
  return j.dump();
}

std::string num_csv(double v) {
  nlohmann::json j = v;
  return j.dump();
}

}  // namespace

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  check_masks(a, b);
  std::size_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  check_masks(a, b);
  std::size_t uni = 0, both = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    uni += x || y;
    both += x && y;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(both) / static_cast<double>(uni);
}

Mask boundary(std::span<const std::uint8_t> mask, const Index3& dims) {
  const int W = dims[0], H = dims[1], D = dims[2];
  require(mask.size() == static_cast<std::size_t>(W) * H * D, ErrorKind::shape, "mask size does not match dims");
  auto inside = [&](int w, int h, int d) {
    if (w < 0 || h < 0 || d < 0 || w >= W || h >= H || d >= D) return false;
    return mask[(static_cast<std::size_t>(w) * H + h) * D + d] != 0;
  };
  Mask out(mask.size(), 0);
  for (int w = 0; w < W; ++w)
    for (int h = 0; h < H; ++h)
      for (int d = 0; d < D; ++d) {
        if (!inside(w, h, d)) continue;
        if (!inside(w - 1, h, d) || !inside(w + 1, h, d) || !inside(w, h - 1, d) || !inside(w, h + 1, d) ||
            !inside(w, h, d - 1) || !inside(w, h, d + 1)) {
          out[(static_cast<std::size_t>(w) * H + h) * D + d] = 1;
        }
      }
  return out;
}

std::vector<double> squared_distance_transform(std::span<const std::uint8_t> sites, const Index3& dims,
                                               const Spacing& spacing) {
  const int W = dims[0], H = dims[1], D = dims[2];
  require(sites.size() == static_cast<std::size_t>(W) * H * D, ErrorKind::shape, "mask size does not match dims");
  std::vector<double> f(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) f[i] = sites[i] ? 0.0 : kInf;
  std::vector<double> g, z;
  std::vector<int> v;
  const std::size_t sW = static_cast<std::size_t>(H) * D, sH = D, sD = 1;
  for (int w = 0; w < W; ++w)
    for (int h = 0; h < H; ++h) edt_line(&f[w * sW + h * sH], D, sD, spacing[2] * spacing[2], g, v, z);
  for (int w = 0; w < W; ++w)
    for (int d = 0; d < D; ++d) edt_line(&f[w * sW + d], H, sH, spacing[1] * spacing[1], g, v, z);
  for (int h = 0; h < H; ++h)
    for (int d = 0; d < D; ++d) edt_line(&f[h * sH + d], W, sW, spacing[0] * spacing[0], g, v, z);
  return f;
}

double percentile(std::vector<double> values, double q) {
  require(!values.empty(), ErrorKind::invalid, "percentile of an empty set");
  require(q >= 0.0 && q <= 1.0, ErrorKind::invalid, "percentile rank outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

std::optional<double> hd95(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                           const Index3& dims, const Spacing& spacing) {
  check_masks(a, b);
  const Mask ba = boundary(a, dims), bb = boundary(b, dims);
  const bool any_a = std::find(ba.begin(), ba.end(), 1) != ba.end();
  const bool any_b = std::find(bb.begin(), bb.end(), 1) != bb.end();
  if (!any_a || !any_b) return std::nullopt;
  const auto da = squared_distance_transform(ba, dims, spacing);
  const auto db = squared_distance_transform(bb, dims, spacing);
  std::vector<double> pooled;
  for (std::size_t i = 0; i < ba.size(); ++i) {
    if (ba[i]) pooled.push_back(std::sqrt(db[i]));
    if (bb[i]) pooled.push_back(std::sqrt(da[i]));
  }
  return percentile(std::move(pooled), 0.95);
}

double stcs(const LabelVolume& s1, const LabelVolume& s2) {
  require(s1.dims() == s2.dims(), ErrorKind::shape, "stcs: segmentation shapes differ");
  const int L = std::max(s1.num_labels(), s2.num_labels());
  require(L >= 2, ErrorKind::invalid, "stcs: no foreground labels");
  double sum = 0.0;
  for (int l = 1; l < L; ++l) sum += dice(s1.mask(l), s2.mask(l));
  return sum / (L - 1);
}

double aspc(double v1, double v2) {
  require(v1 >= 0.0 && v2 >= 0.0 && v1 + v2 > 0.0, ErrorKind::invalid, "aspc: volumes must be >= 0 with positive sum");
  return 100.0 * std::abs(v2 - v1) / (0.5 * (v1 + v2));
}

double label_volume_mm3(const LabelVolume& labels, int label) {
  const auto& s = labels.spacing();
  return static_cast<double>(labels.count(label)) * s[0] * s[1] * s[2];
}

Summary summarize(const std::vector<double>& values) {
  Summary s;
  s.count = static_cast<int>(values.size());
  if (values.empty()) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / s.count;
  if (s.count > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (s.count - 1));
  }
  s.median = percentile(values, 0.5);
  return s;
}

namespace {

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::optional<double> mean_of(const std::vector<std::optional<double>>& v) {
  double s = 0.0;
  int n = 0;
  for (const auto& x : v) {
    if (x) {
      s += *x;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

}  // namespace

Summary MetricReport::mean_dice() const {
  std::vector<double> v;
  for (const auto& im : images) v.push_back(mean_of(im.dice));
  return summarize(v);
}

Summary MetricReport::mean_iou() const {
  std::vector<double> v;
  for (const auto& im : images) v.push_back(mean_of(im.iou));
  return summarize(v);
}

Summary MetricReport::mean_hd95() const {
  std::vector<double> v;
  for (const auto& im : images) {
    if (auto m = mean_of(im.hd95)) v.push_back(*m);
  }
  return summarize(v);
}

Summary MetricReport::mean_stcs() const {
  std::vector<double> v;
  for (const auto& p : pairs) v.push_back(mean_of(p.stcs));
  return summarize(v);
}

Summary MetricReport::mean_aspc() const {
  std::vector<double> v;
  for (const auto& p : pairs) {
    if (auto m = mean_of(p.aspc)) v.push_back(*m);
  }
  return summarize(v);
}

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["split"] = split;
  j["num_labels"] = num_labels;
  j["performance"] = {{"dice", summary_json(mean_dice())},
                      {"iou", summary_json(mean_iou())},
                      {"hd95", summary_json(mean_hd95())}};
  j["consistency"] = {{"stcs", summary_json(mean_stcs())}, {"aspc", summary_json(mean_aspc())}};
  auto& per_label = j["per_label"] = nlohmann::json::array();
  for (int l = 1; l < num_labels; ++l) {
    std::vector<double> d, u, h, s, a;
    int failures = 0;
    for (const auto& im : images) {
      d.push_back(im.dice[l - 1]);
      u.push_back(im.iou[l - 1]);
      if (im.hd95[l - 1]) h.push_back(*im.hd95[l - 1]); else ++failures;
    }
    for (const auto& p : pairs) {
      s.push_back(p.stcs[l - 1]);
      if (p.aspc[l - 1]) a.push_back(*p.aspc[l - 1]);
    }
    per_label.push_back({{"label", l},
                         {"dice", summary_json(summarize(d))},
                         {"iou", summary_json(summarize(u))},
                         {"hd95", summary_json(summarize(h))},
                         {"hd95_undefined", failures},
                         {"stcs", summary_json(summarize(s))},
                         {"aspc", summary_json(summarize(a))}});
  }
  auto& ims = j["images"] = nlohmann::json::array();
  for (const auto& im : images) {
    nlohmann::json hd = nlohmann::json::array();
    for (const auto& h : im.hd95) hd.push_back(opt_json(h));
    ims.push_back({{"subject", im.subject}, {"age", im.age}, {"dice", im.dice}, {"iou", im.iou}, {"hd95", hd}});
  }
  auto& prs = j["pairs"] = nlohmann::json::array();
  for (const auto& p : pairs) {
    nlohmann::json as = nlohmann::json::array();
    for (const auto& a : p.aspc) as.push_back(opt_json(a));
    prs.push_back({{"subject", p.subject}, {"age_j", p.age_j}, {"age_k", p.age_k}, {"stcs", p.stcs}, {"aspc", as}});
  }
  return j;
}

void MetricReport::write(const std::filesystem::path& path) const {
  const auto dir = path.parent_path();
  if (!dir.empty()) std::filesystem::create_directories(dir);
  {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << to_json().dump(2) << "\n";
  }
  const auto stem = (dir / path.stem()).string();
  {
    std::ofstream out(stem + "_images.csv");
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + stem + "_images.csv");
    out << "subject,age,label,dice,iou,hd95\n";
    for (const auto& im : images)
      for (int l = 1; l < num_labels; ++l)
        out << im.subject << ',' << num_csv(im.age) << ',' << l << ',' << num_csv(im.dice[l - 1]) << ','
            << num_csv(im.iou[l - 1]) << ',' << opt_csv(im.hd95[l - 1]) << '\n';
  }
  {
    std::ofstream out(stem + "_per_label.csv");
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + stem + "_per_label.csv");
    out << "label,dice_mean,dice_std,iou_mean,iou_std,hd95_mean,hd95_std,stcs_mean,stcs_std,aspc_mean,aspc_std\n";
    const auto j = to_json();
    for (const auto& e : j["per_label"]) {
      out << e["label"].get<int>();
      for (const char* k : {"dice", "iou", "hd95", "stcs", "aspc"}) {
        out << ',' << num_csv(e[k]["mean"].get<double>()) << ',' << num_csv(e[k]["std"].get<double>());
      }
      out << '\n';
    }
  }
}

MetricReport evaluate_split(const Segmenter& segment, const DatasetManifest& manifest, const std::string& split) {
  MetricReport report;
  report.split = split;
  report.num_labels = manifest.num_labels;
  require(manifest.num_labels >= 2, ErrorKind::data, "manifest declares no foreground labels");
  const int L = manifest.num_labels;
  for (const auto& id : manifest.split(split)) {
    const SubjectTimeSeries series = manifest.load_subject(id);
    std::vector<LabelVolume> predictions;
    for (const auto& tp : series.timepoints) {
      LabelVolume pred = segment(tp.image);
      require(pred.dims() == tp.image.spatial(), ErrorKind::shape, "segmenter output shape differs from image");
      if (tp.label) {
        ImageMetrics im;
        im.subject = id;
        im.age = tp.age;
        for (int l = 1; l < L; ++l) {
          const Mask p = pred.mask(l), g = tp.label->mask(l);
          im.dice.push_back(dice(p, g));
          im.iou.push_back(iou(p, g));
          im.hd95.push_back(hd95(p, g, pred.dims(), tp.image.spacing()));
        }
        report.images.push_back(std::move(im));
      }
      predictions.push_back(std::move(pred));
    }
    for (std::size_t t = 0; t + 1 < predictions.size(); ++t) {
      PairMetrics pm;
      pm.subject = id;
      pm.age_j = series.timepoints[t].age;
      pm.age_k = series.timepoints[t + 1].age;
      const LabelVolume a(predictions[t].dims(), L,
                          std::vector<std::uint16_t>(predictions[t].values().begin(), predictions[t].values().end()),
                          series.timepoints[t].image.spacing());
      const LabelVolume b(predictions[t + 1].dims(), L,
                          std::vector<std::uint16_t>(predictions[t + 1].values().begin(),
                                                     predictions[t + 1].values().end()),
                          series.timepoints[t + 1].image.spacing());
      for (int l = 1; l < L; ++l) {
        pm.stcs.push_back(dice(a.mask(l), b.mask(l)));
        const double v1 = label_volume_mm3(a, l), v2 = label_volume_mm3(b, l);
        pm.aspc.push_back(v1 + v2 > 0.0 ? std::optional<double>(aspc(v1, v2)) : std::nullopt);
      }
      report.pairs.push_back(std::move(pm));
    }
  }
  return report;
}

}  // namespace longiseg
