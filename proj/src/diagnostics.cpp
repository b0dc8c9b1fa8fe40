#include "longiseg/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>

#include "longiseg/training.hpp"

namespace longiseg {

namespace {

Tensor to_rows(const Tensor& t) {
  // [1, C, W, H, D] -> [W*H*D, C]
  const int C = t.dim(1);
  const std::size_t S = spatial_size(t.shape());
  Tensor out({static_cast<int>(S), C});
  for (int c = 0; c < C; ++c)
    for (std::size_t s = 0; s < S; ++s) out.at(static_cast<int>(s), c) = t[c * S + s];
  return out;
}

Index3 extent_of(const Volume& vol, int layer_id) { return layer_extent(vol.spatial(), layer_id); }

}  // namespace

Tensor layer_features(Model& model, const Volume& vol, int layer_id) {
  NoGradGuard guard;
  const auto sp = vol.spatial();
  Tensor x({1, vol.channels(), sp[0], sp[1], sp[2]});
  volume_to_channels_first(vol, x.data());
  auto fw = model.forward(Var(std::move(x)), {layer_id}, false);
  return to_rows(fw.taps.at(layer_id).value());
}

Tensor layer_embeddings(Model& model, const Volume& vol, int layer_id) {
  Tensor f = layer_features(model, vol, layer_id);
  if (!model.has_head(layer_id)) return f;
  NoGradGuard guard;
  return model.head(layer_id).project(Var(std::move(f)), false, false).value();
}

Volume similarity_map(Model& model, const Volume& vol_q, const Volume& vol_k, const Index3& query, int layer_id) {
  require(vol_q.dims() == vol_k.dims(), ErrorKind::shape, "similarity_map: query and key volumes differ in shape");
  const Index3 e = extent_of(vol_q, layer_id);
  for (int a = 0; a < 3; ++a) {
    require(query[a] >= 0 && query[a] < e[a], ErrorKind::invalid,
            "query index outside the layer extent " + std::to_string(e[0]) + "x" + std::to_string(e[1]) + "x" +
                std::to_string(e[2]));
  }
  const Tensor zq = layer_embeddings(model, vol_q, layer_id);
  const Tensor zk = layer_embeddings(model, vol_k, layer_id);
  const int n = zq.dim(1);
  const int qi = (query[0] * e[1] + query[1]) * e[2] + query[2];
  double qq = 0.0;
  for (int c = 0; c < n; ++c) qq += static_cast<double>(zq.at(qi, c)) * zq.at(qi, c);
  const double qn = std::max(std::sqrt(qq), 1e-12);
  const double f = static_cast<double>(1 << layer_level(layer_id));
  const auto& sp = vol_q.spacing();
  Volume out({e[0], e[1], e[2], 1}, {sp[0] * f, sp[1] * f, sp[2] * f}, "similarity");
  auto vals = out.values();
  for (int r = 0; r < zk.dim(0); ++r) {
    double dot = 0.0, kk = 0.0;
    for (int c = 0; c < n; ++c) {
      dot += static_cast<double>(zq.at(qi, c)) * zk.at(r, c);
      kk += static_cast<double>(zk.at(r, c)) * zk.at(r, c);
    }
    vals[r] = static_cast<float>(dot / (qn * std::max(std::sqrt(kk), 1e-12)));
  }
  return out;
}

std::vector<double> covariance_spectrum(const Tensor& features) {
  require(features.rank() == 2 && features.dim(0) >= 1 && features.dim(1) >= 1, ErrorKind::shape,
          "covariance_spectrum: expected a non-empty [positions, channels] matrix");
  const int P = features.dim(0), c = features.dim(1);
  Eigen::MatrixXd F(P, c);
  for (int p = 0; p < P; ++p) {
    double mean = 0.0;
    for (int i = 0; i < c; ++i) mean += features.at(p, i);
    mean /= c;
    for (int i = 0; i < c; ++i) F(p, i) = features.at(p, i) - mean;
  }
  Eigen::BDCSVD<Eigen::MatrixXd> svd(F);
  const auto& s = svd.singularValues();
  std::vector<double> sv(static_cast<std::size_t>(P), 0.0);
  for (Eigen::Index k = 0; k < s.size(); ++k) sv[k] = s[k] * s[k] / c;
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

std::vector<double> covariance_spectrum(Model& model, const Volume& vol, int layer_id, int slice) {
  const Index3 e = extent_of(vol, layer_id);
  if (slice < 0) slice = e[2] / 2;
  require(slice < e[2], ErrorKind::invalid, "covariance_spectrum: slice outside the layer extent");
  const Tensor z = layer_embeddings(model, vol, layer_id);
  const int c = z.dim(1);
  Tensor plane({e[0] * e[1], c});
  for (int w = 0; w < e[0]; ++w)
    for (int h = 0; h < e[1]; ++h) {
      const int src = (w * e[1] + h) * e[2] + slice;
      for (int k = 0; k < c; ++k) plane.at(w * e[1] + h, k) = z.at(src, k);
    }
  return covariance_spectrum(plane);
}

int effective_rank(const std::vector<double>& sv, double rel_threshold) {
  if (sv.empty()) return 0;
  const double mx = *std::max_element(sv.begin(), sv.end());
  if (mx <= 0.0) return 0;
  return static_cast<int>(std::count_if(sv.begin(), sv.end(), [&](double v) { return v > rel_threshold * mx; }));
}

double projection_std(const Tensor& z, double eps) {
  require(z.rank() == 2 && z.dim(0) >= 2, ErrorKind::invalid, "projection_std needs at least two positions");
  const int M = z.dim(0), n = z.dim(1);
  double total = 0.0;
  for (int j = 0; j < n; ++j) {
    double mean = 0.0;
    for (int m = 0; m < M; ++m) mean += z.at(m, j);
    mean /= M;
    double ss = 0.0;
    for (int m = 0; m < M; ++m) ss += (z.at(m, j) - mean) * (z.at(m, j) - mean);
    total += std::sqrt(ss / (M - 1) + eps);
  }
  return total / n;
}

std::map<int, double> projection_std(Model& model, const Volume& vol, const std::vector<int>& layer_ids, double eps) {
  std::map<int, double> out;
  for (int id : layer_ids) out[id] = projection_std(layer_embeddings(model, vol, id), eps);
  return out;
}

int LossCurve::column(const std::string& name) const {
  auto it = std::find(columns.begin(), columns.end(), name);
  return it == columns.end() ? -1 : static_cast<int>(it - columns.begin());
}

LossCurve read_loss_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  LossCurve curve;
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::format, path.string() + ": empty loss log");
  {
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, ',')) curve.columns.push_back(col);
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::optional<double>> row;
    std::size_t start = 0;
    while (true) {
      const std::size_t end = line.find(',', start);
      const std::string field = line.substr(start, end == std::string::npos ? std::string::npos : end - start);
      if (field.empty()) {
        row.push_back(std::nullopt);
      } else {
        double v = 0.0;
        auto r = std::from_chars(field.data(), field.data() + field.size(), v);
        require(r.ec == std::errc(), ErrorKind::format, path.string() + ": bad number \"" + field + "\"");
        row.push_back(v);
      }
      if (end == std::string::npos) break;
      start = end + 1;
    }
    require(row.size() == curve.columns.size(), ErrorKind::format, path.string() + ": ragged row");
    curve.rows.push_back(std::move(row));
  }
  return curve;
}

std::optional<int> first_step_at_or_below(const LossCurve& curve, const std::string& column, double threshold) {
  const int c = curve.column(column), s = curve.column("step");
  require(c >= 0 && s >= 0, ErrorKind::invalid, "loss log has no column " + column);
  for (const auto& row : curve.rows) {
    if (row[c] && *row[c] <= threshold) return static_cast<int>(*row[s]);
  }
  return std::nullopt;
}

}  // namespace longiseg
