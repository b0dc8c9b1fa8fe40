#include "longiseg/augment.hpp"

#include <cmath>

#include "longiseg/error.hpp"

namespace longiseg {

namespace {

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

Mat3 inverse(const Mat3& m) {
  const double det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
                     m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
                     m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
  Mat3 r{};
  r[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det;
  r[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det;
  r[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det;
  r[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det;
  r[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det;
  r[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det;
  r[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det;
  r[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det;
  r[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det;
  return r;
}

// Maps an output voxel to its (continuous) source coordinate in the input.
struct InverseMap {
  Mat3 inv{};
  std::array<double, 3> center{};
  std::array<double, 3> translation{};
  std::array<bool, 3> flip{};
  Index3 dims{};
  bool affine_identity = true;

  InverseMap(const GeometricParams& g, const Index3& d) : translation(g.translation), flip(g.flip), dims(d) {
    const auto& r = g.rotation;
    const Mat3 rx{{{1, 0, 0}, {0, std::cos(r[0]), -std::sin(r[0])}, {0, std::sin(r[0]), std::cos(r[0])}}};
    const Mat3 ry{{{std::cos(r[1]), 0, std::sin(r[1])}, {0, 1, 0}, {-std::sin(r[1]), 0, std::cos(r[1])}}};
    const Mat3 rz{{{std::cos(r[2]), -std::sin(r[2]), 0}, {std::sin(r[2]), std::cos(r[2]), 0}, {0, 0, 1}}};
    Mat3 s{};
    for (int a = 0; a < 3; ++a) s[a][a] = g.scale[a];
    inv = inverse(multiply(multiply(multiply(rz, ry), rx), s));
    for (int a = 0; a < 3; ++a) center[a] = (dims[a] - 1) / 2.0;
    affine_identity = g.rotation == std::array<double, 3>{0, 0, 0} &&
                      g.scale == std::array<double, 3>{1, 1, 1};
  }

  std::array<double, 3> operator()(int w, int h, int d) const {
    const double q[3] = {w - center[0] - translation[0], h - center[1] - translation[1],
                         d - center[2] - translation[2]};
    std::array<double, 3> p{};
    for (int a = 0; a < 3; ++a) {
      if (affine_identity) {
        p[a] = q[a] + center[a];
      } else {
        p[a] = inv[a][0] * q[0] + inv[a][1] * q[1] + inv[a][2] * q[2] + center[a];
      }
      if (flip[a]) p[a] = (dims[a] - 1) - p[a];
    }
    return p;
  }
};

void gaussian_blur(std::vector<float>& data, const std::array<int, 4>& dims, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    kernel[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    total += kernel[i + radius];
  }
  for (auto& k : kernel) k /= total;

  const int W = dims[0], H = dims[1], D = dims[2], C = dims[3];
  const std::size_t stride[3] = {static_cast<std::size_t>(H) * D * C, static_cast<std::size_t>(D) * C,
                                 static_cast<std::size_t>(C)};
  const int extent[3] = {W, H, D};
  std::vector<float> tmp(data.size());
  for (int axis = 0; axis < 3; ++axis) {
    for (int w = 0; w < W; ++w)
      for (int h = 0; h < H; ++h)
        for (int d = 0; d < D; ++d)
          for (int c = 0; c < C; ++c) {
            const int idx[3] = {w, h, d};
            const std::size_t base = w * stride[0] + h * stride[1] + d * stride[2] + c;
            double acc = 0.0;
            for (int k = -radius; k <= radius; ++k) {
              const int pos = std::clamp(idx[axis] + k, 0, extent[axis] - 1);
              const std::ptrdiff_t delta = static_cast<std::ptrdiff_t>(pos - idx[axis]) *
                                           static_cast<std::ptrdiff_t>(stride[axis]);
              acc += kernel[k + radius] * data[base + delta];
            }
            tmp[base] = static_cast<float>(acc);
          }
    data.swap(tmp);
  }
}

}  // namespace

void GeometricParams::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(std::abs(rotation[a]) <= 0.15 + 1e-12, ErrorKind::invalid, "rotation outside [-0.15, 0.15] rad");
    require(scale[a] >= 0.9 - 1e-12 && scale[a] <= 1.1 + 1e-12, ErrorKind::invalid,
            "scale outside [0.9, 1.1]");
    require(std::abs(translation[a]) <= 4.0 + 1e-12, ErrorKind::invalid,
            "translation outside [-4, 4] voxels");
  }
}

bool GeometricParams::is_identity() const {
  return flip == std::array<bool, 3>{false, false, false} && rotation == std::array<double, 3>{0, 0, 0} &&
         scale == std::array<double, 3>{1, 1, 1} && translation == std::array<double, 3>{0, 0, 0};
}

void IntensityParams::validate() const {
  require(blur_sigma >= 0.0 && blur_sigma <= 2.0, ErrorKind::invalid, "blur_sigma outside [0, 2]");
  require(noise_std >= 0.0, ErrorKind::invalid, "noise_std must be non-negative");
  require(gamma > 0.0, ErrorKind::invalid, "gamma must be positive");
  require(bias_field.size() <= 10, ErrorKind::invalid, "bias field has at most 10 coefficients");
  require(motion_severity >= 0, ErrorKind::invalid, "motion_severity must be non-negative");
}

bool IntensityParams::is_identity() const {
  bool bias_zero = true;
  for (double c : bias_field) bias_zero = bias_zero && c == 0.0;
  return blur_sigma == 0.0 && noise_std == 0.0 && gamma == 1.0 && bias_zero && motion_severity == 0;
}

void to_json(nlohmann::json& j, const AugmentRanges& r) {
  j = nlohmann::json{{"geometric", r.geometric},
                     {"intensity", r.intensity},
                     {"flip_probability", r.flip_probability},
                     {"max_rotation", r.max_rotation},
                     {"max_scale_delta", r.max_scale_delta},
                     {"max_translation", r.max_translation},
                     {"max_blur_sigma", r.max_blur_sigma},
                     {"max_noise_std", r.max_noise_std},
                     {"gamma_min", r.gamma_min},
                     {"gamma_max", r.gamma_max},
                     {"max_bias_coefficient", r.max_bias_coefficient},
                     {"max_motion_severity", r.max_motion_severity},
                     {"motion_probability", r.motion_probability}};
}

void from_json(const nlohmann::json& j, AugmentRanges& r) {
  r.geometric = j.value("geometric", r.geometric);
  r.intensity = j.value("intensity", r.intensity);
  r.flip_probability = j.value("flip_probability", r.flip_probability);
  r.max_rotation = j.value("max_rotation", r.max_rotation);
  r.max_scale_delta = j.value("max_scale_delta", r.max_scale_delta);
  r.max_translation = j.value("max_translation", r.max_translation);
  r.max_blur_sigma = j.value("max_blur_sigma", r.max_blur_sigma);
  r.max_noise_std = j.value("max_noise_std", r.max_noise_std);
  r.gamma_min = j.value("gamma_min", r.gamma_min);
  r.gamma_max = j.value("gamma_max", r.gamma_max);
  r.max_bias_coefficient = j.value("max_bias_coefficient", r.max_bias_coefficient);
  r.max_motion_severity = j.value("max_motion_severity", r.max_motion_severity);
  r.motion_probability = j.value("motion_probability", r.motion_probability);
  require(r.max_rotation <= 0.15 && r.max_scale_delta <= 0.1 && r.max_translation <= 4.0,
          ErrorKind::config, "geometric augmentation ranges exceed the supported bounds");
  require(r.gamma_min >= 0.7 && r.gamma_max <= 1.5 && r.gamma_min <= r.gamma_max, ErrorKind::config,
          "gamma range must lie inside [0.7, 1.5]");
  require(r.max_blur_sigma <= 2.0, ErrorKind::config, "blur sigma range exceeds 2 voxels");
}

GeometricParams sample_geometric(const AugmentRanges& ranges, Rng& rng) {
  GeometricParams g;
  g.flip[0] = rng.uniform() < ranges.flip_probability;
  for (int a = 0; a < 3; ++a) {
    g.rotation[a] = rng.uniform(-ranges.max_rotation, ranges.max_rotation);
    g.scale[a] = 1.0 + rng.uniform(-ranges.max_scale_delta, ranges.max_scale_delta);
    g.translation[a] = rng.uniform(-ranges.max_translation, ranges.max_translation);
  }
  return g;
}

IntensityParams sample_intensity(const AugmentRanges& ranges, Rng& rng) {
  IntensityParams a;
  a.blur_sigma = rng.uniform(0.0, ranges.max_blur_sigma);
  a.noise_std = rng.uniform(0.0, ranges.max_noise_std);
  a.gamma = rng.uniform(ranges.gamma_min, ranges.gamma_max);
  a.bias_field.assign(10, 0.0);
  for (int i = 1; i < 10; ++i) {
    a.bias_field[i] = rng.uniform(-ranges.max_bias_coefficient, ranges.max_bias_coefficient);
  }
  if (ranges.max_motion_severity > 0 && rng.uniform() < ranges.motion_probability) {
    a.motion_severity = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(ranges.max_motion_severity)));
  }
  a.seed = rng.next();
  return a;
}

Volume apply_geometric(const Volume& v, const GeometricParams& g) {
  g.validate();
  if (g.is_identity()) return v;
  const Index3 dims = v.spatial();
  const InverseMap map(g, dims);
  const int C = v.channels();
  Volume out(v.dims(), v.spacing(), v.id());
  auto sample = [&](int w, int h, int d, int c) -> double {
    if (w < 0 || h < 0 || d < 0 || w >= dims[0] || h >= dims[1] || d >= dims[2]) return 0.0;
    return v.at(w, h, d, c);
  };
  for (int w = 0; w < dims[0]; ++w)
    for (int h = 0; h < dims[1]; ++h)
      for (int d = 0; d < dims[2]; ++d) {
        const auto p = map(w, h, d);
        const int x0 = static_cast<int>(std::floor(p[0]));
        const int y0 = static_cast<int>(std::floor(p[1]));
        const int z0 = static_cast<int>(std::floor(p[2]));
        const double fx = p[0] - x0, fy = p[1] - y0, fz = p[2] - z0;
        for (int c = 0; c < C; ++c) {
          double acc = 0.0;
          for (int a = 0; a < 2; ++a) {
            const double wx = a ? fx : 1.0 - fx;
            if (wx == 0.0) continue;
            for (int b = 0; b < 2; ++b) {
              const double wy = b ? fy : 1.0 - fy;
              if (wy == 0.0) continue;
              for (int e = 0; e < 2; ++e) {
                const double wz = e ? fz : 1.0 - fz;
                if (wz == 0.0) continue;
                acc += wx * wy * wz * sample(x0 + a, y0 + b, z0 + e, c);
              }
            }
          }
          out.at(w, h, d, c) = static_cast<float>(acc);
        }
      }
  return out;
}

LabelVolume apply_geometric(const LabelVolume& v, const GeometricParams& g) {
  g.validate();
  if (g.is_identity()) return v;
  const Index3 dims = v.dims();
  const InverseMap map(g, dims);
  LabelVolume out(dims, v.num_labels(), v.spacing());
  for (int w = 0; w < dims[0]; ++w)
    for (int h = 0; h < dims[1]; ++h)
      for (int d = 0; d < dims[2]; ++d) {
        const auto p = map(w, h, d);
        const int x = static_cast<int>(std::lround(p[0]));
        const int y = static_cast<int>(std::lround(p[1]));
        const int z = static_cast<int>(std::lround(p[2]));
        if (x < 0 || y < 0 || z < 0 || x >= dims[0] || y >= dims[1] || z >= dims[2]) continue;
        out.at(w, h, d) = v.at(x, y, z);
      }
  return out;
}

Volume apply_intensity(const Volume& v, const IntensityParams& a) {
  a.validate();
  if (a.is_identity()) return v;
  const auto& dims = v.dims();
  std::vector<float> data(v.values().begin(), v.values().end());
  Rng rng(a.seed);

  if (a.blur_sigma > 0.0) gaussian_blur(data, dims, a.blur_sigma);
  if (a.noise_std > 0.0) {
    for (auto& x : data) x = static_cast<float>(x + a.noise_std * rng.normal());
  }
  if (a.gamma != 1.0) {
    for (auto& x : data) x = static_cast<float>(std::pow(std::max(0.0f, x), a.gamma));
  }
  bool has_bias = false;
  for (double c : a.bias_field) has_bias = has_bias || c != 0.0;
  if (has_bias) {
    std::array<double, 10> k{};
    std::copy(a.bias_field.begin(), a.bias_field.end(), k.begin());
    auto norm = [](int i, int n) { return n > 1 ? 2.0 * i / (n - 1) - 1.0 : 0.0; };
    std::size_t i = 0;
    for (int w = 0; w < dims[0]; ++w) {
      const double x = norm(w, dims[0]);
      for (int h = 0; h < dims[1]; ++h) {
        const double y = norm(h, dims[1]);
        for (int d = 0; d < dims[2]; ++d) {
          const double z = norm(d, dims[2]);
          const double poly = k[0] + k[1] * x + k[2] * y + k[3] * z + k[4] * x * x + k[5] * y * y +
                              k[6] * z * z + k[7] * x * y + k[8] * x * z + k[9] * y * z;
          const double f = std::exp(poly);
          for (int c = 0; c < dims[3]; ++c, ++i) data[i] = static_cast<float>(data[i] * f);
        }
      }
    }
  }
  if (a.motion_severity > 0) {
    // Ghosting approximation: average of the image and `severity` shifted copies.
    std::vector<double> acc(data.begin(), data.end());
    for (int copy = 0; copy < a.motion_severity; ++copy) {
      std::array<int, 3> shift{};
      do {
        for (auto& s : shift) s = static_cast<int>(rng.below(5)) - 2;
      } while (shift == std::array<int, 3>{0, 0, 0});
      std::size_t i = 0;
      for (int w = 0; w < dims[0]; ++w)
        for (int h = 0; h < dims[1]; ++h)
          for (int d = 0; d < dims[2]; ++d) {
            const int sw = std::clamp(w + shift[0], 0, dims[0] - 1);
            const int sh = std::clamp(h + shift[1], 0, dims[1] - 1);
            const int sd = std::clamp(d + shift[2], 0, dims[2] - 1);
            const std::size_t src = ((static_cast<std::size_t>(sw) * dims[1] + sh) * dims[2] + sd) * dims[3];
            for (int c = 0; c < dims[3]; ++c, ++i) acc[i] += data[src + c];
          }
    }
    for (std::size_t i = 0; i < data.size(); ++i) {
      data[i] = static_cast<float>(acc[i] / (a.motion_severity + 1));
    }
  }
  return Volume(dims, v.spacing(), std::move(data), v.id());
}

DenoisingPair make_denoising_pair(const Volume& x, const GeometricParams& g, const IntensityParams& a) {
  Volume target = apply_geometric(x, g);
  Volume input = apply_intensity(target, a);
  return {std::move(input), std::move(target)};
}

}  // namespace longiseg
