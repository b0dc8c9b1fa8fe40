#include <doctest.h>

#include <cmath>

#include "longiseg/augment.hpp"
#include "longiseg/error.hpp"
#include "support.hpp"

using namespace longiseg;

namespace {

Volume random_volume(Index3 n, std::uint64_t seed) {
  Volume v({n[0], n[1], n[2], 1}, {1, 1, 1});
  Rng rng(seed);
  for (auto& x : v.values()) x = static_cast<float>(rng.uniform(0.1, 1.0));
  return v;
}

}  // namespace

TEST_CASE("identity geometric transform") {
  const Volume v = random_volume({7, 6, 5}, 1);
  const GeometricParams g;
  CHECK(g.is_identity());
  CHECK(apply_geometric(v, g) == v);
  LabelVolume l({7, 6, 5}, 3);
  l.at(3, 2, 1) = 2;
  CHECK(apply_geometric(l, g) == l);
}

TEST_CASE("double flip is the identity") {
  const Volume v = random_volume({8, 6, 4}, 2);
  GeometricParams g;
  g.flip = {true, false, false};
  const Volume once = apply_geometric(v, g);
  CHECK_FALSE(once == v);
  CHECK(once.at(0, 2, 3) == v.at(7, 2, 3));
  CHECK(apply_geometric(once, g) == v);
}

TEST_CASE("integer translation moves a hot voxel") {
  Volume v({7, 7, 7, 1}, {1, 1, 1});
  v.at(2, 3, 3) = 1.0f;
  GeometricParams g;
  g.translation = {1, 0, 0};
  const Volume out = apply_geometric(v, g);
  for (int w = 0; w < 7; ++w)
    for (int h = 0; h < 7; ++h)
      for (int d = 0; d < 7; ++d) CHECK(out.at(w, h, d) == doctest::Approx((w == 3 && h == 3 && d == 3) ? 1.0 : 0.0));
}

TEST_CASE("geometric parameter limits") {
  GeometricParams g;
  g.rotation = {0.2, 0, 0};
  CHECK_THROWS_AS(g.validate(), Error);
  g = {};
  g.scale = {1.2, 1, 1};
  CHECK_THROWS_AS(g.validate(), Error);
  g = {};
  g.translation = {0, 0, -5};
  CHECK_THROWS_AS(g.validate(), Error);

  AugmentRanges r;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    CHECK_NOTHROW(sample_geometric(r, rng).validate());
    const auto a = sample_intensity(r, rng);
    CHECK_NOTHROW(a.validate());
    CHECK(a.gamma >= 0.7);
    CHECK(a.gamma <= 1.5);
  }
}

TEST_CASE("intensity examples") {
  const Volume v = random_volume({6, 6, 6}, 4);
  const IntensityParams none;
  CHECK(none.is_identity());
  CHECK(apply_intensity(v, none) == v);

  Volume half({5, 5, 5, 1}, {1, 1, 1});
  for (auto& x : half.values()) x = 0.5f;
  IntensityParams g;
  g.gamma = 2.0;
  const Volume squared = apply_intensity(half, g);
  for (float x : squared.values()) CHECK(x == doctest::Approx(0.25));

  Volume flat({32, 32, 32, 1}, {1, 1, 1});
  for (auto& x : flat.values()) x = 0.5f;
  IntensityParams n;
  n.noise_std = 0.1;
  n.seed = 9;
  const Volume noisy = apply_intensity(flat, n);
  double s1 = 0, s2 = 0;
  const double cnt = static_cast<double>(flat.values().size());
  for (std::size_t i = 0; i < flat.values().size(); ++i) {
    const double d = noisy.values()[i] - flat.values()[i];
    s1 += d;
    s2 += d * d;
  }
  const double sd = std::sqrt((s2 - s1 * s1 / cnt) / (cnt - 1));
  CHECK(std::abs(sd - 0.1) < 0.01);
  CHECK(apply_intensity(flat, n) == noisy);
}

TEST_CASE("denoising pairs") {
  const Volume x = random_volume({8, 8, 8}, 5);
  const auto same = make_denoising_pair(x, {}, {});
  CHECK(same.input == same.target);
  CHECK(same.target == x);

  IntensityParams g2;
  g2.gamma = 2.0;
  const auto gam = make_denoising_pair(x, {}, g2);
  CHECK(gam.target == x);
  CHECK(gam.input == apply_intensity(x, g2));

  GeometricParams geo;
  geo.rotation = {0.1, -0.05, 0.02};
  geo.scale = {1.05, 0.95, 1.0};
  geo.translation = {1.5, 0, -2};
  IntensityParams a;
  a.blur_sigma = 0.8;
  a.noise_std = 0.02;
  a.gamma = 1.3;
  a.bias_field = {0.0, 0.1, -0.05, 0.02};
  a.motion_severity = 2;
  a.seed = 17;
  const auto both = make_denoising_pair(x, geo, a);
  CHECK(both.target == apply_geometric(x, geo));
  CHECK(both.input == apply_intensity(apply_geometric(x, geo), a));
}

TEST_CASE("ranges round trip through JSON") {
  AugmentRanges r;
  r.geometric = false;
  r.gamma_max = 1.4;
  const nlohmann::json j = r;
  CHECK(nlohmann::json(j.get<AugmentRanges>()) == j);
}
