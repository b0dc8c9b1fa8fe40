#include <doctest.h>

#include <cmath>
#include <fstream>

#include <Eigen/Dense>

#include "longiseg/diagnostics.hpp"
#include "longiseg/error.hpp"
#include "support.hpp"

using namespace longiseg;
using testing::random_tensor;

namespace {

// Eigenvalues of C = 1/c sum_i (z_i - zbar)(z_i - zbar)^T built explicitly, descending.
std::vector<double> explicit_spectrum(const Tensor& f) {
  const int P = f.dim(0), c = f.dim(1);
  Eigen::MatrixXd Z(P, c);
  for (int p = 0; p < P; ++p)
    for (int i = 0; i < c; ++i) Z(p, i) = f.at(p, i);
  const Eigen::VectorXd mean = Z.rowwise().mean();
  Eigen::MatrixXd C = Eigen::MatrixXd::Zero(P, P);
  for (int i = 0; i < c; ++i) {
    const Eigen::VectorXd d = Z.col(i) - mean;
    C += d * d.transpose();
  }
  C /= c;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(C);
  std::vector<double> ev(es.eigenvalues().data(), es.eigenvalues().data() + P);
  for (auto& e : ev) e = std::max(e, 0.0);
  std::sort(ev.rbegin(), ev.rend());
  return ev;
}

Volume random_volume(Index3 n, std::uint64_t seed) {
  Volume v({n[0], n[1], n[2], 1}, {1, 1, 1});
  Rng rng(seed);
  for (auto& x : v.values()) x = static_cast<float>(rng.uniform(0.0, 1.0));
  return v;
}

}  // namespace

TEST_CASE("covariance spectrum examples") {
  // channel i = a_i * u: centred columns span one direction
  Tensor rank1({6, 5});
  for (int p = 0; p < 6; ++p)
    for (int i = 0; i < 5; ++i) rank1.at(p, i) = static_cast<float>((p + 1) * (i - 1.5));
  const auto s1 = covariance_spectrum(rank1);
  REQUIRE(s1.size() == 6);
  CHECK(s1[0] > 0.0);
  for (std::size_t k = 1; k < s1.size(); ++k) CHECK(s1[k] < 1e-9 * s1[0]);
  CHECK(effective_rank(s1) == 1);

  // identical channels leave nothing after centring
  Tensor flat({4, 3}, 2.0f);
  for (double v : covariance_spectrum(flat)) CHECK(v == doctest::Approx(0.0));

  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Tensor f = random_tensor<float>({12 + static_cast<int>(seed), 7}, seed);
    const auto got = covariance_spectrum(f), want = explicit_spectrum(f);
    REQUIRE(got.size() == want.size());
    for (std::size_t k = 0; k < got.size(); ++k) CHECK(std::abs(got[k] - want[k]) <= 1e-8);
    CHECK(std::is_sorted(got.rbegin(), got.rend()));
    // at most c - 1 non-zero values after centring over channels
    for (std::size_t k = 6; k < got.size(); ++k) CHECK(got[k] < 1e-8);
  }
  CHECK_THROWS_AS(covariance_spectrum(Tensor({0, 3})), Error);
}

TEST_CASE("effective rank") {
  std::vector<double> geo;
  for (int k = 0; k < 20; ++k) geo.push_back(std::pow(0.5, k));
  CHECK(effective_rank(geo) == 7);  // 0.5^6 = 0.0156 > 0.01 > 0.5^7
  CHECK(effective_rank(geo, 0.3) == 2);
  CHECK(effective_rank({1.0, 1.0, 1.0}) == 3);
  CHECK(effective_rank({0.0, 0.0}) == 0);
  CHECK(effective_rank({}) == 0);
}

TEST_CASE("projection std") {
  Tensor same({5, 3}, 1.5f);
  CHECK(projection_std(same) == doctest::Approx(std::sqrt(1e-4)));

  Tensor t({4, 2});
  const float col0[4] = {0, 1, 2, 3}, col1[4] = {0, 0, 2, 2};
  for (int r = 0; r < 4; ++r) {
    t.at(r, 0) = col0[r];
    t.at(r, 1) = col1[r];
  }
  const double v0 = 5.0 / 3.0, v1 = 4.0 / 3.0;  // unbiased
  CHECK(projection_std(t, 0.0) == doctest::Approx(0.5 * (std::sqrt(v0) + std::sqrt(v1))));
}

TEST_CASE("similarity maps") {
  ModelSpec spec;
  spec.unet.channel_width = 2;
  spec.head.mlp_width = 8;
  spec.head_layers = {3, 12};
  Model model(spec, 4);
  const Volume a = random_volume({16, 16, 16}, 1), b = random_volume({16, 16, 16}, 2);

  for (int layer : {3, 12, 5}) {
    CAPTURE(layer);
    const Index3 q{1, 1, 0};
    const Volume self = similarity_map(model, a, a, q, layer);
    const Index3 e = layer_extent({16, 16, 16}, layer);
    CHECK(self.spatial() == e);
    const double f = 1 << layer_level(layer);
    CHECK(self.spacing()[0] == f);
    CHECK(self.at(q[0], q[1], q[2]) == doctest::Approx(1.0).epsilon(1e-5));
    for (float v : self.values()) {
      CHECK(v <= 1.0f + 1e-5f);
      CHECK(v >= -1.0f - 1e-5f);
    }

    // recompute from the embeddings
    const Tensor za = layer_embeddings(model, a, layer), zb = layer_embeddings(model, b, layer);
    CHECK(za.dim(1) == (model.has_head(layer) ? 8 : layer_channels(spec.unet, layer)));
    const Volume cross = similarity_map(model, a, b, q, layer);
    const int qi = (q[0] * e[1] + q[1]) * e[2] + q[2];
    for (int r = 0; r < zb.dim(0); r += 3) {
      double dot = 0, n1 = 0, n2 = 0;
      for (int c = 0; c < za.dim(1); ++c) {
        dot += za.at(qi, c) * zb.at(r, c);
        n1 += za.at(qi, c) * za.at(qi, c);
        n2 += zb.at(r, c) * zb.at(r, c);
      }
      CHECK(cross.values()[r] == doctest::Approx(dot / std::sqrt(n1 * n2)).epsilon(1e-4));
    }
    CHECK_THROWS_AS(similarity_map(model, a, b, {e[0], 0, 0}, layer), Error);
  }

  // a constant key volume gives a constant map in encoder layers away from the border
  Volume flat({16, 16, 16, 1}, {1, 1, 1});
  for (auto& x : flat.values()) x = 0.5f;
  const Volume m = similarity_map(model, a, flat, {0, 0, 0}, 1);
  CHECK(m.at(5, 5, 5) == doctest::Approx(m.at(9, 6, 7)).epsilon(1e-5));

  // model overload of the spectrum: one value per position of the middle slice
  const auto sv = covariance_spectrum(model, a, 3);
  const Index3 e3 = layer_extent({16, 16, 16}, 3);
  CHECK(sv.size() == static_cast<std::size_t>(e3[0] * e3[1]));
  const auto std_map = projection_std(model, a, {3, 12});
  CHECK(std_map.size() == 2);
  CHECK(std_map.at(3) > 0.0);
}

TEST_CASE("loss csv reader") {
  const auto dir = testing::scratch_dir("diag_csv");
  {
    std::ofstream out(dir / "loss.csv");
    out << "step,lr,total,orth\n1,0.1,2.5,\n2,0.1,1.5,-0.5\n3,0.1,1.0,-0.97\n";
  }
  const auto c = read_loss_csv(dir / "loss.csv");
  CHECK(c.columns.size() == 4);
  CHECK(c.column("orth") == 3);
  CHECK(c.column("missing") == -1);
  CHECK_FALSE(c.rows[0][3].has_value());
  CHECK(*c.rows[1][3] == -0.5);
  CHECK(first_step_at_or_below(c, "orth", -0.95) == 3);
  CHECK(first_step_at_or_below(c, "orth", -0.5) == 2);
  CHECK_FALSE(first_step_at_or_below(c, "orth", -2.0).has_value());
  {
    std::ofstream out(dir / "ragged.csv");
    out << "step,total\n1,2,3\n";
  }
  CHECK_THROWS_AS(read_loss_csv(dir / "ragged.csv"), Error);
  CHECK_THROWS_AS(read_loss_csv(dir / "absent.csv"), Error);
}
