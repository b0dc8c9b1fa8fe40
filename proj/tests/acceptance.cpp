// Acceptance run: one PASS/FAIL line per criterion.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

#include "longiseg/diagnostics.hpp"
#include "longiseg/error.hpp"
#include "longiseg/losses.hpp"
#include "longiseg/metrics.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/sampling.hpp"
#include "longiseg/synthdata.hpp"
#include "longiseg/training.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace longiseg;
namespace fs = std::filesystem;
using testing::central_difference;
using testing::max_rel_error;
using testing::random_tensor;

namespace {

// Desk-scale settings shared by the training criteria.
constexpr double kDeskLr = 1e-2;
constexpr int kCollapseSteps = 500;
constexpr int kCollapseWindow = 25;
constexpr double kCollapseLevel = -0.95;
constexpr int kTransferPretrainSteps = 300;
constexpr int kTransferFinetuneSteps = 200;
constexpr int kTransferValidateEvery = 50;
constexpr double kTransferDiceMargin = 0.02;
constexpr int kDeterminismSteps = 100;
const std::vector<int> kDecoderTaps{12, 15, 18};

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      if (!pass) detail << "; ";
      pass = false;
      detail << what;
    }
  }
};

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

class Clock {
 public:
  double wall() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - w0_).count(); }
  double cpu() const { return static_cast<double>(std::clock() - c0_) / CLOCKS_PER_SEC; }

 private:
  std::chrono::steady_clock::time_point w0_ = std::chrono::steady_clock::now();
  std::clock_t c0_ = std::clock();
};

TensorD one_hot(const std::vector<int>& labels, int C) {
  TensorD t({1, C, 2, 2, 2});
  for (int s = 0; s < 8; ++s) t[labels[s] * 8 + s] = 1.0;
  return t;
}

// A normalised [1, C, 1, 1, S] probability map.
TensorD random_prob(int C, int S, std::uint64_t seed) {
  TensorD t = random_tensor<double>({1, C, 1, 1, S}, seed, 0.1, 1.0);
  for (int s = 0; s < S; ++s) {
    double z = 0;
    for (int c = 0; c < C; ++c) z += t[c * S + s];
    for (int c = 0; c < C; ++c) t[c * S + s] /= z;
  }
  return t;
}

// Worst relative error of the tangent part of an analytic gradient of a
// function of a probability map: mass moved between channel pairs of a voxel.
double simplex_fd_error(const std::function<double(const TensorD&)>& f, const TensorD& p, const TensorD& grad) {
  const int C = p.dim(1);
  const int S = static_cast<int>(p.size()) / C;
  const double h = 1e-6;
  double worst = 0.0;
  for (int s = 0; s < S; ++s)
    for (int a = 0; a < C; ++a)
      for (int b = a + 1; b < C; ++b) {
        TensorD up = p, down = p;
        up[a * S + s] += h;
        up[b * S + s] -= h;
        down[a * S + s] -= h;
        down[b * S + s] += h;
        const double fd = (f(up) - f(down)) / (2 * h);
        const double an = grad[a * S + s] - grad[b * S + s];
        worst = std::max(worst, std::abs(fd - an) / std::max(std::abs(fd), 1e-3));
      }
  return worst;
}

// ---------------------------------------------------------------------------

Outcome loss_identities() {
  Outcome o;
  const auto z1 = random_tensor<double>({5, 4}, 1), z2 = random_tensor<double>({5, 4}, 2);
  const double aligned = sim_pair(z2, z1, z1, z2).value;
  o.check(std::abs(aligned + 1.0) <= 1e-6, "sim_pair aligned = " + fmt(aligned, 12));

  // columns spread far above eta: zero hinge
  TensorD wide({6, 3});
  for (int r = 0; r < 6; ++r)
    for (int c = 0; c < 3; ++c) wide.at(r, c) = (r % 2 ? 5.0 : -5.0) * (c + 1);
  o.check(std_loss<double>({&wide}, 1.0, 1e-4).value == 0.0, "std_loss not zero for spread columns");

  // uncorrelated columns: orthogonal +-1 patterns
  TensorD unc({4, 2});
  const double pa[4] = {1, -1, 1, -1}, pb[4] = {1, 1, -1, -1};
  for (int r = 0; r < 4; ++r) {
    unc.at(r, 0) = pa[r];
    unc.at(r, 1) = pb[r];
  }
  o.check(std::abs(cov_loss<double>({&unc}).value) <= 1e-15, "cov_loss not zero for uncorrelated columns");

  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto a = random_tensor<double>({5, 4}, 100 + seed), b = random_tensor<double>({5, 4}, 200 + seed);
    const double v = orth_loss(a, b).value;
    if (v < -1.0 - 1e-12 || v > 1.0 + 1e-12) o.check(false, "orth_loss outside [-1, 1]: " + fmt(v));
  }
  o.check(std::abs(orth_loss(z1, z1).value - 1.0) <= 1e-12, "orth_loss(z, z) != 1");

  const auto pa2 = one_hot({0, 1, 2, 3, 3, 2, 1, 0}, 4);
  o.check(std::abs(cs_loss(pa2, pa2).value) <= 1e-9, "cs_loss identical != 0");
  const auto disjoint_a = one_hot({1, 1, 1, 1, 0, 0, 0, 0}, 2), disjoint_b = one_hot({0, 0, 0, 0, 1, 1, 1, 1}, 2);
  const double disjoint = cs_loss(disjoint_a, disjoint_b).value;
  o.check(std::abs(disjoint - (1.0 - kDiceSmooth / (8.0 + kDiceSmooth))) <= 1e-12,
          "cs_loss disjoint = " + fmt(disjoint, 10));
  const auto half_a = one_hot({1, 1, 0, 0, 1, 1, 0, 0}, 2), half_b = one_hot({1, 0, 1, 0, 1, 0, 1, 0}, 2);
  o.check(std::abs(cs_loss(half_a, half_b).value - 0.5) <= 1e-6, "cs_loss half overlap != 0.5");

  const std::vector<std::uint16_t> labels{0, 1, 2, 3, 3, 2, 1, 0};
  o.check(std::abs(sup_loss(pa2, std::span<const std::uint16_t>(labels)).value) <= 1e-9, "sup_loss perfect != 0");
  TensorD uniform({1, 4, 2, 2, 2}, 0.25);
  const double dice_term = sup_loss(uniform, std::span<const std::uint16_t>(labels)).value - std::log(4.0);
  o.check(std::abs(dice_term - (1.0 - (1.0 + kDiceSmooth) / (2.5 + kDiceSmooth))) <= 1e-9,
          "sup_loss uniform CE term != ln 4");
  const std::vector<std::uint16_t> no3{0, 1, 2, 0, 0, 2, 1, 0};
  o.check(std::abs(sup_loss(one_hot({0, 1, 2, 0, 0, 2, 1, 0}, 4), std::span<const std::uint16_t>(no3)).value) <= 1e-9,
          "absent class does not count as Dice 1");

  PretrainParts parts{1, 1, 1, 1, 1};
  o.check(std::abs(pretrain_total(parts, LossWeights{}) - 111.002) <= 1e-9, "pretrain_total of unit parts != 111.002");
  if (o.pass) o.detail << "sim aligned " << fmt(aligned, 10) << ", all tabulated cases hold";
  return o;
}

Outcome stop_gradient() {
  Outcome o;
  double worst = 0.0;
  auto track = [&](double e, const std::string& what) {
    worst = std::max(worst, e);
    o.check(e < 1e-4, what + " rel err " + fmt(e));
  };

  const auto p1 = random_tensor<double>({5, 4}, 5), z1 = random_tensor<double>({5, 4}, 6);
  const auto p2 = random_tensor<double>({5, 4}, 7), z2 = random_tensor<double>({5, 4}, 8);
  const auto r = sim_pair(p1, z1, p2, z2);
  o.check(r.grads.size() == 4 && r.grads[1].empty() && r.grads[3].empty(), "sim_pair returns a z gradient");

  // through the graph: the target branch receives nothing
  {
    auto cast = [](const TensorD& t) {
      Tensor f(t.shape());
      for (std::size_t i = 0; i < t.size(); ++i) f[i] = static_cast<float>(t[i]);
      return f;
    };
    const Var vp1 = parameter(cast(p1)), vz1 = parameter(cast(z1)), vp2 = parameter(cast(p2)),
              vz2 = parameter(cast(z2));
    backward(ops::scalar_objective({vp1, vz1, vp2, vz2}, [](const std::vector<const Tensor*>& t) {
      return sim_pair(*t[0], *t[1], *t[2], *t[3]);
    }));
    bool zero = true;
    for (const Var* v : {&vz1, &vz2})
      if (v->has_grad())
        for (std::size_t i = 0; i < v->grad().size(); ++i) zero = zero && v->grad()[i] == 0.0f;
    o.check(zero, "graph gradient reaches a z input");
    o.check(vp1.has_grad() && vp2.has_grad(), "graph gradient misses a p input");
  }

  track(max_rel_error(r.grads[0], central_difference([&](const TensorD& x) { return sim_pair(x, z1, p2, z2).value; }, p1)),
        "sim p1");
  track(max_rel_error(r.grads[2], central_difference([&](const TensorD& x) { return sim_pair(p1, z1, x, z2).value; }, p2)),
        "sim p2");

  for (bool sq : {false, true}) {
    const auto ro = orth_loss(p1, z1, sq);
    track(max_rel_error(ro.grads[0], central_difference([&](const TensorD& x) { return orth_loss(x, z1, sq).value; }, p1)),
          "orth enc");
    track(max_rel_error(ro.grads[1], central_difference([&](const TensorD& x) { return orth_loss(p1, x, sq).value; }, z1)),
          "orth dec");
  }

  // std hinge active on some columns only
  TensorD narrow = random_tensor<double>({5, 4}, 9, -0.6, 0.6);
  for (int r2 = 0; r2 < 5; ++r2) narrow.at(r2, 3) *= 8.0;
  const TensorD other = random_tensor<double>({4, 4}, 10, -0.5, 0.5);
  const auto rs = std_loss<double>({&narrow, &other}, 1.0, 1e-4);
  track(max_rel_error(rs.grads[0], central_difference([&](const TensorD& x) { return std_loss<double>({&x, &other}, 1.0, 1e-4).value; }, narrow)),
        "std");
  const auto rc = cov_loss<double>({&narrow, &other});
  track(max_rel_error(rc.grads[1], central_difference([&](const TensorD& x) { return cov_loss<double>({&narrow, &x}).value; }, other)),
        "cov");
  const auto out = random_tensor<double>({5, 4}, 11), tgt = random_tensor<double>({5, 4}, 12);
  const auto rr = rec_loss(out, tgt);
  track(max_rel_error(rr.grads[0], central_difference([&](const TensorD& x) { return rec_loss(x, tgt).value; }, out)),
        "rec");
  o.check(rr.grads[1].empty(), "rec target receives a gradient");

  const TensorD pj = random_prob(4, 5, 13), pk = random_prob(4, 5, 14);
  const auto rcs = cs_loss(pj, pk);
  track(simplex_fd_error([&](const TensorD& x) { return cs_loss(x, pk).value; }, pj, rcs.grads[0]), "cs j");
  track(simplex_fd_error([&](const TensorD& x) { return cs_loss(pj, x).value; }, pk, rcs.grads[1]), "cs k");
  const std::vector<std::uint16_t> lab{0, 3, 1, 1, 2};
  const auto rsup = sup_loss(pj, std::span<const std::uint16_t>(lab));
  track(simplex_fd_error([&](const TensorD& x) { return sup_loss(x, std::span<const std::uint16_t>(lab)).value; }, pj,
                         rsup.grads[0]),
        "sup");
  o.detail << (o.pass ? "" : "; ") << "z gradients exactly zero, worst FD rel err " << fmt(worst, 3);
  return o;
}

Outcome metric_oracles() {
  Outcome o;
  Rng rng(2024);
  const Index3 n{8, 8, 8};
  const std::size_t V = 512;
  std::map<std::string, int> miss;
  int defined_hd = 0;
  double worst_hd = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Spacing sp = trial % 2 == 0 ? Spacing{1.0, 1.0, 1.0}
                                      : Spacing{rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 3.0)};
    const double pa = rng.uniform(0.0, 0.6), pb = rng.uniform(0.0, 0.6);
    oracle::Counts dummy;
    (void)dummy;
    std::vector<std::uint8_t> a(V), b(V);
    // every 10th pair has an empty mask
    for (std::size_t i = 0; i < V; ++i) {
      a[i] = trial % 10 == 3 ? 0 : rng.uniform(0.0, 1.0) < pa;
      b[i] = rng.uniform(0.0, 1.0) < pb;
    }
    if (dice(a, b) != oracle::dice(a, b)) ++miss["dice"];
    if (iou(a, b) != oracle::iou(a, b)) ++miss["iou"];
    const auto h = hd95(a, b, n, sp), ho = oracle::hd95(a, b, n, sp);
    if (h.has_value() != ho.has_value()) {
      ++miss["hd95 definedness"];
    } else if (h) {
      ++defined_hd;
      worst_hd = std::max(worst_hd, std::abs(*h - *ho));
    }

    // multi-label volumes for the consistency metrics
    std::vector<std::uint16_t> la(V), lb(V);
    for (std::size_t i = 0; i < V; ++i) {
      la[i] = static_cast<std::uint16_t>(rng.below(4));
      lb[i] = rng.uniform(0.0, 1.0) < 0.7 ? la[i] : static_cast<std::uint16_t>(rng.below(4));
    }
    const LabelVolume A(n, 4, la, sp), B(n, 4, lb, sp);
    double expect = 0.0;
    for (int l = 1; l < 4; ++l) {
      std::vector<std::uint8_t> ma(V), mb(V);
      for (std::size_t i = 0; i < V; ++i) {
        ma[i] = la[i] == l;
        mb[i] = lb[i] == l;
      }
      expect += oracle::dice(ma, mb);
    }
    if (stcs(A, B) != expect / 3.0) ++miss["stcs"];
    for (int l = 1; l < 4; ++l) {
      const double va = static_cast<double>(std::count(la.begin(), la.end(), l)) * sp[0] * sp[1] * sp[2];
      const double vb = static_cast<double>(std::count(lb.begin(), lb.end(), l)) * sp[0] * sp[1] * sp[2];
      if (label_volume_mm3(A, l) != va || label_volume_mm3(B, l) != vb) ++miss["volume"];
      if (va + vb > 0 && aspc(va, vb) != oracle::aspc(va, vb)) ++miss["aspc"];
    }
  }
  for (const auto& [name, count] : miss) o.check(false, name + " " + std::to_string(count) + " exact mismatches");
  o.check(worst_hd <= 1e-9, "HD95 deviation " + fmt(worst_hd));
  o.detail << (o.pass ? "" : "; ") << "1000 pairs, " << defined_hd << " with defined HD95, max HD95 deviation "
           << fmt(worst_hd, 3);
  return o;
}

// Centre-tap kernels summing all input channels, zero bias, identity batch norm.
void make_pass_through(UNet& net) {
  for (int id = 0; id < kNumUNetLayers; ++id) {
    if (is_concat_layer(id)) continue;
    auto& b = net.block(id);
    Tensor& w = b.weight.mutable_value();
    w.fill(0.0f);
    const int co = w.dim(0), ci = w.dim(1);
    for (int oc = 0; oc < co; ++oc)
      for (int i = 0; i < ci; ++i) w[((static_cast<std::size_t>(oc) * ci + i) * 27) + 13] = 1.0f;
    b.bias.mutable_value().fill(0.0f);
    if (b.normalized) {
      b.gamma.mutable_value().fill(1.0f);
      b.beta.mutable_value().fill(0.0f);
      b.stats.running_mean.fill(0.0f);
      b.stats.running_var.fill(1.0f);
    }
  }
}

Outcome correspondence(const fs::path& work) {
  Outcome o;
  // identical timepoints of a phantom subject
  PhantomConfig pc;
  pc.grid_size = {16, 16, 16};
  pc.growth_rate = 0.25;
  pc.center_jitter = 1.0;
  pc.min_timepoints = pc.max_timepoints = 2;
  const auto subj = generate_subject(pc, 8);
  const Volume& img = subj.timepoints[0].image;
  Tensor pair({2, 1, 16, 16, 16});
  volume_to_channels_first(img, pair.data());
  volume_to_channels_first(img, pair.data() + img.values().size());
  UNet net(UNetSpec{1, 4, 4}, 3);
  std::set<int> taps;
  std::map<int, Index3> extents;
  for (int id = 0; id < kNumUNetLayers; ++id) {
    taps.insert(id);
    extents[id] = layer_extent(pc.grid_size, id);
  }
  int unequal = 0;
  {
    NoGradGuard guard;
    const auto fw = net.forward(Var(pair), taps, true);
    const auto plan = make_plan(extents, 32, 5);
    for (int id : taps)
      if (!(gather(fw.taps, plan, id, 0).value() == gather(fw.taps, plan, id, 1).value())) ++unequal;
  }
  o.check(unequal == 0, std::to_string(unequal) + " layers gather different rows for identical timepoints");

  // impulse responses through a pass-through network
  UNet pass(UNetSpec{1, 1, 2}, 11);
  make_pass_through(pass);
  const int s = 16, batch = 64;
  std::map<int, std::map<Index3, std::set<Index3>>> receptive;
  std::vector<Index3> voxels;
  for (int w = 0; w < s; ++w)
    for (int h = 0; h < s; ++h)
      for (int d = 0; d < s; ++d) voxels.push_back({w, h, d});
  {
    NoGradGuard guard;
    for (std::size_t start = 0; start < voxels.size(); start += batch) {
      Tensor x({batch, 1, s, s, s});
      for (int b = 0; b < batch; ++b) {
        const Index3 v = voxels[start + b];
        x[(static_cast<std::size_t>(b) * s * s * s) + (v[0] * s + v[1]) * s + v[2]] = 1.0f;
      }
      const auto fw = pass.forward(Var(x), taps, false);
      for (const auto& [id, var] : fw.taps) {
        const Tensor& t = var.value();
        const int C = t.dim(1), W = t.dim(2), H = t.dim(3), D = t.dim(4);
        for (int b = 0; b < batch; ++b)
          for (int c = 0; c < C; ++c)
            for (int w = 0; w < W; ++w)
              for (int h = 0; h < H; ++h)
                for (int d = 0; d < D; ++d)
                  if (t[((((static_cast<std::size_t>(b) * C + c) * W + w) * H + h) * D) + d] != 0.0f)
                    receptive[id][{w, h, d}].insert(voxels[start + b]);
      }
    }
  }
  int bad = 0, checked = 0;
  for (int id = 0; id < kNumUNetLayers; ++id) {
    const int f = 1 << layer_level(id);
    const Index3 e = layer_extent({s, s, s}, id);
    for (int w = 0; w < e[0]; ++w)
      for (int h = 0; h < e[1]; ++h)
        for (int d = 0; d < e[2]; ++d) {
          std::set<Index3> cube;
          for (int a = 0; a < f; ++a)
            for (int b = 0; b < f; ++b)
              for (int c = 0; c < f; ++c) cube.insert({w * f + a, h * f + b, d * f + c});
          const auto& got = receptive[id][{w, h, d}];
          const bool ok = id <= 10 ? got == cube : std::includes(got.begin(), got.end(), cube.begin(), cube.end());
          bad += !ok;
          ++checked;
        }
  }
  o.check(bad == 0, std::to_string(bad) + " of " + std::to_string(checked) + " indices miss their 2^l cube");
  (void)work;
  if (o.pass) o.detail << "24 layers gather equal rows; " << checked << " indices cover their 2^l cube";
  return o;
}

TrainConfig desk_config(char row) {
  TrainConfig base;
  base.lr = kDeskLr;
  base.validate_every = 0;
  base.seed = 0;
  return ablation_preset(row, base);
}

const DatasetManifest& collapse_dataset(const fs::path& work) {
  static std::optional<DatasetManifest> m;
  if (!m) {
    PhantomConfig pc;  // 32^3, 10 subjects
    pc.rng_seed = 0;
    const fs::path dir = work / "phantom32";
    fs::remove_all(dir);
    m = generate_dataset(pc, dir, 1);
  }
  return *m;
}

// Mean effective rank over decoder taps, averaged over every test-split image.
double decoder_rank(Model& model, const DatasetManifest& m, std::map<int, double>& per_layer) {
  int images = 0;
  per_layer.clear();
  for (const auto& id : m.split("test")) {
    const auto subj = m.load_subject(id);
    for (const auto& tp : subj.timepoints) {
      ++images;
      for (int l : kDecoderTaps) per_layer[l] += effective_rank(covariance_spectrum(model, tp.image, l));
    }
  }
  double mean = 0.0;
  for (auto& [l, v] : per_layer) {
    v /= images;
    mean += v;
  }
  return mean / static_cast<double>(kDecoderTaps.size());
}

Outcome collapse(const fs::path& work) {
  Outcome o;
  const Clock clock;
  const auto& data = collapse_dataset(work);
  std::map<char, double> rank;
  std::map<char, std::map<int, double>> layers;
  for (char row : {'E', 'J'}) {
    auto cfg = desk_config(row);
    cfg.pretrain_steps = kCollapseSteps;
    RunOptions opt;
    opt.out_dir = work / (std::string("collapse_") + row);
    fs::remove_all(opt.out_dir);
    const auto r = pretrain(cfg, data, opt);
    Model model = model_from_checkpoint(load_checkpoint(r.last_checkpoint));
    rank[row] = decoder_rank(model, data, layers[row]);
  }
  auto describe = [&](char row) {
    std::ostringstream s;
    s << row << " " << fmt(rank[row], 3) << " (";
    for (int l : kDecoderTaps) s << (l == kDecoderTaps.front() ? "" : "/") << fmt(layers[row][l], 3);
    s << ")";
    return s.str();
  };
  const bool a = rank['J'] > rank['E'];
  o.check(a, "(a) decoder rank J not above E");

  const auto curve = read_loss_csv(work / "collapse_E" / "loss.csv");
  std::ostringstream firsts;
  bool b = true;
  for (int l : kDecoderTaps) {
    const std::string col = "sim_L" + std::to_string(l);
    const auto first = first_step_at_or_below(curve, col, kCollapseLevel);
    double at_window = 0.0;
    for (const auto& row : curve.rows)
      if (row[0] && static_cast<int>(*row[0]) == kCollapseWindow) at_window = *row[curve.column(col)];
    firsts << (l == kDecoderTaps.front() ? "" : ", ") << "L" << l << " step "
           << (first ? std::to_string(*first) : std::string("never")) << " (" << fmt(at_window, 3) << " at "
           << kCollapseWindow << ")";
    b = b && first && *first <= kCollapseWindow;
  }
  o.check(b, "(b) row E decoder sim not <= -0.95 within 25 steps");
  const double secs = clock.wall();
  o.check(secs <= 15 * 60, "runtime " + fmt(secs, 4) + " s over 15 min");
  o.detail << (o.pass ? "" : "; ") << "decoder rank " << describe('E') << " vs " << describe('J')
           << "; E decoder sim first <= -0.95: " << firsts.str() << "; " << fmt(secs, 4) << " s wall, "
           << fmt(clock.cpu(), 4) << " s cpu";
  return o;
}

Outcome transfer(const fs::path& work) {
  Outcome o;
  const Clock clock;
  PhantomConfig pc = PhantomConfig::isointense_preset();
  pc.rng_seed = 0;
  const fs::path dir = work / "isointense";
  fs::remove_all(dir);
  const auto data = generate_dataset(pc, dir, 1);

  TrainConfig cfg;  // every regulariser on
  cfg.lr = kDeskLr;
  cfg.pretrain_steps = kTransferPretrainSteps;
  cfg.finetune_steps = kTransferFinetuneSteps;
  cfg.validate_every = 0;
  cfg.weights.cs_weight = 1.0;
  RunOptions popt;
  popt.out_dir = work / "transfer_pretrain";
  fs::remove_all(popt.out_dir);
  const auto pre = pretrain(cfg, data, popt);

  double dice_sum[2] = {0, 0}, stcs_sum[2] = {0, 0};
  std::ostringstream per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    for (int arm = 0; arm < 2; ++arm) {
      auto fcfg = cfg;
      fcfg.seed = seed;
      fcfg.validate_every = kTransferValidateEvery;
      FinetuneOptions f;
      f.out_dir = work / ("transfer_" + std::string(arm == 0 ? "pretrained" : "random") + "_" + std::to_string(seed));
      fs::remove_all(f.out_dir);
      if (arm == 0) f.init_checkpoint = pre.last_checkpoint;
      const auto r = finetune(fcfg, data, f);
      Model model = model_from_checkpoint(load_checkpoint(r.best_checkpoint));
      const auto report = evaluate_split(model_segmenter(model), data, "test");
      report.write(f.out_dir / "test_report.json");
      dice_sum[arm] += report.mean_dice().mean;
      stcs_sum[arm] += report.mean_stcs().mean;
      per_seed << (seed == 1 && arm == 0 ? "" : ", ") << (arm == 0 ? "pre" : "rand") << seed << " "
               << fmt(report.mean_dice().mean, 3) << "/" << fmt(report.mean_stcs().mean, 3);
    }
  }
  const double dp = dice_sum[0] / 3, dr = dice_sum[1] / 3, sp = stcs_sum[0] / 3, sr = stcs_sum[1] / 3;
  o.check(dp >= dr + kTransferDiceMargin, "Dice gain " + fmt(dp - dr, 3) + " below 0.02");
  o.check(sp > sr, "STCS not higher");
  const double secs = clock.wall();
  o.check(secs <= 30 * 60, "runtime " + fmt(secs, 4) + " s over 30 min");
  o.detail << (o.pass ? "" : "; ") << "Dice " << fmt(dp, 4) << " vs " << fmt(dr, 4) << ", STCS " << fmt(sp, 4) << " vs "
           << fmt(sr, 4) << " (pretrained vs random, dice/stcs per seed: " << per_seed.str() << "); "
           << fmt(secs, 4) << " s wall";
  return o;
}

Outcome switchboard(const fs::path& work) {
  Outcome o;
  PhantomConfig pc;
  pc.grid_size = {16, 16, 16};
  pc.growth_rate = 0.25;
  pc.center_jitter = 1.0;
  pc.num_subjects = 5;
  pc.min_timepoints = 2;
  pc.max_timepoints = 3;
  const fs::path dir = work / "switchboard_data";
  fs::remove_all(dir);
  const auto data = generate_dataset(pc, dir, 1);

  // Loss layers, L_rec, beta, mu/gamma, L_cs checkmarks of the ablation table.
  struct Row {
    char id;
    bool enc_only, rec, orth, varcov, cs;
  };
  const Row table[] = {
      {'A', true, false, false, false, false},  {'B', true, false, false, false, false},
      {'C', true, true, false, false, false},   {'D', false, true, false, false, false},
      {'E', false, false, false, false, false}, {'F', false, true, false, false, false},
      {'G', false, true, true, false, false},   {'H', false, true, false, true, false},
      {'I', false, true, true, true, false},    {'J', false, true, true, true, false},
      {'K', false, true, true, true, false},     {'L', false, true, true, true, true},
  };
  auto present = [](const LossCurve& c, const std::string& col) {
    const int k = c.column(col);
    if (k < 0 || c.rows.empty()) return false;
    for (const auto& r : c.rows)
      if (!r[k]) return false;
    return true;
  };
  std::string wrong;
  for (const auto& row : table) {
    TrainConfig base;
    base.unet.channel_width = 2;
    base.head.mlp_width = 16;
    base.patches_per_layer = 16;
    base.crop_size = {16, 16, 16};
    base.batch_size = 2;
    base.pretrain_steps = 1;
    base.finetune_steps = 1;
    base.validate_every = 0;
    const auto cfg = ablation_preset(row.id, base);
    RunOptions opt;
    opt.out_dir = work / "switchboard" / std::string(1, row.id);
    fs::remove_all(opt.out_dir);
    pretrain(cfg, data, opt);
    const auto pc2 = read_loss_csv(opt.out_dir / "loss.csv");
    FinetuneOptions f;
    f.out_dir = opt.out_dir / "finetune";
    finetune(cfg, data, f);
    const auto fc = read_loss_csv(f.out_dir / "loss.csv");

    std::vector<int> sim_cols;
    for (const auto& c : pc2.columns)
      if (c.rfind("sim_L", 0) == 0) sim_cols.push_back(std::stoi(c.substr(5)));
    const std::vector<int> expect_taps =
        row.enc_only ? std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11} : std::vector<int>{1, 3, 5, 7, 9, 12, 15, 18};
    const bool ok = present(pc2, "sim") && sim_cols == expect_taps && present(pc2, "rec") == row.rec &&
                    present(pc2, "orth") == row.orth && present(pc2, "std") == row.varcov &&
                    present(pc2, "cov") == row.varcov && present(fc, "sup") && present(fc, "cs") == row.cs;
    if (!ok) wrong += row.id;
  }
  o.check(wrong.empty(), "rows " + wrong + " deviate from the table");
  if (o.pass) o.detail << "rows A-L match (sim taps, rec, orth, std, cov, cs)";
  return o;
}

Outcome determinism(const fs::path& work) {
  Outcome o;
  const auto& data = collapse_dataset(work);
  auto cfg = desk_config('J');
  cfg.pretrain_steps = kDeterminismSteps;
  RunOptions opt;
  opt.workers = 0;
  std::vector<fs::path> dirs;
  for (const char* name : {"determinism_a", "determinism_b", "determinism_resume"}) {
    dirs.push_back(work / name);
    fs::remove_all(dirs.back());
  }
  opt.out_dir = dirs[0];
  pretrain(cfg, data, opt);
  opt.out_dir = dirs[1];
  pretrain(cfg, data, opt);
  opt.out_dir = dirs[2];
  opt.stop_after = kDeterminismSteps / 2;
  pretrain(cfg, data, opt);
  opt.stop_after = -1;
  opt.resume = true;
  pretrain(cfg, data, opt);

  const std::string ref = read_text(dirs[0] / "loss.csv");
  o.check(!ref.empty() && ref == read_text(dirs[1] / "loss.csv"), "repeated run loss.csv differs");
  o.check(ref == read_text(dirs[2] / "loss.csv"), "resumed run loss.csv differs");
  const auto ka = load_checkpoint(dirs[0] / "last.ckpt"), kc = load_checkpoint(dirs[2] / "last.ckpt");
  bool same = ka.tensors.size() == kc.tensors.size();
  for (std::size_t i = 0; same && i < ka.tensors.size(); ++i)
    same = ka.tensors[i].name == kc.tensors[i].name && ka.tensors[i].tensor == kc.tensors[i].tensor;
  o.check(same, "resumed checkpoint differs");
  if (o.pass) o.detail << kDeterminismSteps << " steps: loss CSVs bitwise equal, resume at step " << kDeterminismSteps / 2
                       << " reproduces CSV and all " << ka.tensors.size() << " checkpoint tensors";
  return o;
}

Outcome constants() {
  Outcome o;
  const nlohmann::json j = TrainConfig{};
  const auto& w = j["weights"];
  o.check(w["lambda_sim"] == 1.0 && w["alpha_rec"] == 10.0 && w["gamma_cov"] == 1e-3 && w["beta_orth"] == 100.0,
          "loss weights");
  o.check(w["eta"] == 1.0 && w["epsilon"] == 1e-4, "eta/epsilon");
  o.check(j["lr"] == 2e-4, "lr");
  o.check(j["adam"]["beta1_pretrain"] == 0.9 && j["adam"]["beta1_finetune"] == 0.5 && j["adam"]["beta2"] == 0.999,
          "adam betas");
  o.check(j["taps"]["sim"] == std::vector<int>{1, 3, 5, 7, 9, 12, 15, 18}, "sim taps");
  o.check(j["taps"]["orth"] == std::vector<int>{8, 12}, "orth taps");
  o.check(j["taps"]["varcov"] == std::vector<int>{12, 15, 18}, "varcov taps");
  if (o.pass) o.detail << "defaults serialise to the published constants";
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  set_blas_threads(1);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"loss identities", loss_identities},
      {"stop-gradient and finite differences", stop_gradient},
      {"metric oracle equivalence", metric_oracles},
      {"correspondence soundness", [&] { return correspondence(work); }},
      {"collapse reproduction", [&] { return collapse(work); }},
      {"transfer benefit", [&] { return transfer(work); }},
      {"ablation switchboard", [&] { return switchboard(work); }},
      {"determinism and resume", [&] { return determinism(work); }},
      {"paper constants", constants},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    const Clock clock;
    Outcome out;
    try {
      out = criteria[i].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail << "threw: " << e.what();
    }
    all = all && out.pass;
    std::cout << "criterion " << id << ": " << (out.pass ? "PASS" : "FAIL") << "  " << criteria[i].first << " - "
              << out.detail.str() << " [" << fmt(clock.wall(), 4) << " s]" << std::endl;
  }
  return all ? 0 : 1;
}
