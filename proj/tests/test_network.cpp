#include <doctest.h>

#include <fstream>

#include "longiseg/error.hpp"
#include "longiseg/network.hpp"
#include "support.hpp"

using namespace longiseg;
using testing::random_tensor;

namespace {

bool all_zero(const Tensor& t) {
  for (std::size_t i = 0; i < t.size(); ++i)
    if (t[i] != 0.0f) return false;
  return true;
}

std::set<int> all_layers() {
  std::set<int> s;
  for (int i = 0; i < kNumUNetLayers; ++i) s.insert(i);
  return s;
}

}  // namespace

TEST_CASE("layer table") {
  const UNetSpec s;  // nc = 8
  CHECK(layer_channels(s, 9) == 128);
  CHECK(layer_channels(s, 11) == 192);
  CHECK(layer_channels(s, 12) == 64);
  CHECK(layer_channels(s, 20) == 24);
  CHECK(layer_channels(s, 23) == 4);
  CHECK(layer_level(9) == 4);
  CHECK(layer_level(18) == 1);
  CHECK(is_concat_layer(17));
  CHECK_FALSE(is_concat_layer(18));
  CHECK(layer_extent({32, 32, 16}, 7) == Index3{4, 4, 2});
  CHECK_THROWS_AS(layer_extent({24, 32, 32}, 1), Error);
}

TEST_CASE("tap shapes on a 16^3 input") {
  UNet net(UNetSpec{}, 1);
  const auto out = net.forward(Var(random_tensor<float>({1, 1, 16, 16, 16}, 2)), all_layers(), false);
  CHECK(out.taps.at(9).shape() == Shape{1, 128, 1, 1, 1});
  CHECK(out.output.shape() == Shape{1, 4, 16, 16, 16});
  for (int id = 0; id < kNumUNetLayers; ++id) {
    const Index3 e = layer_extent({16, 16, 16}, id);
    CHECK(out.taps.at(id).shape() == Shape{1, layer_channels(net.spec(), id), e[0], e[1], e[2]});
  }
}

TEST_CASE("zero weights give zero taps") {
  UNet net(UNetSpec{1, 2, 3}, 3);
  for (int id = 0; id < kNumUNetLayers; ++id) {
    if (is_concat_layer(id)) continue;
    auto& b = net.block(id);
    b.weight.mutable_value().fill(0.0f);
    b.bias.mutable_value().fill(0.0f);
    if (b.normalized) {
      b.gamma.mutable_value().fill(1.0f);
      b.beta.mutable_value().fill(0.0f);
    }
  }
  const auto out = net.forward(Var(random_tensor<float>({1, 1, 16, 16, 16}, 4)), all_layers(), false);
  for (const auto& [id, v] : out.taps) CHECK(all_zero(v.value()));
}

TEST_CASE("identical batch items give identical outputs in eval mode") {
  UNet net(UNetSpec{1, 4, 3}, 5);
  const Tensor one = random_tensor<float>({1, 1, 16, 16, 16}, 6);
  Tensor two({2, 1, 16, 16, 16});
  std::copy(one.data(), one.data() + one.size(), two.data());
  std::copy(one.data(), one.data() + one.size(), two.data() + one.size());
  const Tensor y = net.forward(Var(two), {}, false).output.value();
  const std::size_t half = y.size() / 2;
  for (std::size_t i = 0; i < half; ++i) REQUIRE(y[i] == y[half + i]);
}

TEST_CASE("parameter count") {
  // (in, out) of every convolution for nc = 1, n = 4
  const int convs[20][2] = {{1, 1}, {1, 1},  {1, 1},  {1, 2}, {2, 2}, {2, 4}, {4, 4}, {4, 8}, {8, 8}, {8, 16},
                            {16, 16}, {24, 8}, {8, 8}, {12, 4}, {4, 4}, {6, 2}, {2, 2}, {3, 1}, {1, 1}, {1, 4}};
  std::size_t expect = 0;
  for (int i = 0; i < 20; ++i) {
    expect += static_cast<std::size_t>(convs[i][0]) * convs[i][1] * 27 + convs[i][1];
    if (i < 19) expect += 2 * convs[i][1];  // batch norm scale and shift; the last layer has none
  }
  CHECK(expect == 23422);
  CHECK(UNet(UNetSpec{1, 1, 4}, 0).parameter_count() == expect);
  std::size_t last = 0;
  for (int nc = 1; nc <= 6; ++nc) {
    const std::size_t n = UNet(UNetSpec{1, nc, 4}, 0).parameter_count();
    CHECK(n > last);
    last = n;
  }
}

TEST_CASE("heads") {
  ProjectionHead head(16, HeadSpec{}, 7);
  const auto out = head.forward(Var(random_tensor<float>({0, 16}, 8)), true);
  CHECK(out.z.value().empty());
  CHECK(out.p.value().empty());

  const Tensor v = random_tensor<float>({10, 16}, 9);
  const auto a = head.forward(Var(v), false);
  const auto b = head.forward(Var(v), false);
  CHECK(a.z.value() == b.z.value());
  CHECK(a.p.value() == b.p.value());

  ModelSpec spec;
  spec.unet.channel_width = 2;
  spec.head.mlp_width = 24;
  spec.head_layers = {1, 3, 5, 7, 9, 12, 15, 18};
  Model model(spec, 10);
  const auto fw = model.forward(Var(random_tensor<float>({2, 1, 16, 16, 16}, 11)),
                                {spec.head_layers.begin(), spec.head_layers.end()}, true);
  for (int id : spec.head_layers) {
    const Tensor& t = fw.taps.at(id).value();
    const int C = t.dim(1);
    const Var rows = parameter(random_tensor<float>({6, C}, 12 + id));
    const auto h = model.head(id).forward(rows, true);
    CHECK(h.z.shape() == Shape{6, 24});
    CHECK(h.p.shape() == Shape{6, 24});
  }

  HeadSpec normed;
  normed.normalize_projection = true;
  ProjectionHead nh(16, normed, 13);
  const Tensor z = nh.project(Var(v), false).value();
  for (int r = 0; r < z.dim(0); ++r) {
    double n2 = 0;
    for (int c = 0; c < z.dim(1); ++c) n2 += z.at(r, c) * z.at(r, c);
    CHECK(n2 == doctest::Approx(1.0).epsilon(1e-5));
  }
  const Tensor raw = nh.project(Var(v), false, false).value();
  CHECK_FALSE(raw == z);
}

TEST_CASE("initialisation depends on seed and parameter name only") {
  ModelSpec a;
  a.unet.channel_width = 2;
  a.head.mlp_width = 16;
  a.head_layers = {1, 12};
  ModelSpec b = a;
  b.head_layers = {1, 3, 12, 15};
  Model ma(a, 21), mb(b, 21), mc(a, 22);
  auto state = [](Model& m) {
    std::map<std::string, Tensor> out;
    for (auto& t : m.state()) out[t.name] = t.tensor;
    return out;
  };
  const auto sa = state(ma), sb = state(mb), sc = state(mc);
  for (const auto& [name, t] : sa) {
    REQUIRE(sb.count(name));
    CHECK(sb.at(name) == t);
  }
  CHECK_FALSE(sc.at("unet.L01.conv.weight") == sa.at("unet.L01.conv.weight"));
  CHECK(name_seed(1, "unet.L01") != name_seed(1, "unet.L02"));
}

TEST_CASE("checkpoint round trip and corruption") {
  const auto dir = testing::scratch_dir("network_ckpt");
  ModelSpec spec;
  spec.unet.channel_width = 2;
  spec.head.mlp_width = 16;
  spec.head_layers = {3, 12};
  Model m(spec, 30);
  CheckpointData data;
  data.meta = {{"phase", "pretrain"}, {"step", 7}};
  data.tensors = m.state();
  save_checkpoint(data, dir / "m.ckpt");
  CHECK_FALSE(std::filesystem::exists(dir / "m.ckpt.tmp"));

  const auto back = load_checkpoint(dir / "m.ckpt");
  CHECK(back.meta == data.meta);
  REQUIRE(back.tensors.size() == data.tensors.size());
  for (std::size_t i = 0; i < data.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == data.tensors[i].name);
    CHECK(back.tensors[i].tensor == data.tensors[i].tensor);
  }
  Model other(spec, 31);
  other.load_state(back.tensors);
  for (auto& t : other.state()) CHECK(t.tensor == back.tensor(t.name));

  ModelSpec wider = spec;
  wider.unet.channel_width = 3;
  Model w(wider, 0);
  CHECK_THROWS_AS(w.load_state(back.tensors), Error);
  Model partial(spec, 0);
  CHECK_NOTHROW(partial.load_state(back.tensors, "unet."));
  std::vector<NamedTensor> missing(back.tensors.begin() + 1, back.tensors.end());
  CHECK_THROWS_AS(partial.load_state(missing), Error);

  const auto size = std::filesystem::file_size(dir / "m.ckpt");
  std::filesystem::copy_file(dir / "m.ckpt", dir / "short.ckpt");
  std::filesystem::resize_file(dir / "short.ckpt", size - 4);
  CHECK_THROWS_AS(load_checkpoint(dir / "short.ckpt"), Error);
  std::filesystem::copy_file(dir / "m.ckpt", dir / "long.ckpt");
  {
    std::ofstream out(dir / "long.ckpt", std::ios::binary | std::ios::app);
    out << "xxxx";
  }
  CHECK_THROWS_AS(load_checkpoint(dir / "long.ckpt"), Error);
}
