#include "longiseg/network.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "longiseg/rng.hpp"

namespace longiseg {

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian");

namespace {

constexpr int kConvLayers[] = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 13, 15, 16, 18, 19, 21, 22, 23};

// Weights and biases uniform in +-1/sqrt(fan_in).
Tensor uniform_init(Shape shape, int fan_in, std::uint64_t seed) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = static_cast<float>(rng.uniform(-bound, bound));
  return t;
}

std::string layer_name(int id) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "L%02d", id);
  return buf;
}

}  // namespace

std::uint64_t name_seed(std::uint64_t base, const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return derive_seed({base, h});
}

void UNetSpec::validate() const {
  require(in_channels >= 1, ErrorKind::config, "unet.in_channels must be >= 1");
  require(channel_width >= 1, ErrorKind::config, "unet.channel_width must be >= 1");
  require(out_channels >= 1, ErrorKind::config, "unet.out_channels must be >= 1");
}

void to_json(nlohmann::json& j, const UNetSpec& s) {
  j = nlohmann::json{{"in_channels", s.in_channels},
                     {"channel_width", s.channel_width},
                     {"out_channels", s.out_channels}};
}

void from_json(const nlohmann::json& j, UNetSpec& s) {
  s.in_channels = j.value("in_channels", s.in_channels);
  s.channel_width = j.value("channel_width", s.channel_width);
  s.out_channels = j.value("out_channels", s.out_channels);
  s.validate();
}

int layer_level(int id) {
  require(id >= 0 && id < kNumUNetLayers, ErrorKind::invalid, "layer id out of range: " + std::to_string(id));
  static constexpr int levels[kNumUNetLayers] = {0, 0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 3,
                                                 3, 3, 2, 2, 2, 1, 1, 1, 0, 0, 0, 0};
  return levels[id];
}

bool is_concat_layer(int id) { return id == 11 || id == 14 || id == 17 || id == 20; }

int layer_channels(const UNetSpec& spec, int id) {
  const int nc = spec.channel_width;
  switch (id) {
    case 0: case 1: case 2: case 21: case 22: return nc;
    case 3: case 4: case 18: case 19: return 2 * nc;
    case 5: case 6: case 15: case 16: return 4 * nc;
    case 7: case 8: case 12: case 13: return 8 * nc;
    case 9: case 10: return 16 * nc;
    case 11: return 24 * nc;
    case 14: return 12 * nc;
    case 17: return 6 * nc;
    case 20: return 3 * nc;
    case 23: return spec.out_channels;
    default: break;
  }
  throw Error(ErrorKind::invalid, "layer id out of range: " + std::to_string(id));
}

Index3 layer_extent(const Index3& input, int id) {
  const int f = 1 << layer_level(id);
  for (int a = 0; a < 3; ++a) {
    require(input[a] % (1 << kUNetLevels) == 0, ErrorKind::shape,
            "input extent must be divisible by 16");
  }
  return {input[0] / f, input[1] / f, input[2] / f};
}

ConvBlock::ConvBlock(int in_channels, int out_channels, bool norm, std::uint64_t seed)
    : stats(norm ? out_channels : 0), normalized(norm) {
  const int fan_in = in_channels * 27;
  weight = parameter(uniform_init({out_channels, in_channels, 3, 3, 3}, fan_in, derive_seed({seed, 0})));
  bias = parameter(uniform_init({out_channels}, fan_in, derive_seed({seed, 1})));
  if (normalized) {
    gamma = parameter(Tensor({out_channels}, 1.0f));
    beta = parameter(Tensor({out_channels}, 0.0f));
  }
}

Var ConvBlock::forward(const Var& x, bool training, Var* tap) {
  Var c = ops::conv3d(x, weight, bias);
  if (tap) *tap = c;
  if (!normalized) return c;
  return ops::relu(ops::batch_norm(c, gamma, beta, stats, training));
}

UNet::UNet(const UNetSpec& spec, std::uint64_t seed) : spec_(spec), blocks_(kNumUNetLayers) {
  spec_.validate();
  for (int id : kConvLayers) {
    int in = 0;
    switch (id) {
      case 0: in = spec_.in_channels; break;
      case 12: in = layer_channels(spec_, 11); break;
      case 15: in = layer_channels(spec_, 14); break;
      case 18: in = layer_channels(spec_, 17); break;
      case 21: in = layer_channels(spec_, 20); break;
      default: in = layer_channels(spec_, id - 1); break;
    }
    blocks_[id] = ConvBlock(in, layer_channels(spec_, id), id != 23, name_seed(seed, "unet." + layer_name(id)));
  }
}

ConvBlock& UNet::block(int id) {
  require(id >= 0 && id < kNumUNetLayers && !is_concat_layer(id), ErrorKind::invalid,
          "no convolution at layer " + std::to_string(id));
  return blocks_[id];
}

const ConvBlock& UNet::block(int id) const { return const_cast<UNet*>(this)->block(id); }

UNet::Output UNet::forward(const Var& x, const std::set<int>& taps, bool training) {
  const Shape& s = x.shape();
  require(s.size() == 5, ErrorKind::shape, "unet input must be [N, C, W, H, D]");
  require(s[1] == spec_.in_channels, ErrorKind::shape,
          "unet input has " + std::to_string(s[1]) + " channels, expected " +
              std::to_string(spec_.in_channels));
  for (int a = 2; a < 5; ++a) {
    require(s[a] > 0 && s[a] % (1 << kUNetLevels) == 0, ErrorKind::shape,
            "unet input extent " + shape_string(s) + " is not divisible by 16");
  }
  for (int id : taps) {
    require(id >= 0 && id < kNumUNetLayers, ErrorKind::invalid, "unknown tap layer " + std::to_string(id));
  }

  Output out;
  auto tap_ptr = [&](int id) -> Var* { return taps.count(id) ? &out.taps[id] : nullptr; };
  auto conv = [&](int id, const Var& in) { return blocks_[id].forward(in, training, tap_ptr(id)); };
  auto up_concat = [&](int id, const Var& skip, const Var& low) {
    Var c = ops::concat_channels(skip, ops::upsample2(low));
    if (taps.count(id)) out.taps[id] = c;
    return c;
  };

  Var h = conv(0, x);
  h = conv(1, h);
  Var s2 = conv(2, h);
  h = conv(3, ops::max_pool2(s2));
  Var s4 = conv(4, h);
  h = conv(5, ops::max_pool2(s4));
  Var s6 = conv(6, h);
  h = conv(7, ops::max_pool2(s6));
  Var s8 = conv(8, h);
  h = conv(9, ops::max_pool2(s8));
  h = conv(10, h);
  h = conv(12, up_concat(11, s8, h));
  h = conv(13, h);
  h = conv(15, up_concat(14, s6, h));
  h = conv(16, h);
  h = conv(18, up_concat(17, s4, h));
  h = conv(19, h);
  h = conv(21, up_concat(20, s2, h));
  h = conv(22, h);
  out.output = conv(23, h);
  return out;
}

void UNet::collect(const std::string& prefix, std::vector<NamedVar>& params,
                   std::vector<std::pair<std::string, Tensor*>>& buffers) {
  for (int id : kConvLayers) {
    ConvBlock& b = blocks_[id];
    const std::string base = prefix + layer_name(id);
    params.push_back({base + ".conv.weight", b.weight});
    params.push_back({base + ".conv.bias", b.bias});
    if (b.normalized) {
      params.push_back({base + ".bn.weight", b.gamma});
      params.push_back({base + ".bn.bias", b.beta});
      buffers.emplace_back(base + ".bn.running_mean", &b.stats.running_mean);
      buffers.emplace_back(base + ".bn.running_var", &b.stats.running_var);
    }
  }
}

std::size_t UNet::parameter_count() const {
  std::size_t n = 0;
  for (int id : kConvLayers) {
    const ConvBlock& b = blocks_[id];
    n += b.weight.value().size() + b.bias.value().size();
    if (b.normalized) n += b.gamma.value().size() + b.beta.value().size();
  }
  return n;
}

DenseBlock::DenseBlock(int in, int out, bool norm, bool relu, std::uint64_t seed)
    : stats(norm ? out : 0), normalized(norm), rectified(relu) {
  weight = parameter(uniform_init({out, in}, in, derive_seed({seed, 0})));
  bias = parameter(uniform_init({out}, in, derive_seed({seed, 1})));
  if (normalized) {
    gamma = parameter(Tensor({out}, 1.0f));
    beta = parameter(Tensor({out}, 0.0f));
  }
}

Var DenseBlock::forward(const Var& x, bool training) {
  Var h = ops::linear(x, weight, bias);
  if (normalized) h = ops::batch_norm(h, gamma, beta, stats, training);
  if (rectified) h = ops::relu(h);
  return h;
}

void HeadSpec::validate() const {
  require(mlp_width >= 1, ErrorKind::config, "head.mlp_width must be >= 1");
  require(predictor_hidden >= 0, ErrorKind::config, "head.predictor_hidden must be >= 0");
}

void to_json(nlohmann::json& j, const HeadSpec& s) {
  j = nlohmann::json{{"mlp_width", s.mlp_width},
                     {"predictor_hidden", s.predictor_hidden},
                     {"normalize_projection", s.normalize_projection},
                     {"predictor_output_norm", s.predictor_output_norm}};
}

void from_json(const nlohmann::json& j, HeadSpec& s) {
  s.mlp_width = j.value("mlp_width", s.mlp_width);
  s.predictor_hidden = j.value("predictor_hidden", s.predictor_hidden);
  s.normalize_projection = j.value("normalize_projection", s.normalize_projection);
  s.predictor_output_norm = j.value("predictor_output_norm", s.predictor_output_norm);
  s.validate();
}

ProjectionHead::ProjectionHead(int in_channels, const HeadSpec& spec, std::uint64_t seed)
    : in_channels_(in_channels), spec_(spec) {
  spec_.validate();
  const int w = spec_.mlp_width, h = spec_.hidden();
  projector_.emplace_back(in_channels, w, true, true, derive_seed({seed, 10}));
  projector_.emplace_back(w, w, true, true, derive_seed({seed, 11}));
  projector_.emplace_back(w, w, true, false, derive_seed({seed, 12}));
  predictor_.emplace_back(w, h, true, true, derive_seed({seed, 20}));
  predictor_.emplace_back(h, w, spec_.predictor_output_norm, spec_.predictor_output_norm,
                          derive_seed({seed, 21}));
}

Var ProjectionHead::project(const Var& v, bool training, bool normalize) {
  require(v.shape().size() == 2 && v.shape()[1] == in_channels_, ErrorKind::shape,
          "projector expects [M, " + std::to_string(in_channels_) + "], got " + shape_string(v.shape()));
  if (v.shape()[0] == 0) return Var(Tensor({0, spec_.mlp_width}));
  Var h = v;
  for (auto& b : projector_) h = b.forward(h, training);
  if (spec_.normalize_projection && normalize) h = ops::normalize_rows(h);
  return h;
}

Var ProjectionHead::predict(const Var& z, bool training) {
  require(z.shape().size() == 2 && z.shape()[1] == spec_.mlp_width, ErrorKind::shape,
          "predictor expects [M, " + std::to_string(spec_.mlp_width) + "]");
  if (z.shape()[0] == 0) return Var(Tensor({0, spec_.mlp_width}));
  Var h = z;
  for (auto& b : predictor_) h = b.forward(h, training);
  return h;
}

ProjectionHead::Output ProjectionHead::forward(const Var& v, bool training) {
  Output o;
  o.z = project(v, training);
  o.p = predict(o.z, training);
  return o;
}

void ProjectionHead::collect(const std::string& prefix, std::vector<NamedVar>& params,
                             std::vector<std::pair<std::string, Tensor*>>& buffers) {
  auto add = [&](const std::string& base, DenseBlock& b) {
    params.push_back({base + ".fc.weight", b.weight});
    params.push_back({base + ".fc.bias", b.bias});
    if (b.normalized) {
      params.push_back({base + ".bn.weight", b.gamma});
      params.push_back({base + ".bn.bias", b.beta});
      buffers.emplace_back(base + ".bn.running_mean", &b.stats.running_mean);
      buffers.emplace_back(base + ".bn.running_var", &b.stats.running_var);
    }
  };
  for (std::size_t i = 0; i < projector_.size(); ++i) add(prefix + "proj." + std::to_string(i), projector_[i]);
  for (std::size_t i = 0; i < predictor_.size(); ++i) add(prefix + "pred." + std::to_string(i), predictor_[i]);
}

Model::Model(const ModelSpec& spec, std::uint64_t seed) : spec_(spec), unet_(spec.unet, seed) {
  for (int id : spec_.head_layers) {
    if (heads_.count(id)) continue;
    heads_.emplace(id, ProjectionHead(layer_channels(spec_.unet, id), spec_.head,
                                      name_seed(seed, "head." + layer_name(id))));
  }
  if (spec_.reconstruction) {
    rec_ = ConvBlock(spec_.unet.out_channels, spec_.unet.in_channels, false, name_seed(seed, "rec"));
  }
}

Var Model::reconstruct(const Var& output) {
  require(spec_.reconstruction, ErrorKind::config, "model has no reconstruction layer");
  return rec_.forward(output, true);
}

ProjectionHead& Model::head(int id) {
  auto it = heads_.find(id);
  require(it != heads_.end(), ErrorKind::invalid, "no projection head for layer " + std::to_string(id));
  return it->second;
}

std::vector<NamedVar> Model::parameters() {
  std::vector<NamedVar> params;
  std::vector<std::pair<std::string, Tensor*>> bufs;
  unet_.collect("unet.", params, bufs);
  for (auto& [id, h] : heads_) h.collect("head." + layer_name(id) + ".", params, bufs);
  if (spec_.reconstruction) {
    params.push_back({"rec.conv.weight", rec_.weight});
    params.push_back({"rec.conv.bias", rec_.bias});
  }
  return params;
}

std::vector<std::pair<std::string, Tensor*>> Model::buffers() {
  std::vector<NamedVar> params;
  std::vector<std::pair<std::string, Tensor*>> bufs;
  unet_.collect("unet.", params, bufs);
  for (auto& [id, h] : heads_) h.collect("head." + layer_name(id) + ".", params, bufs);
  return bufs;
}

std::vector<NamedTensor> Model::state() {
  std::vector<NamedTensor> out;
  for (auto& p : parameters()) out.push_back({p.name, p.var.value()});
  for (auto& [name, t] : buffers()) out.push_back({name, *t});
  return out;
}

void Model::load_state(const std::vector<NamedTensor>& tensors, const std::string& prefix, bool strict) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.tensor;
  auto assign = [&](const std::string& name, Tensor& dst) {
    if (name.rfind(prefix, 0) != 0) return;
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      require(!strict, ErrorKind::format, "checkpoint lacks tensor " + name);
      return;
    }
    require_same_shape(dst.shape(), it->second->shape(), name.c_str());
    dst = *it->second;
  };
  for (auto& p : parameters()) assign(p.name, p.var.mutable_value());
  for (auto& [name, t] : buffers()) assign(name, *t);
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.var.zero_grad();
}

const Tensor& CheckpointData::tensor(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t.tensor;
  }
  throw Error(ErrorKind::format, "checkpoint lacks tensor " + name);
}

bool CheckpointData::has(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void save_checkpoint(const CheckpointData& data, const std::filesystem::path& path) {
  nlohmann::json header;
  header["format"] = "longiseg-checkpoint";
  header["version"] = 1;
  header["meta"] = data.meta;
  auto& index = header["tensors"] = nlohmann::json::array();
  for (const auto& t : data.tensors) index.push_back({{"name", t.name}, {"shape", t.tensor.shape()}});
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    const std::string line = header.dump() + "\n";
    out.write(line.data(), static_cast<std::streamsize>(line.size()));
    for (const auto& t : data.tensors) {
      out.write(reinterpret_cast<const char*>(t.tensor.data()),
                static_cast<std::streamsize>(t.tensor.size() * sizeof(float)));
    }
    require(static_cast<bool>(out), ErrorKind::io, "write failed: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open checkpoint " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), ErrorKind::format, path.string() + ": empty checkpoint");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::format, path.string() + ": malformed checkpoint header: " + e.what());
  }
  require(header.value("format", "") == "longiseg-checkpoint", ErrorKind::format,
          path.string() + ": not a checkpoint file");
  CheckpointData data;
  data.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    Tensor t(entry.at("shape").get<Shape>());
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    require(static_cast<std::size_t>(in.gcount()) == t.size() * sizeof(float), ErrorKind::format,
            path.string() + ": truncated checkpoint payload");
    data.tensors.push_back({entry.at("name").get<std::string>(), std::move(t)});
  }
  in.peek();
  require(in.eof(), ErrorKind::format, path.string() + ": trailing bytes in checkpoint");
  return data;
}

}  // namespace longiseg
