#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "longiseg/ops.hpp"
#include "longiseg/volume.hpp"

namespace longiseg {

/// Layer ids 0..23 of the U-Net table; layers 11/14/17/20 are upsample+concat.
inline constexpr int kNumUNetLayers = 24;
inline constexpr int kUNetLevels = 4;

struct UNetSpec {
  int in_channels = 1;
  int channel_width = 8;  // nc
  int out_channels = 4;   // n (number of labels)

  void validate() const;
};

void to_json(nlohmann::json& j, const UNetSpec& s);
void from_json(const nlohmann::json& j, UNetSpec& s);

/// Output channels of a layer.
int layer_channels(const UNetSpec& spec, int layer_id);
/// Resolution level of a layer (0 = input, 4 = bottleneck).
int layer_level(int layer_id);
bool is_concat_layer(int layer_id);
/// Spatial extent of a layer's output for a given input extent.
Index3 layer_extent(const Index3& input, int layer_id);

/// Tapped activation per layer id, each [N, C_l, W_l, H_l, D_l].
using FeatureTapSet = std::map<int, Var>;

struct NamedVar {
  std::string name;
  Var var;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// 3x3x3 convolution with optional batch norm + ReLU.
struct ConvBlock {
  Var weight, bias;
  Var gamma, beta;
  BatchNormStats stats;
  bool normalized = true;

  ConvBlock() = default;
  ConvBlock(int in_channels, int out_channels, bool normalized, std::uint64_t seed);

  /// Stores the convolution output (before normalisation) in *tap when given.
  Var forward(const Var& x, bool training, Var* tap = nullptr);
};

class UNet {
 public:
  UNet() = default;
  UNet(const UNetSpec& spec, std::uint64_t seed);

  const UNetSpec& spec() const noexcept { return spec_; }

  struct Output {
    Var output;  // layer 23, [N, n, W, H, D]
    FeatureTapSet taps;
  };

  /// x: [N, in_channels, W, H, D] with W, H, D divisible by 16. Conv layer taps
  /// are the convolution outputs before batch norm and ReLU; concat layer
  /// taps are the concatenated tensors.
  Output forward(const Var& x, const std::set<int>& taps, bool training);

  ConvBlock& block(int layer_id);
  const ConvBlock& block(int layer_id) const;

  void collect(const std::string& prefix, std::vector<NamedVar>& params,
               std::vector<std::pair<std::string, Tensor*>>& buffers);

  /// Trainable scalar count of layers 0..23.
  std::size_t parameter_count() const;

 private:
  UNetSpec spec_;
  std::vector<ConvBlock> blocks_;  // indexed by layer id; concat ids unused
};

/// Fully connected layer with optional batch norm and ReLU.
struct DenseBlock {
  Var weight, bias;
  Var gamma, beta;
  BatchNormStats stats;
  bool normalized = true;
  bool rectified = true;

  DenseBlock() = default;
  DenseBlock(int in, int out, bool normalized, bool rectified, std::uint64_t seed);
  Var forward(const Var& x, bool training);
};

struct HeadSpec {
  int mlp_width = 128;
  int predictor_hidden = 0;  // 0 -> mlp_width / 8
  bool normalize_projection = false;
  bool predictor_output_norm = false;  // BN + ReLU after the last predictor layer

  int hidden() const { return predictor_hidden > 0 ? predictor_hidden : std::max(1, mlp_width / 8); }
  void validate() const;
};

void to_json(nlohmann::json& j, const HeadSpec& s);
void from_json(const nlohmann::json& j, HeadSpec& s);

/// Projector f (3 dense layers) and predictor p (bottleneck) for one layer.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(int in_channels, const HeadSpec& spec, std::uint64_t seed);

  int in_channels() const noexcept { return in_channels_; }

  /// v: [M, C_l] -> z: [M, mlp_width]. `normalize` = false skips the optional
  /// final L2 normalisation.
  Var project(const Var& v, bool training, bool normalize = true);
  /// z: [M, mlp_width] -> p: [M, mlp_width].
  Var predict(const Var& z, bool training);

  struct Output {
    Var z, p;
  };
  Output forward(const Var& v, bool training);

  void collect(const std::string& prefix, std::vector<NamedVar>& params,
               std::vector<std::pair<std::string, Tensor*>>& buffers);

 private:
  int in_channels_ = 0;
  HeadSpec spec_;
  std::vector<DenseBlock> projector_;
  std::vector<DenseBlock> predictor_;
};

struct ModelSpec {
  UNetSpec unet;
  HeadSpec head;
  std::vector<int> head_layers;  // one projection head per listed layer
  bool reconstruction = true;    // extra conv after layer 23 mapping back to the input channels
};

/// U-Net plus heads: everything trained together in pretraining.
class Model {
 public:
  Model() = default;
  Model(const ModelSpec& spec, std::uint64_t seed);

  const ModelSpec& spec() const noexcept { return spec_; }
  UNet& unet() { return unet_; }

  UNet::Output forward(const Var& x, const std::set<int>& taps, bool training) {
    return unet_.forward(x, taps, training);
  }
  /// Denoising output from the layer-23 activation.
  Var reconstruct(const Var& output);
  /// Channelwise softmax of the layer-23 activation.
  static Var segment(const Var& output) { return ops::softmax_channels(output); }

  bool has_head(int layer_id) const { return heads_.count(layer_id) > 0; }
  ProjectionHead& head(int layer_id);

  std::vector<NamedVar> parameters();
  std::vector<std::pair<std::string, Tensor*>> buffers();

  /// Parameters and buffers by name (copies).
  std::vector<NamedTensor> state();
  /// Assigns every named tensor whose name starts with `prefix`; throws on a
  /// shape mismatch or, with `strict`, on missing entries.
  void load_state(const std::vector<NamedTensor>& tensors, const std::string& prefix = "",
                  bool strict = true);

  void zero_grad();

 private:
  ModelSpec spec_;
  UNet unet_;
  std::map<int, ProjectionHead> heads_;
  ConvBlock rec_;
};

/// Single-file checkpoint: one JSON header line then raw little-endian f32 data.
struct CheckpointData {
  nlohmann::json meta;
  std::vector<NamedTensor> tensors;

  const Tensor& tensor(const std::string& name) const;
  bool has(const std::string& name) const;
};

void save_checkpoint(const CheckpointData& data, const std::filesystem::path& path);
CheckpointData load_checkpoint(const std::filesystem::path& path);

/// Stable per-name seed for parameter initialisation.
std::uint64_t name_seed(std::uint64_t base, const std::string& name);

}  // namespace longiseg
