#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "longiseg/augment.hpp"
#include "longiseg/losses.hpp"
#include "longiseg/network.hpp"

namespace longiseg {

struct TapSets {
  std::vector<int> sim{1, 3, 5, 7, 9, 12, 15, 18};
  std::vector<int> orth{8, 12};  // encoder layer, decoder layer
  std::vector<int> varcov{12, 15, 18};
};

/// Encoder-only similarity taps.
std::vector<int> encoder_taps();

struct AblationFlags {
  bool use_rec = true;
  bool use_aug = true;
  bool use_orth = true;
  bool use_varcov = true;
  bool use_cs = true;
  bool enc_only_taps = false;
};

struct TrainConfig {
  UNetSpec unet;
  HeadSpec head;
  LossWeights weights;
  TapSets taps;
  AblationFlags flags;
  AugmentRanges augment;

  int patches_per_layer = 256;  // M
  int batch_size = 1;           // crop pairs per step
  Index3 crop_size{32, 32, 32};
  double lr = 2e-4;
  double beta1_pretrain = 0.9;
  double beta1_finetune = 0.5;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int pretrain_steps = 500;
  int finetune_steps = 500;
  int validate_every = 100;  // 0 disables periodic validation (final step still validates)
  bool any_pair = false;     // sample any two timepoints instead of adjacent ones
  bool orth_squared = false;
  std::string one_shot_timepoint = "all";  // "all" or "last" labelled scans of the one-shot subject
  std::uint64_t seed = 0;
  std::string ablation;  // preset row the flags came from, informational

  void validate() const;

  /// Similarity taps after applying enc_only_taps.
  std::vector<int> sim_layers() const;
  bool orth_active() const { return flags.use_orth && weights.beta_orth > 0.0; }
  bool varcov_active() const {
    return flags.use_varcov && (weights.mu_std > 0.0 || weights.gamma_cov > 0.0);
  }
  bool rec_active() const { return flags.use_rec && weights.alpha_rec > 0.0; }
  bool cs_active() const { return flags.use_cs && weights.cs_weight > 0.0; }
  /// Every layer tapped in pretraining.
  std::set<int> pretrain_taps() const;
  /// Layers that need a projection head.
  std::vector<int> head_layers() const;
  ModelSpec pretrain_model_spec() const;
  ModelSpec finetune_model_spec() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

TrainConfig load_config(const std::filesystem::path& path);
void save_config(const TrainConfig& c, const std::filesystem::path& path);

/// Flags and weights of ablation row A..L applied on top of `base`.
TrainConfig ablation_preset(char row, const TrainConfig& base = {});

}  // namespace longiseg
