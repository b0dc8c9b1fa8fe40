#include "longiseg/config.hpp"

#include <algorithm>
#include <fstream>

#include "longiseg/error.hpp"

namespace longiseg {

std::vector<int> encoder_taps() { return {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}; }

void TrainConfig::validate() const {
  unet.validate();
  head.validate();
  weights.validate();
  for (int a = 0; a < 3; ++a) {
    require(crop_size[a] >= 16 && crop_size[a] % 16 == 0, ErrorKind::config,
            "crop_size must be a positive multiple of 16");
  }
  require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
  require(patches_per_layer >= 1, ErrorKind::config, "patches_per_layer must be >= 1");
  require(lr > 0.0, ErrorKind::config, "lr must be positive");
  for (double b : {beta1_pretrain, beta1_finetune, beta2}) {
    require(b >= 0.0 && b < 1.0, ErrorKind::config, "adam betas must lie in [0, 1)");
  }
  require(adam_eps > 0.0, ErrorKind::config, "adam_eps must be positive");
  require(pretrain_steps >= 0 && finetune_steps >= 0, ErrorKind::config, "step counts must be >= 0");
  require(validate_every >= 0, ErrorKind::config, "validate_every must be >= 0");
  require(one_shot_timepoint == "all" || one_shot_timepoint == "last", ErrorKind::config,
          "one_shot_timepoint must be \"all\" or \"last\"");
  auto check_layers = [](const std::vector<int>& ids, const char* what) {
    for (int id : ids) {
      require(id >= 0 && id < kNumUNetLayers, ErrorKind::config,
              std::string(what) + " contains unknown layer " + std::to_string(id));
    }
  };
  check_layers(taps.sim, "taps.sim");
  check_layers(taps.orth, "taps.orth");
  check_layers(taps.varcov, "taps.varcov");
  require(!taps.sim.empty(), ErrorKind::config, "taps.sim must not be empty");
  require(taps.orth.size() == 2, ErrorKind::config, "taps.orth must list exactly an encoder and a decoder layer");
  require(layer_level(taps.orth[0]) == layer_level(taps.orth[1]) &&
              layer_channels(unet, taps.orth[0]) == layer_channels(unet, taps.orth[1]),
          ErrorKind::config, "taps.orth layers must share resolution and channel count");
  require(!taps.varcov.empty(), ErrorKind::config, "taps.varcov must not be empty");
}

std::vector<int> TrainConfig::sim_layers() const { return flags.enc_only_taps ? encoder_taps() : taps.sim; }

std::set<int> TrainConfig::pretrain_taps() const {
  std::set<int> t;
  for (int id : sim_layers()) t.insert(id);
  if (orth_active()) t.insert(taps.orth.begin(), taps.orth.end());
  if (varcov_active()) t.insert(taps.varcov.begin(), taps.varcov.end());
  return t;
}

std::vector<int> TrainConfig::head_layers() const {
  const auto t = pretrain_taps();
  return {t.begin(), t.end()};
}

ModelSpec TrainConfig::pretrain_model_spec() const {
  ModelSpec s;
  s.unet = unet;
  s.head = head;
  s.head_layers = head_layers();
  s.reconstruction = true;
  return s;
}

ModelSpec TrainConfig::finetune_model_spec() const {
  ModelSpec s;
  s.unet = unet;
  s.head = head;
  s.reconstruction = false;
  return s;
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json::object();
  j["unet"] = c.unet;
  j["head"] = c.head;
  j["weights"] = c.weights;
  j["taps"] = {{"sim", c.taps.sim}, {"orth", c.taps.orth}, {"varcov", c.taps.varcov}};
  j["flags"] = {{"use_rec", c.flags.use_rec},       {"use_aug", c.flags.use_aug},
                {"use_orth", c.flags.use_orth},     {"use_varcov", c.flags.use_varcov},
                {"use_cs", c.flags.use_cs},         {"enc_only_taps", c.flags.enc_only_taps}};
  j["augment"] = c.augment;
  j["patches_per_layer"] = c.patches_per_layer;
  j["batch_size"] = c.batch_size;
  j["crop_size"] = c.crop_size;
  j["lr"] = c.lr;
  j["adam"] = {{"beta1_pretrain", c.beta1_pretrain},
               {"beta1_finetune", c.beta1_finetune},
               {"beta2", c.beta2},
               {"eps", c.adam_eps}};
  j["pretrain_steps"] = c.pretrain_steps;
  j["finetune_steps"] = c.finetune_steps;
  j["validate_every"] = c.validate_every;
  j["any_pair"] = c.any_pair;
  j["orth_squared"] = c.orth_squared;
  j["one_shot_timepoint"] = c.one_shot_timepoint;
  j["seed"] = c.seed;
  j["ablation"] = c.ablation;
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  static const std::set<std::string> known{
      "unet", "head", "weights", "taps", "flags", "augment", "patches_per_layer", "batch_size", "crop_size",
      "lr", "adam", "pretrain_steps", "finetune_steps", "validate_every", "any_pair", "orth_squared",
      "one_shot_timepoint", "seed", "ablation"};
  require(j.is_object(), ErrorKind::config, "config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    require(known.count(key) > 0, ErrorKind::config, "unknown config key \"" + key + "\"");
  }
  try {
    if (j.contains("unet")) c.unet = j["unet"].get<UNetSpec>();
    if (j.contains("head")) c.head = j["head"].get<HeadSpec>();
    if (j.contains("weights")) c.weights = j["weights"].get<LossWeights>();
    if (j.contains("taps")) {
      const auto& t = j["taps"];
      c.taps.sim = t.value("sim", c.taps.sim);
      c.taps.orth = t.value("orth", c.taps.orth);
      c.taps.varcov = t.value("varcov", c.taps.varcov);
    }
    if (j.contains("flags")) {
      const auto& f = j["flags"];
      c.flags.use_rec = f.value("use_rec", c.flags.use_rec);
      c.flags.use_aug = f.value("use_aug", c.flags.use_aug);
      c.flags.use_orth = f.value("use_orth", c.flags.use_orth);
      c.flags.use_varcov = f.value("use_varcov", c.flags.use_varcov);
      c.flags.use_cs = f.value("use_cs", c.flags.use_cs);
      c.flags.enc_only_taps = f.value("enc_only_taps", c.flags.enc_only_taps);
    }
    if (j.contains("augment")) c.augment = j["augment"].get<AugmentRanges>();
    c.patches_per_layer = j.value("patches_per_layer", c.patches_per_layer);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.crop_size = j.value("crop_size", c.crop_size);
    c.lr = j.value("lr", c.lr);
    if (j.contains("adam")) {
      const auto& a = j["adam"];
      c.beta1_pretrain = a.value("beta1_pretrain", c.beta1_pretrain);
      c.beta1_finetune = a.value("beta1_finetune", c.beta1_finetune);
      c.beta2 = a.value("beta2", c.beta2);
      c.adam_eps = a.value("eps", c.adam_eps);
    }
    c.pretrain_steps = j.value("pretrain_steps", c.pretrain_steps);
    c.finetune_steps = j.value("finetune_steps", c.finetune_steps);
    c.validate_every = j.value("validate_every", c.validate_every);
    c.any_pair = j.value("any_pair", c.any_pair);
    c.orth_squared = j.value("orth_squared", c.orth_squared);
    c.one_shot_timepoint = j.value("one_shot_timepoint", c.one_shot_timepoint);
    c.seed = j.value("seed", c.seed);
    c.ablation = j.value("ablation", c.ablation);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, std::string("bad config value: ") + e.what());
  }
  c.validate();
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  return j.get<TrainConfig>();
}

void save_config(const TrainConfig& c, const std::filesystem::path& path) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << nlohmann::json(c).dump(2) << "\n";
}

TrainConfig ablation_preset(char row, const TrainConfig& base) {
  require(row >= 'A' && row <= 'L', ErrorKind::config, std::string("unknown ablation row '") + row + "'");
  TrainConfig c = base;
  c.ablation = std::string(1, row);
  auto& f = c.flags;
  const LossWeights defaults;
  f = AblationFlags{};
  f.use_rec = f.use_aug = f.use_orth = f.use_varcov = f.use_cs = false;
  f.enc_only_taps = row <= 'C';
  c.weights.beta_orth = defaults.beta_orth;
  c.weights.mu_std = defaults.mu_std;
  c.weights.gamma_cov = defaults.gamma_cov;
  if (row == 'A') c.head.mlp_width = std::max(1, base.head.mlp_width / 8);
  if (row == 'C' || row == 'D' || row >= 'F') f.use_rec = true;
  if (row == 'E' || row == 'F' || row >= 'J') f.use_aug = true;
  if (row == 'G' || row == 'I' || row >= 'J') f.use_orth = true;
  if (row == 'H' || row == 'I' || row >= 'J') f.use_varcov = true;
  if (row == 'K') c.weights.mu_std = 1e-2;
  if (row == 'L') f.use_cs = true;
  c.validate();
  return c;
}

}  // namespace longiseg
