#pragma once

#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "longiseg/config.hpp"
#include "longiseg/dataset.hpp"
#include "longiseg/metrics.hpp"
#include "longiseg/network.hpp"

namespace longiseg {

/// lr0 (1 - t / T); zero at and beyond T.
double linear_lr(double lr0, int step, int total_steps);

class Adam {
 public:
  Adam() = default;
  Adam(std::vector<NamedVar> params, double beta1, double beta2, double eps);

  /// Updates every parameter that received a gradient, then clears gradients.
  void step(double lr);
  long long steps() const noexcept { return t_; }

  /// Moment estimates as "adam.m.<name>" / "adam.v.<name>".
  std::vector<NamedTensor> state() const;
  void load_state(const std::vector<NamedTensor>& tensors, long long steps);

 private:
  std::vector<NamedVar> params_;
  std::vector<Tensor> m_, v_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long long t_ = 0;
};

/// Channel-first copy of a [W, H, D, C] volume into dst ([C, W, H, D]).
void volume_to_channels_first(const Volume& v, float* dst);

/// One pretraining step's worth of corresponding crops.
struct PretrainBatch {
  int pairs = 0;
  Tensor input;   // [2*pairs, C, W, H, D]: items [0, pairs) timepoint j, [pairs, 2*pairs) timepoint k
  Tensor target;  // same shape: crops before intensity corruption
  std::vector<std::uint64_t> plan_seeds;  // one per pair
};

/// In-memory training pool of subjects with at least two scans.
class PretrainData {
 public:
  PretrainData(const DatasetManifest& manifest, const std::string& split, const TrainConfig& cfg);

  bool empty() const noexcept { return series_.empty(); }
  std::size_t size() const noexcept { return series_.size(); }

  /// Deterministic in (cfg, seed).
  PretrainBatch sample(std::uint64_t seed) const;
  /// Every adjacent pair once, fixed seeds; used for validation.
  std::vector<PretrainBatch> all_adjacent_pairs(std::uint64_t seed) const;

 private:
  PretrainBatch build(const std::vector<std::tuple<int, int, int>>& picks, std::uint64_t seed) const;

  TrainConfig cfg_;
  std::vector<SubjectTimeSeries> series_;
};

struct StepLosses {
  int step = 0;
  double lr = 0.0;
  double total = 0.0;
  std::optional<double> sim, rec, std, cov, orth;
  std::map<int, double> sim_layers;
};

/// Forward pass and objective; returns the differentiable total (only
/// recorded when gradients are enabled) and the component values.
struct PretrainObjective {
  Var total;
  StepLosses losses;
};

PretrainObjective pretrain_objective(Model& model, const TrainConfig& cfg, const PretrainBatch& batch,
                                     bool training);

/// Runs the data generator for consecutive steps on `workers` background
/// threads with a bounded queue. With zero workers batches are built on demand.
template <typename Batch>
class Prefetcher {
 public:
  Prefetcher(int first, int last, int workers, std::function<Batch(int)> make, int capacity = 4);
  ~Prefetcher();
  Prefetcher(const Prefetcher&) = delete;
  Prefetcher& operator=(const Prefetcher&) = delete;

  /// Batch for `step`; steps must be requested in increasing order.
  Batch get(int step);

 private:
  void run(int worker);

  int first_, last_, workers_, capacity_;
  std::function<Batch(int)> make_;
  std::mutex mutex_;
  std::condition_variable cv_;
  std::map<int, Batch> ready_;
  std::map<int, std::exception_ptr> failed_;
  int consumed_;
  bool stop_ = false;
  std::vector<std::thread> threads_;
};

struct RunOptions {
  std::filesystem::path out_dir;
  int workers = 0;
  bool resume = false;      // continue from <out_dir>/last.ckpt when present
  int stop_after = -1;      // stop (saving last.ckpt) once this step completes; -1 runs to the end
  bool quiet = true;
  std::function<void(const StepLosses&)> on_step;
};

struct TrainResult {
  std::filesystem::path best_checkpoint;
  std::filesystem::path last_checkpoint;
  int best_step = 0;
  double best_value = 0.0;
  std::vector<std::pair<int, double>> history;  // validation (step, value)
  int last_step = 0;
};

/// Pretrains U-Net and heads; writes loss.csv, validation.csv, last.ckpt and
/// best.ckpt (lowest validation total loss) under out_dir.
TrainResult pretrain(const TrainConfig& cfg, const DatasetManifest& manifest, const RunOptions& options);

struct FinetuneOptions : RunOptions {
  std::optional<std::filesystem::path> init_checkpoint;  // none: random initialisation
  std::string budget = "one-shot";                       // "one-shot" or a fraction in (0, 1]
};

/// Finetunes for segmentation; writes loss.csv (step, lr, total, sup, cs),
/// validation.csv and checkpoints (best = highest validation mean Dice).
TrainResult finetune(const TrainConfig& cfg, const DatasetManifest& manifest, const FinetuneOptions& options);

/// Subjects and timepoints labelled under a budget.
struct LabelledSet {
  std::vector<std::pair<std::string, int>> images;  // (subject id, timepoint index)
};
LabelledSet labelled_set(const DatasetManifest& manifest, const std::string& budget, const TrainConfig& cfg);

/// Argmax segmentation of a whole volume (zero padded to a multiple of 16).
LabelVolume predict_labels(Model& model, const Volume& image);
Segmenter model_segmenter(Model& model);

/// Mean foreground Dice over labelled images of a split.
double validate_dice(Model& model, const DatasetManifest& manifest, const std::string& split = "val");

/// Model from a pretraining or finetuning checkpoint.
Model model_from_checkpoint(const CheckpointData& ckpt);
TrainConfig config_from_checkpoint(const CheckpointData& ckpt);

}  // namespace longiseg
