#include "longiseg/training.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <tuple>

#include "longiseg/augment.hpp"
#include "longiseg/losses.hpp"
#include "longiseg/rng.hpp"
#include "longiseg/sampling.hpp"

namespace longiseg {

namespace fs = std::filesystem;

namespace {

// Stream tags keep the derived seeds of different consumers apart.
enum : std::uint64_t { kTagTrain = 1, kTagVal = 2, kTagSup = 3, kTagCs = 4, kTagInit = 5, kTagBudget = 6 };

std::string fmt(double v) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt(const std::optional<double>& v) { return v ? fmt(*v) : std::string(); }

Tensor slice_rows(const Tensor& t, int begin, int count) {
  const int cols = t.dim(1);
  Tensor out({count, cols});
  std::copy(t.data() + static_cast<std::size_t>(begin) * cols,
            t.data() + static_cast<std::size_t>(begin + count) * cols, out.data());
  return out;
}

// Rows at a set of plans: all pairs of timepoint j, then all pairs of timepoint k.
Var gather_pair_rows(const Var& feats, const std::vector<PatchIndexPlan>& plans, int index_layer) {
  const int pairs = static_cast<int>(plans.size());
  std::vector<Position> pos;
  for (int half = 0; half < 2; ++half) {
    for (int b = 0; b < pairs; ++b) {
      auto p = plan_positions(plans[b].at(index_layer), half * pairs + b);
      pos.insert(pos.end(), p.begin(), p.end());
    }
  }
  return ops::gather_positions(feats, pos);
}

Var objective(const std::vector<Var>& inputs, double& value,
              const std::function<LossValue<float>(const std::vector<const Tensor*>&)>& fn) {
  return ops::scalar_objective(inputs, [&](const std::vector<const Tensor*>& v) {
    auto r = fn(v);
    value = r.value;
    return r;
  });
}

struct Intensities {
  bool geometric = false;
  bool intensity = false;
};

Intensities augmentation_families(const TrainConfig& cfg) {
  // Reconstruction needs a corrupted input, so intensity corruption stays on
  // for rec even when augmentation is ablated.
  return {cfg.flags.use_aug && cfg.augment.geometric,
          (cfg.flags.use_aug || cfg.flags.use_rec) && cfg.augment.intensity};
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec && fs::is_directory(dir), ErrorKind::io, "cannot create directory " + dir.string());
}

// Keeps the first `keep_rows` data rows of a CSV (after the header) so a
// resumed run appends exactly where the checkpoint left off.
void truncate_csv(const fs::path& path, int last_step) {
  std::ifstream in(path);
  if (!in) return;
  std::vector<std::string> lines;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      lines.push_back(line);
      header = false;
      continue;
    }
    int step = 0;
    std::from_chars(line.data(), line.data() + line.size(), step);
    if (step <= last_step) lines.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

class CsvLog {
 public:
  CsvLog(const fs::path& path, const std::string& header, bool append) {
    const bool exists = append && fs::exists(path);
    out_.open(path, exists ? std::ios::app : std::ios::trunc);
    require(static_cast<bool>(out_), ErrorKind::io, "cannot write " + path.string());
    if (!exists) out_ << header << '\n';
  }
  void row(const std::string& r) {
    out_ << r << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

nlohmann::json history_json(const std::vector<std::pair<int, double>>& h) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& [s, v] : h) j.push_back({s, v});
  return j;
}

std::vector<std::pair<int, double>> history_from(const nlohmann::json& j) {
  std::vector<std::pair<int, double>> h;
  for (const auto& e : j) h.emplace_back(e.at(0).get<int>(), e.at(1).get<double>());
  return h;
}

struct RunState {
  int step = 0;  // last completed step
  std::vector<std::pair<int, double>> history;
  int best_step = -1;
  double best_value = 0.0;
};

void save_run(const fs::path& path, const std::string& phase, const TrainConfig& cfg, Model& model,
              const Adam* adam, const RunState& st, const nlohmann::json& extra = {}) {
  CheckpointData ck;
  ck.meta = {{"phase", phase},
             {"config", cfg},
             {"step", st.step},
             {"history", history_json(st.history)},
             {"best_step", st.best_step},
             {"best_value", st.best_value},
             {"model", {{"head_layers", model.spec().head_layers}, {"reconstruction", model.spec().reconstruction}}}};
  if (!extra.is_null()) ck.meta["extra"] = extra;
  ck.tensors = model.state();
  if (adam) {
    ck.meta["adam_steps"] = adam->steps();
    for (auto& t : adam->state()) ck.tensors.push_back(std::move(t));
  }
  save_checkpoint(ck, path);
}

RunState restore_run(const CheckpointData& ck, Model& model, Adam& adam) {
  model.load_state(ck.tensors);
  adam.load_state(ck.tensors, ck.meta.value("adam_steps", 0LL));
  RunState st;
  st.step = ck.meta.at("step").get<int>();
  st.history = history_from(ck.meta.at("history"));
  st.best_step = ck.meta.at("best_step").get<int>();
  st.best_value = ck.meta.at("best_value").get<double>();
  return st;
}

void check_resume_config(const CheckpointData& ck, const TrainConfig& cfg) {
  require(nlohmann::json(config_from_checkpoint(ck)) == nlohmann::json(cfg), ErrorKind::config,
          "cannot resume: configuration differs from the checkpoint");
}

}  // namespace

double linear_lr(double lr0, int step, int total_steps) {
  if (total_steps <= 0 || step >= total_steps) return 0.0;
  return lr0 * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

Adam::Adam(std::vector<NamedVar> params, double beta1, double beta2, double eps)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.var.shape());
    v_.emplace_back(p.var.shape());
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Var& p = params_[i].var;
    if (!p.has_grad()) continue;
    const Tensor& g = p.grad();
    Tensor& w = p.mutable_value();
    float* m = m_[i].data();
    float* v = v_[i].data();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k];
      m[k] = static_cast<float>(beta1_ * m[k] + (1.0 - beta1_) * gk);
      v[k] = static_cast<float>(beta2_ * v[k] + (1.0 - beta2_) * gk * gk);
      const double mhat = m[k] / c1, vhat = v[k] / c2;
      w[k] = static_cast<float>(w[k] - lr * mhat / (std::sqrt(vhat) + eps_));
    }
    p.zero_grad();
  }
}

std::vector<NamedTensor> Adam::state() const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    out.push_back({"adam.m." + params_[i].name, m_[i]});
    out.push_back({"adam.v." + params_[i].name, v_[i]});
  }
  return out;
}

void Adam::load_state(const std::vector<NamedTensor>& tensors, long long steps) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : tensors) by_name[t.name] = &t.tensor;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    for (auto [prefix, dst] : {std::pair{"adam.m.", &m_[i]}, std::pair{"adam.v.", &v_[i]}}) {
      auto it = by_name.find(prefix + params_[i].name);
      require(it != by_name.end(), ErrorKind::format, "checkpoint lacks optimizer state for " + params_[i].name);
      require_same_shape(dst->shape(), it->second->shape(), "adam state");
      *dst = *it->second;
    }
  }
  t_ = steps;
}

void volume_to_channels_first(const Volume& v, float* dst) {
  const auto& d = v.dims();
  const std::size_t S = v.voxel_count();
  const auto src = v.values();
  for (std::size_t s = 0; s < S; ++s)
    for (int c = 0; c < d[3]; ++c) dst[static_cast<std::size_t>(c) * S + s] = src[s * d[3] + c];
}

// ---------------------------------------------------------------------------
// Pretraining data

PretrainData::PretrainData(const DatasetManifest& manifest, const std::string& split, const TrainConfig& cfg)
    : cfg_(cfg) {
  for (const auto& id : manifest.longitudinal_subjects(split)) {
    series_.push_back(manifest.load_subject(id));
    const auto& tp = series_.back().timepoints.front().image;
    require(tp.channels() == cfg.unet.in_channels, ErrorKind::data,
            "subject " + id + " has " + std::to_string(tp.channels()) + " channels, config expects " +
                std::to_string(cfg.unet.in_channels));
    for (int a = 0; a < 3; ++a) {
      require(tp.spatial()[a] >= cfg.crop_size[a], ErrorKind::data,
              "subject " + id + " is smaller than the crop size");
    }
  }
}

PretrainBatch PretrainData::sample(std::uint64_t seed) const {
  require(!series_.empty(), ErrorKind::data, "no subjects with at least two timepoints");
  std::vector<std::tuple<int, int, int>> picks;
  for (int b = 0; b < cfg_.batch_size; ++b) {
    Rng rng(derive_seed({seed, static_cast<std::uint64_t>(b), 0}));
    const int s = static_cast<int>(rng.below(series_.size()));
    const int T = static_cast<int>(series_[s].timepoints.size());
    int j, k;
    if (cfg_.any_pair) {
      j = static_cast<int>(rng.below(T));
      k = static_cast<int>(rng.below(T - 1));
      if (k >= j) ++k;
    } else {
      j = static_cast<int>(rng.below(T - 1));
      k = j + 1;
    }
    picks.emplace_back(s, j, k);
  }
  return build(picks, seed);
}

std::vector<PretrainBatch> PretrainData::all_adjacent_pairs(std::uint64_t seed) const {
  std::vector<PretrainBatch> out;
  std::uint64_t n = 0;
  for (int s = 0; s < static_cast<int>(series_.size()); ++s) {
    for (int j = 0; j + 1 < static_cast<int>(series_[s].timepoints.size()); ++j) {
      out.push_back(build({{s, j, j + 1}}, derive_seed({seed, n++})));
    }
  }
  return out;
}

PretrainBatch PretrainData::build(const std::vector<std::tuple<int, int, int>>& picks, std::uint64_t seed) const {
  const int P = static_cast<int>(picks.size());
  const int C = cfg_.unet.in_channels;
  const Index3& cs = cfg_.crop_size;
  const std::size_t item = static_cast<std::size_t>(C) * cs[0] * cs[1] * cs[2];
  PretrainBatch batch;
  batch.pairs = P;
  batch.input = Tensor({2 * P, C, cs[0], cs[1], cs[2]});
  batch.target = Tensor(batch.input.shape());
  const auto fam = augmentation_families(cfg_);
  for (int b = 0; b < P; ++b) {
    const auto [s, j, k] = picks[b];
    const std::uint64_t base = derive_seed({seed, static_cast<std::uint64_t>(b)});
    auto crops = corresponding_crops(series_[s], j, k, cs, derive_seed({base, 1}));
    Rng rng(derive_seed({base, 2}));
    GeometricParams g;
    if (fam.geometric) g = sample_geometric(cfg_.augment, rng);
    const Volume* views[2] = {&crops.crop_j, &crops.crop_k};
    for (int t = 0; t < 2; ++t) {
      const Volume target = g.is_identity() ? *views[t] : apply_geometric(*views[t], g);
      Volume input = target;
      if (fam.intensity) {
        Rng irng(derive_seed({base, 3, static_cast<std::uint64_t>(t)}));
        input = apply_intensity(target, sample_intensity(cfg_.augment, irng));
      }
      const std::size_t n = static_cast<std::size_t>(t * P + b);
      volume_to_channels_first(input, batch.input.data() + n * item);
      volume_to_channels_first(target, batch.target.data() + n * item);
    }
    batch.plan_seeds.push_back(derive_seed({base, 4}));
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Objective

PretrainObjective pretrain_objective(Model& model, const TrainConfig& cfg, const PretrainBatch& batch,
                                     bool training) {
  const auto taps = cfg.pretrain_taps();
  Var x(batch.input);
  auto fw = model.forward(x, taps, training);

  std::vector<PatchIndexPlan> plans;
  const Index3 extent_in{batch.input.dim(2), batch.input.dim(3), batch.input.dim(4)};
  std::map<int, Index3> extents;
  for (int id : taps) extents[id] = layer_extent(extent_in, id);
  for (std::uint64_t s : batch.plan_seeds) plans.push_back(make_plan(extents, cfg.patches_per_layer, s));
  const int R = batch.pairs * cfg.patches_per_layer;

  PretrainObjective out;
  StepLosses& L = out.losses;
  std::vector<std::pair<double, Var>> terms;
  std::map<int, Var> z_full;

  const auto sim_layers = cfg.sim_layers();
  double sim_sum = 0.0;
  for (int id : sim_layers) {
    Var v = gather_pair_rows(fw.taps.at(id), plans, id);
    auto hp = model.head(id).forward(v, training);
    z_full[id] = hp.z;
    Var p1 = ops::select_batch(hp.p, 0, R), p2 = ops::select_batch(hp.p, R, R);
    Var z1(slice_rows(hp.z.value(), 0, R)), z2(slice_rows(hp.z.value(), R, R));
    double value = 0.0;
    Var term = objective({p1, z1, p2, z2}, value, [](const std::vector<const Tensor*>& t) {
      return sim_pair(*t[0], *t[1], *t[2], *t[3]);
    });
    L.sim_layers[id] = value;
    sim_sum += value;
    terms.emplace_back(cfg.weights.lambda_sim / static_cast<double>(sim_layers.size()), term);
  }
  L.sim = sim_sum / static_cast<double>(sim_layers.size());
  PretrainParts parts;
  parts.sim = *L.sim;

  auto projection = [&](int id) {
    auto it = z_full.find(id);
    if (it != z_full.end()) return it->second;
    Var z = model.head(id).project(gather_pair_rows(fw.taps.at(id), plans, id), training);
    z_full[id] = z;
    return z;
  };

  if (cfg.varcov_active()) {
    std::vector<Var> zs;
    for (int id : cfg.taps.varcov) zs.push_back(projection(id));
    double sv = 0.0, cv = 0.0;
    Var s_term = objective(zs, sv, [&](const std::vector<const Tensor*>& t) {
      return std_loss(t, cfg.weights.eta, cfg.weights.epsilon);
    });
    Var c_term = objective(zs, cv, [](const std::vector<const Tensor*>& t) { return cov_loss(t); });
    L.std = sv;
    L.cov = cv;
    parts.std = sv;
    parts.cov = cv;
    terms.emplace_back(cfg.weights.mu_std, s_term);
    terms.emplace_back(cfg.weights.gamma_cov, c_term);
  }

  if (cfg.orth_active()) {
    const int enc = cfg.taps.orth[0], dec = cfg.taps.orth[1];
    Var z_dec = projection(dec);
    // The encoder features are read at the decoder layer's indices so both
    // projections describe the same locations.
    Var z_enc = model.head(enc).project(gather_pair_rows(fw.taps.at(enc), plans, dec), training);
    double ov = 0.0;
    const bool squared = cfg.orth_squared;
    Var term = objective({z_enc, z_dec}, ov, [squared](const std::vector<const Tensor*>& t) {
      return orth_loss(*t[0], *t[1], squared);
    });
    L.orth = ov;
    parts.orth = ov;
    terms.emplace_back(cfg.weights.beta_orth, term);
  }

  if (cfg.rec_active()) {
    Var r = model.reconstruct(fw.output);
    Var target(batch.target);
    double rv = 0.0;
    Var term = objective({r, target}, rv, [](const std::vector<const Tensor*>& t) { return rec_loss(*t[0], *t[1]); });
    L.rec = rv;
    parts.rec = rv;
    terms.emplace_back(cfg.weights.alpha_rec, term);
  }

  LossWeights w = cfg.weights;
  out.total = ops::weighted_sum(terms);
  L.total = pretrain_total(parts, w);
  return out;
}

// ---------------------------------------------------------------------------
// Prefetcher

template <typename Batch>
Prefetcher<Batch>::Prefetcher(int first, int last, int workers, std::function<Batch(int)> make, int capacity)
    : first_(first), last_(last), workers_(std::max(0, workers)), capacity_(std::max(1, capacity)),
      make_(std::move(make)), consumed_(first) {
  for (int w = 0; w < workers_; ++w) threads_.emplace_back([this, w] { run(w); });
}

template <typename Batch>
Prefetcher<Batch>::~Prefetcher() {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

template <typename Batch>
void Prefetcher<Batch>::run(int worker) {
  for (int s = first_ + worker; s <= last_; s += workers_) {
    {
      std::unique_lock<std::mutex> lock(mutex_);
      cv_.wait(lock, [&] { return stop_ || s < consumed_ + capacity_; });
      if (stop_) return;
    }
    std::optional<Batch> b;
    std::exception_ptr err;
    try {
      b.emplace(make_(s));
    } catch (...) {
      err = std::current_exception();
    }
    {
      std::lock_guard<std::mutex> lock(mutex_);
      if (err) failed_[s] = err; else ready_.emplace(s, std::move(*b));
    }
    cv_.notify_all();
  }
}

template <typename Batch>
Batch Prefetcher<Batch>::get(int step) {
  if (workers_ == 0) return make_(step);
  require(step >= consumed_ && step <= last_, ErrorKind::invalid, "prefetcher: step out of order");
  std::unique_lock<std::mutex> lock(mutex_);
  cv_.wait(lock, [&] { return ready_.count(step) > 0 || failed_.count(step) > 0; });
  if (auto f = failed_.find(step); f != failed_.end()) std::rethrow_exception(f->second);
  Batch b = std::move(ready_.at(step));
  ready_.erase(step);
  consumed_ = step + 1;
  lock.unlock();
  cv_.notify_all();
  return b;
}

template class Prefetcher<PretrainBatch>;
template class Prefetcher<int>;

// ---------------------------------------------------------------------------
// Pretraining loop

TrainResult pretrain(const TrainConfig& cfg, const DatasetManifest& manifest, const RunOptions& options) {
  cfg.validate();
  ensure_dir(options.out_dir);
  PretrainData train(manifest, "train", cfg);
  require(!train.empty(), ErrorKind::data, "train split has no subject with at least two timepoints");
  std::optional<PretrainData> val;
  if (manifest.splits.count("val")) {
    val.emplace(manifest, "val", cfg);
    if (val->empty()) val.reset();
  }

  Model model(cfg.pretrain_model_spec(), derive_seed({cfg.seed, kTagInit}));
  Adam adam(model.parameters(), cfg.beta1_pretrain, cfg.beta2, cfg.adam_eps);
  RunState st;
  const fs::path last = options.out_dir / "last.ckpt", best = options.out_dir / "best.ckpt";
  const fs::path loss_csv = options.out_dir / "loss.csv", val_csv = options.out_dir / "validation.csv";
  bool resumed = false;
  if (options.resume && fs::exists(last)) {
    const auto ck = load_checkpoint(last);
    require(ck.meta.value("phase", "") == "pretrain", ErrorKind::format, "last.ckpt is not a pretraining checkpoint");
    check_resume_config(ck, cfg);
    st = restore_run(ck, model, adam);
    truncate_csv(loss_csv, st.step);
    truncate_csv(val_csv, st.step);
    resumed = true;
  }
  save_config(cfg, options.out_dir / "config.json");

  const auto sim_layers = cfg.sim_layers();
  std::string header = "step,lr,total,sim,rec,std,cov,orth";
  for (int id : sim_layers) header += ",sim_L" + std::string(id < 10 ? "0" : "") + std::to_string(id);
  CsvLog log(loss_csv, header, resumed);
  CsvLog vlog(val_csv, "step,val_total", resumed);

  const std::vector<PretrainBatch> val_batches = val ? val->all_adjacent_pairs(derive_seed({cfg.seed, kTagVal}))
                                                     : std::vector<PretrainBatch>{};
  auto validate = [&](int step) {
    if (val_batches.empty()) return;
    NoGradGuard guard;
    double sum = 0.0;
    for (const auto& b : val_batches) sum += pretrain_objective(model, cfg, b, false).losses.total;
    const double v = sum / static_cast<double>(val_batches.size());
    st.history.emplace_back(step, v);
    vlog.row(std::to_string(step) + "," + fmt(v));
    if (st.best_step < 0 || v < st.best_value) {
      st.best_step = step;
      st.best_value = v;
      save_run(best, "pretrain", cfg, model, nullptr, st);
    }
  };

  const int T = cfg.pretrain_steps;
  const int end = options.stop_after >= 0 ? std::min(options.stop_after, T) : T;
  if (!resumed && T > 0 && cfg.validate_every > 0) validate(0);
  {
    Prefetcher<PretrainBatch> loader(st.step + 1, std::max(end, st.step + 1), options.workers, [&](int step) {
      return train.sample(derive_seed({cfg.seed, kTagTrain, static_cast<std::uint64_t>(step)}));
    });
    for (int step = st.step + 1; step <= end; ++step) {
      const PretrainBatch batch = loader.get(step);
      const double lr = linear_lr(cfg.lr, step - 1, T);
      auto obj = pretrain_objective(model, cfg, batch, true);
      backward(obj.total);
      adam.step(lr);
      obj.losses.step = step;
      obj.losses.lr = lr;
      const auto& L = obj.losses;
      std::string row = std::to_string(step) + "," + fmt(lr) + "," + fmt(L.total) + "," + fmt(L.sim) + "," +
                        fmt(L.rec) + "," + fmt(L.std) + "," + fmt(L.cov) + "," + fmt(L.orth);
      for (int id : sim_layers) row += "," + fmt(L.sim_layers.at(id));
      log.row(row);
      if (options.on_step) options.on_step(L);
      if (!options.quiet && (step % 10 == 0 || step == end)) {
        std::cerr << "pretrain step " << step << "/" << T << " total " << L.total << " sim " << *L.sim << "\n";
      }
      st.step = step;
      const bool periodic = cfg.validate_every > 0 && step % cfg.validate_every == 0;
      if (periodic || step == T) {
        validate(step);
        save_run(last, "pretrain", cfg, model, &adam, st);
      }
    }
  }
  if (val_batches.empty() && st.step == T) {
    st.best_step = T;
    save_run(best, "pretrain", cfg, model, nullptr, st);
  }
  save_run(last, "pretrain", cfg, model, &adam, st);

  TrainResult r;
  r.best_checkpoint = fs::exists(best) ? best : last;
  r.last_checkpoint = last;
  r.best_step = st.best_step;
  r.best_value = st.best_value;
  r.history = st.history;
  r.last_step = st.step;
  return r;
}

// ---------------------------------------------------------------------------
// Finetuning

namespace {

struct FinetuneBatch {
  Tensor sup_input;                     // [B, C, W, H, D]
  std::vector<std::uint16_t> labels;    // B*W*H*D
  Tensor cs_input;                      // [2B, C, W, H, D]; empty when cs is inactive
};

class FinetuneData {
 public:
  FinetuneData(const DatasetManifest& manifest, const LabelledSet& labelled, const TrainConfig& cfg)
      : cfg_(cfg) {
    std::map<std::string, int> index;
    auto load = [&](const std::string& id) {
      auto it = index.find(id);
      if (it != index.end()) return it->second;
      series_.push_back(manifest.load_subject(id));
      return index[id] = static_cast<int>(series_.size()) - 1;
    };
    for (const auto& [id, t] : labelled.images) {
      const int s = load(id);
      require(series_[s].timepoints[t].label.has_value(), ErrorKind::data,
              "labelled image of " + id + " has no label volume");
      labelled_.emplace_back(s, t);
    }
    if (cfg.cs_active()) {
      for (const auto& id : manifest.longitudinal_subjects("train")) {
        const int s = load(id);
        for (int j = 0; j + 1 < static_cast<int>(series_[s].timepoints.size()); ++j) pairs_.emplace_back(s, j);
      }
      require(!pairs_.empty(), ErrorKind::data, "consistency loss needs a train subject with two timepoints");
    }
  }

  FinetuneBatch sample(std::uint64_t seed) const {
    const int B = cfg_.batch_size, C = cfg_.unet.in_channels;
    const Index3& cs = cfg_.crop_size;
    const std::size_t S = static_cast<std::size_t>(cs[0]) * cs[1] * cs[2];
    const bool aug = cfg_.flags.use_aug;
    FinetuneBatch fb;
    fb.sup_input = Tensor({B, C, cs[0], cs[1], cs[2]});
    fb.labels.resize(B * S);
    for (int b = 0; b < B; ++b) {
      const std::uint64_t base = derive_seed({seed, kTagSup, static_cast<std::uint64_t>(b)});
      Rng rng(base);
      const auto [s, t] = labelled_[rng.below(labelled_.size())];
      const auto& tp = series_[s].timepoints[t];
      const Index3 off = sample_crop_offset(tp.image.spatial(), cs, derive_seed({base, 1}));
      Volume img = crop(tp.image, off, cs);
      LabelVolume lab = crop(*tp.label, off, cs);
      if (aug && cfg_.augment.geometric) {
        const auto g = sample_geometric(cfg_.augment, rng);
        img = apply_geometric(img, g);
        lab = apply_geometric(lab, g);
      }
      if (aug && cfg_.augment.intensity) img = apply_intensity(img, sample_intensity(cfg_.augment, rng));
      volume_to_channels_first(img, fb.sup_input.data() + b * S * C);
      std::copy(lab.values().begin(), lab.values().end(), fb.labels.begin() + b * S);
    }
    if (!pairs_.empty()) {
      fb.cs_input = Tensor({2 * B, C, cs[0], cs[1], cs[2]});
      for (int b = 0; b < B; ++b) {
        const std::uint64_t base = derive_seed({seed, kTagCs, static_cast<std::uint64_t>(b)});
        Rng rng(base);
        const auto [s, j] = pairs_[rng.below(pairs_.size())];
        auto crops = corresponding_crops(series_[s], j, j + 1, cs, derive_seed({base, 1}));
        GeometricParams g;
        if (aug && cfg_.augment.geometric) g = sample_geometric(cfg_.augment, rng);
        const Volume* views[2] = {&crops.crop_j, &crops.crop_k};
        for (int t = 0; t < 2; ++t) {
          Volume v = g.is_identity() ? *views[t] : apply_geometric(*views[t], g);
          if (aug && cfg_.augment.intensity) {
            Rng irng(derive_seed({base, 2, static_cast<std::uint64_t>(t)}));
            v = apply_intensity(v, sample_intensity(cfg_.augment, irng));
          }
          volume_to_channels_first(v, fb.cs_input.data() + static_cast<std::size_t>(t * B + b) * S * C);
        }
      }
    }
    return fb;
  }

 private:
  TrainConfig cfg_;
  std::vector<SubjectTimeSeries> series_;
  std::vector<std::pair<int, int>> labelled_;
  std::vector<std::pair<int, int>> pairs_;
};

}  // namespace

template class Prefetcher<FinetuneBatch>;

LabelledSet labelled_set(const DatasetManifest& manifest, const std::string& budget, const TrainConfig& cfg) {
  std::vector<std::string> candidates;
  for (const auto& id : manifest.split("train")) {
    const auto& s = manifest.subject(id);
    const bool any = std::any_of(s.timepoints.begin(), s.timepoints.end(), [](const auto& t) { return t.label.has_value(); });
    if (any) candidates.push_back(id);
  }
  require(!candidates.empty(), ErrorKind::data, "train split has no labelled images");
  LabelledSet out;
  auto add_subject = [&](const std::string& id, bool last_only) {
    const auto& s = manifest.subject(id);
    const int T = static_cast<int>(s.timepoints.size());
    for (int t = 0; t < T; ++t) {
      if (!s.timepoints[t].label) continue;
      if (last_only && t != T - 1) continue;
      out.images.emplace_back(id, t);
    }
  };
  if (budget == "one-shot") {
    // The subject with the most labelled scans; ties keep manifest order.
    std::string pick;
    int most = -1;
    for (const auto& id : candidates) {
      const auto& s = manifest.subject(id);
      const int n = static_cast<int>(std::count_if(s.timepoints.begin(), s.timepoints.end(),
                                                   [](const auto& t) { return t.label.has_value(); }));
      if (n > most) {
        most = n;
        pick = id;
      }
    }
    add_subject(pick, cfg.one_shot_timepoint == "last");
  } else {
    double fraction = 0.0;
    try {
      std::size_t used = 0;
      fraction = std::stod(budget, &used);
      require(used == budget.size(), ErrorKind::invalid, "");
    } catch (...) {
      throw Error(ErrorKind::invalid, "budget must be \"one-shot\" or a fraction in (0, 1], got \"" + budget + "\"");
    }
    require(fraction > 0.0 && fraction <= 1.0, ErrorKind::invalid, "budget fraction must lie in (0, 1]");
    const int n = std::max(1, static_cast<int>(std::ceil(fraction * candidates.size() - 1e-9)));
    std::vector<std::string> order = candidates;
    Rng rng(derive_seed({cfg.seed, kTagBudget}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    order.resize(n);
    std::sort(order.begin(), order.end());
    for (const auto& id : order) add_subject(id, false);
  }
  require(!out.images.empty(), ErrorKind::data, "labelled budget selects no images");
  return out;
}

LabelVolume predict_labels(Model& model, const Volume& image) {
  NoGradGuard guard;
  const auto sp = image.spatial();
  const int C = image.channels();
  require(C == model.spec().unet.in_channels, ErrorKind::shape, "image channel count does not match the model");
  Index3 padded;
  for (int a = 0; a < 3; ++a) padded[a] = (sp[a] + 15) / 16 * 16;
  Tensor x({1, C, padded[0], padded[1], padded[2]});
  const std::size_t PS = static_cast<std::size_t>(padded[0]) * padded[1] * padded[2];
  for (int w = 0; w < sp[0]; ++w)
    for (int h = 0; h < sp[1]; ++h)
      for (int d = 0; d < sp[2]; ++d)
        for (int c = 0; c < C; ++c)
          x[c * PS + (static_cast<std::size_t>(w) * padded[1] + h) * padded[2] + d] = image.at(w, h, d, c);
  auto fw = model.forward(Var(std::move(x)), {}, false);
  const Tensor& y = fw.output.value();
  const int L = y.dim(1);
  LabelVolume out(sp, L, image.spacing());
  for (int w = 0; w < sp[0]; ++w)
    for (int h = 0; h < sp[1]; ++h)
      for (int d = 0; d < sp[2]; ++d) {
        const std::size_t s = (static_cast<std::size_t>(w) * padded[1] + h) * padded[2] + d;
        int best = 0;
        for (int c = 1; c < L; ++c) {
          if (y[c * PS + s] > y[best * PS + s]) best = c;
        }
        out.at(w, h, d) = static_cast<std::uint16_t>(best);
      }
  return out;
}

Segmenter model_segmenter(Model& model) {
  return [&model](const Volume& v) { return predict_labels(model, v); };
}

double validate_dice(Model& model, const DatasetManifest& manifest, const std::string& split) {
  const auto report = evaluate_split(model_segmenter(model), manifest, split);
  return report.mean_dice().mean;
}

TrainConfig config_from_checkpoint(const CheckpointData& ckpt) {
  require(ckpt.meta.contains("config"), ErrorKind::format, "checkpoint has no configuration");
  return ckpt.meta.at("config").get<TrainConfig>();
}

Model model_from_checkpoint(const CheckpointData& ckpt) {
  const TrainConfig cfg = config_from_checkpoint(ckpt);
  const std::string phase = ckpt.meta.value("phase", "");
  require(phase == "pretrain" || phase == "finetune", ErrorKind::format, "unknown checkpoint phase \"" + phase + "\"");
  Model model(phase == "pretrain" ? cfg.pretrain_model_spec() : cfg.finetune_model_spec(), 0);
  model.load_state(ckpt.tensors);
  return model;
}

TrainResult finetune(const TrainConfig& cfg, const DatasetManifest& manifest, const FinetuneOptions& options) {
  cfg.validate();
  ensure_dir(options.out_dir);
  require(manifest.num_labels == cfg.unet.out_channels, ErrorKind::config,
          "unet.out_channels (" + std::to_string(cfg.unet.out_channels) + ") differs from the dataset's " +
              std::to_string(manifest.num_labels) + " labels");
  const LabelledSet labelled = labelled_set(manifest, options.budget, cfg);
  FinetuneData data(manifest, labelled, cfg);

  Model model(cfg.finetune_model_spec(), derive_seed({cfg.seed, kTagInit}));
  nlohmann::json extra = {{"budget", options.budget}, {"init", "random"}};
  if (options.init_checkpoint) {
    const auto ck = load_checkpoint(*options.init_checkpoint);
    const TrainConfig src = config_from_checkpoint(ck);
    require(nlohmann::json(src.unet) == nlohmann::json(cfg.unet), ErrorKind::config,
            "pretrained U-Net shape differs from the finetuning configuration");
    model.load_state(ck.tensors, "unet.");
    extra["init"] = options.init_checkpoint->string();
  }
  Adam adam(model.parameters(), cfg.beta1_finetune, cfg.beta2, cfg.adam_eps);
  RunState st;
  const fs::path last = options.out_dir / "last.ckpt", best = options.out_dir / "best.ckpt";
  const fs::path loss_csv = options.out_dir / "loss.csv", val_csv = options.out_dir / "validation.csv";
  bool resumed = false;
  if (options.resume && fs::exists(last)) {
    const auto ck = load_checkpoint(last);
    require(ck.meta.value("phase", "") == "finetune", ErrorKind::format, "last.ckpt is not a finetuning checkpoint");
    check_resume_config(ck, cfg);
    st = restore_run(ck, model, adam);
    truncate_csv(loss_csv, st.step);
    truncate_csv(val_csv, st.step);
    resumed = true;
  }
  save_config(cfg, options.out_dir / "config.json");
  CsvLog log(loss_csv, "step,lr,total,sup,cs", resumed);
  CsvLog vlog(val_csv, "step,val_dice", resumed);

  const bool has_val = manifest.splits.count("val") > 0 && !manifest.split("val").empty();
  auto validate = [&](int step) {
    if (!has_val) return;
    const double v = validate_dice(model, manifest, "val");
    st.history.emplace_back(step, v);
    vlog.row(std::to_string(step) + "," + fmt(v));
    if (st.best_step < 0 || v > st.best_value) {
      st.best_step = step;
      st.best_value = v;
      save_run(best, "finetune", cfg, model, nullptr, st, extra);
    }
  };

  const int T = cfg.finetune_steps;
  const int end = options.stop_after >= 0 ? std::min(options.stop_after, T) : T;
  const bool use_cs = cfg.cs_active();
  {
    Prefetcher<FinetuneBatch> loader(st.step + 1, std::max(end, st.step + 1), options.workers, [&](int step) {
      return data.sample(derive_seed({cfg.seed, kTagTrain, static_cast<std::uint64_t>(step)}));
    });
    for (int step = st.step + 1; step <= end; ++step) {
      const FinetuneBatch batch = loader.get(step);
      const double lr = linear_lr(cfg.lr, step - 1, T);
      double sup_v = 0.0;
      {
        auto fw = model.forward(Var(batch.sup_input), {}, true);
        Var prob = Model::segment(fw.output);
        Var term = objective({prob}, sup_v, [&](const std::vector<const Tensor*>& t) {
          return sup_loss(*t[0], std::span<const std::uint16_t>(batch.labels));
        });
        backward(term);
        adam.step(lr);
      }
      std::optional<double> cs_v;
      if (use_cs) {
        const int B = cfg.batch_size;
        auto fw = model.forward(Var(batch.cs_input), {}, true);
        Var prob = Model::segment(fw.output);
        double v = 0.0;
        Var term = objective({ops::select_batch(prob, 0, B), ops::select_batch(prob, B, B)}, v,
                             [](const std::vector<const Tensor*>& t) { return cs_loss(*t[0], *t[1]); });
        backward(ops::weighted_sum({{cfg.weights.cs_weight, term}}));
        adam.step(lr);
        cs_v = v;
      }
      StepLosses L;
      L.step = step;
      L.lr = lr;
      L.total = finetune_total(sup_v, cs_v.value_or(0.0), cfg.weights);
      if (!use_cs) L.total = sup_v;
      log.row(std::to_string(step) + "," + fmt(lr) + "," + fmt(L.total) + "," + fmt(sup_v) + "," + fmt(cs_v));
      if (options.on_step) options.on_step(L);
      if (!options.quiet && (step % 10 == 0 || step == end)) {
        std::cerr << "finetune step " << step << "/" << T << " sup " << sup_v;
        if (cs_v) std::cerr << " cs " << *cs_v;
        std::cerr << "\n";
      }
      st.step = step;
      const bool periodic = cfg.validate_every > 0 && step % cfg.validate_every == 0;
      if (periodic || step == T) {
        validate(step);
        save_run(last, "finetune", cfg, model, &adam, st, extra);
      }
    }
  }
  if (!has_val && st.step == T) {
    st.best_step = T;
    save_run(best, "finetune", cfg, model, nullptr, st, extra);
  }
  save_run(last, "finetune", cfg, model, &adam, st, extra);

  TrainResult r;
  r.best_checkpoint = fs::exists(best) ? best : last;
  r.last_checkpoint = last;
  r.best_step = st.best_step;
  r.best_value = st.best_value;
  r.history = st.history;
  r.last_step = st.step;
  return r;
}

}  // namespace longiseg
