#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "longiseg/config.hpp"
#include "longiseg/dataset.hpp"
#include "longiseg/diagnostics.hpp"
#include "longiseg/error.hpp"
#include "longiseg/metrics.hpp"
#include "longiseg/ops.hpp"
#include "longiseg/synthdata.hpp"
#include "longiseg/training.hpp"

namespace fs = std::filesystem;
using namespace longiseg;

namespace {

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("LONGISEG_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(s, &used);
    require(used == std::string(s).size(), ErrorKind::invalid, "");
    return v;
  } catch (...) {
    throw Error(ErrorKind::invalid, std::string("LONGISEG_SEED is not an unsigned integer: ") + s);
  }
}

// --seed wins, then LONGISEG_SEED, then whatever the config says
std::optional<std::uint64_t> resolve_seed(const std::optional<std::uint64_t>& flag) {
  return flag ? flag : env_seed();
}

TrainConfig train_config(const std::string& path, const std::string& ablation,
                         const std::optional<std::uint64_t>& seed) {
  TrainConfig cfg = path.empty() ? TrainConfig{} : load_config(path);
  if (!ablation.empty()) {
    require(ablation.size() == 1, ErrorKind::config, "ablation row must be a single letter A..L");
    cfg = ablation_preset(ablation[0], cfg);
  }
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

Index3 parse_index(const std::string& s) {
  Index3 q{};
  std::stringstream ss(s);
  std::string part;
  int n = 0;
  while (std::getline(ss, part, ',')) {
    require(n < 3, ErrorKind::invalid, "query must be w,h,d");
    try {
      std::size_t used = 0;
      q[n] = std::stoi(part, &used);
      require(used == part.size(), ErrorKind::invalid, "");
    } catch (...) {
      throw Error(ErrorKind::invalid, "query must be w,h,d, got " + s);
    }
    ++n;
  }
  require(n == 3, ErrorKind::invalid, "query must be w,h,d, got " + s);
  return q;
}

// Looks up the reference labels of whichever scan it is handed.
Segmenter ground_truth(const DatasetManifest& manifest, const std::string& split) {
  auto table = std::make_shared<std::vector<std::pair<Volume, LabelVolume>>>();
  for (const auto& id : manifest.split(split)) {
    for (auto& tp : manifest.load_subject(id).timepoints) {
      require(tp.label.has_value(), ErrorKind::data, "subject " + id + " has an unlabelled scan");
      table->emplace_back(tp.image, *tp.label);
    }
  }
  return [table](const Volume& image) {
    for (const auto& [img, lbl] : *table) {
      if (img.dims() == image.dims() && std::equal(img.values().begin(), img.values().end(), image.values().begin()))
        return lbl;
    }
    throw Error(ErrorKind::data, "no reference labels for image");
  };
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  out << text;
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
}

void print_summary(const std::string& name, const Summary& s) {
  std::cout << name << " mean=" << s.mean << " std=" << s.std << " median=" << s.median << " n=" << s.count << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  set_blas_threads(1);

  CLI::App app{"longiseg: longitudinal self-supervised segmentation on volumetric phantoms"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed_flag;
  int workers = 0;
  app.add_option("--seed", seed_flag, "random seed (falls back to LONGISEG_SEED)");
  app.add_option("--workers", workers, "background loader threads")->check(CLI::NonNegativeNumber);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "write a phantom dataset");
  std::string gen_config, gen_out, gen_preset;
  gen->add_option("--config", gen_config, "phantom config JSON");
  gen->add_option("--preset", gen_preset, "built-in phantom preset")->check(CLI::IsMember({"default", "isointense"}));
  gen->add_option("--out", gen_out, "output directory")->required();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "self-supervised pretraining");
  std::string pre_config, pre_data, pre_out, pre_ablation;
  bool pre_resume = false;
  int pre_steps = -1;
  pre->add_option("--config", pre_config, "training config JSON");
  pre->add_option("--data", pre_data, "dataset manifest")->required();
  pre->add_option("--out", pre_out, "checkpoint directory")->required();
  pre->add_option("--ablation", pre_ablation, "ablation preset row A..L");
  pre->add_option("--steps", pre_steps, "override the number of steps");
  pre->add_flag("--resume", pre_resume, "continue from <out>/last.ckpt");

  // finetune
  auto* fin = app.add_subcommand("finetune", "supervised finetuning");
  std::string fin_config, fin_data, fin_out, fin_ckpt, fin_budget = "one-shot";
  std::optional<double> fin_cs;
  bool fin_resume = false;
  int fin_steps = -1;
  fin->add_option("--config", fin_config, "training config JSON");
  fin->add_option("--data", fin_data, "dataset manifest")->required();
  fin->add_option("--out", fin_out, "checkpoint directory")->required();
  fin->add_option("--ckpt", fin_ckpt, "pretrained checkpoint, or none")->required();
  fin->add_option("--budget", fin_budget, "one-shot or a subject fraction in (0, 1]");
  fin->add_option("--cs-weight", fin_cs, "weight of the consistency term");
  fin->add_option("--steps", fin_steps, "override the number of steps");
  fin->add_flag("--resume", fin_resume, "continue from <out>/last.ckpt");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "segmentation and consistency metrics");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_report;
  ev->add_option("--ckpt", ev_ckpt, "finetuned checkpoint, or gt for the reference labels")->required();
  ev->add_option("--data", ev_data, "dataset manifest")->required();
  ev->add_option("--split", ev_split, "split name");
  ev->add_option("--report", ev_report, "report JSON path")->required();

  // diagnose
  auto* dg = app.add_subcommand("diagnose", "embedding spectra, spreads and similarity maps");
  std::string dg_ckpt, dg_volume, dg_key, dg_query, dg_out;
  std::vector<int> dg_layers;
  int dg_slice = -1;
  dg->add_option("--ckpt", dg_ckpt, "checkpoint")->required();
  dg->add_option("--volume", dg_volume, "volume file")->required();
  dg->add_option("--key", dg_key, "second volume for the similarity map");
  dg->add_option("--query", dg_query, "query index w,h,d at the layer's resolution");
  dg->add_option("--layers", dg_layers, "layers to analyse (default: similarity taps)")->delimiter(',');
  dg->add_option("--slice", dg_slice, "axial slice at the layer's resolution (default: middle)");
  dg->add_option("--out", dg_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  }

  try {
    const auto seed = resolve_seed(seed_flag);

    if (*gen) {
      require(gen_config.empty() || gen_preset.empty(), ErrorKind::invalid, "give --config or --preset, not both");
      PhantomConfig pc = gen_preset == "isointense" ? PhantomConfig::isointense_preset() : PhantomConfig{};
      if (!gen_config.empty()) {
        std::ifstream in(gen_config);
        require(static_cast<bool>(in), ErrorKind::io, "cannot open " + gen_config);
        try {
          pc = nlohmann::json::parse(in).get<PhantomConfig>();
        } catch (const nlohmann::json::exception& e) {
          throw Error(ErrorKind::config, gen_config + ": " + e.what());
        }
      }
      if (seed) pc.rng_seed = *seed;
      const auto m = generate_dataset(pc, gen_out, std::max(1, workers));
      std::cout << "wrote " << m.subjects.size() << " subjects to " << gen_out << "\n";
    } else if (*pre) {
      TrainConfig cfg = train_config(pre_config, pre_ablation, seed);
      if (pre_steps >= 0) cfg.pretrain_steps = pre_steps;
      RunOptions opt;
      opt.out_dir = pre_out;
      opt.workers = workers;
      opt.resume = pre_resume;
      opt.quiet = false;
      const auto r = pretrain(cfg, load_manifest(pre_data), opt);
      std::cout << "best step " << r.best_step << " val loss " << r.best_value << " -> " << r.best_checkpoint.string()
                << "\n";
    } else if (*fin) {
      TrainConfig cfg = train_config(fin_config, "", seed);
      if (fin_cs) cfg.weights.cs_weight = *fin_cs;
      if (fin_steps >= 0) cfg.finetune_steps = fin_steps;
      cfg.validate();
      FinetuneOptions opt;
      opt.out_dir = fin_out;
      opt.workers = workers;
      opt.resume = fin_resume;
      opt.quiet = false;
      opt.budget = fin_budget;
      if (fin_ckpt != "none") opt.init_checkpoint = fin_ckpt;
      const auto r = finetune(cfg, load_manifest(fin_data), opt);
      std::cout << "best step " << r.best_step << " val dice " << r.best_value << " -> " << r.best_checkpoint.string()
                << "\n";
    } else if (*ev) {
      const DatasetManifest manifest = load_manifest(ev_data);
      MetricReport report;
      if (ev_ckpt == "gt") {
        report = evaluate_split(ground_truth(manifest, ev_split), manifest, ev_split);
      } else {
        Model model = model_from_checkpoint(load_checkpoint(ev_ckpt));
        report = evaluate_split(model_segmenter(model), manifest, ev_split);
      }
      report.write(ev_report);
      print_summary("dice", report.mean_dice());
      print_summary("iou", report.mean_iou());
      print_summary("hd95", report.mean_hd95());
      print_summary("stcs", report.mean_stcs());
      print_summary("aspc", report.mean_aspc());
    } else if (*dg) {
      const CheckpointData ckpt = load_checkpoint(dg_ckpt);
      Model model = model_from_checkpoint(ckpt);
      const TrainConfig cfg = config_from_checkpoint(ckpt);
      const Volume vol = load_volume(dg_volume);
      std::vector<int> layers = dg_layers.empty() ? cfg.sim_layers() : dg_layers;
      for (int id : layers) require(id >= 0 && id < 24, ErrorKind::invalid, "layer id outside 0..23");
      fs::create_directories(dg_out);

      std::ostringstream spec, spread;
      spec << "layer,index,value\n";
      spread << "layer,std,effective_rank\n";
      spread.precision(9);
      spec.precision(12);
      for (int id : layers) {
        const auto sv = covariance_spectrum(model, vol, id, dg_slice);
        for (std::size_t i = 0; i < sv.size(); ++i) spec << id << "," << i << "," << sv[i] << "\n";
        spread << id << "," << projection_std(layer_embeddings(model, vol, id)) << "," << effective_rank(sv) << "\n";
      }
      write_text(fs::path(dg_out) / "spectrum.csv", spec.str());
      write_text(fs::path(dg_out) / "projection_std.csv", spread.str());

      require(dg_key.empty() == dg_query.empty(), ErrorKind::invalid, "--key and --query go together");
      if (!dg_key.empty()) {
        const Volume key = load_volume(dg_key);
        const Index3 q = parse_index(dg_query);
        for (int id : layers) {
          save_volume(similarity_map(model, vol, key, q, id),
                      fs::path(dg_out) / ("similarity_L" + std::string(id < 10 ? "0" : "") + std::to_string(id) + ".vol"));
        }
      }
      std::cout << "wrote diagnostics for " << layers.size() << " layers to " << dg_out << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << to_string(e.kind()) << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
