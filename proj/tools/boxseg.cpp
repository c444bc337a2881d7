// boxseg: command-line driver for the box-supervised segmentation workflow.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "boxseg/ba_unet.hpp"
#include "boxseg/metrics.hpp"
#include "boxseg/phantom.hpp"
#include "boxseg/preprocess.hpp"
#include "boxseg/pseudo_mask.hpp"
#include "boxseg/trainer.hpp"
#include "boxseg/volume_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace boxseg;

namespace {

constexpr const char* kVersion = "0.1.0";

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct Globals {
  uint64_t seed = 0;
  std::string config_path;
  std::string out;
  std::vector<std::string> argv;
};

json load_config(const Globals& g) {
  if (g.config_path.empty()) return json::object();
  return read_json(g.config_path);
}

json section(const json& cfg, const char* key) {
  return cfg.contains(key) ? cfg.at(key) : json::object();
}

void write_text(const std::string& text, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw VolumeError("cannot write '" + path.string() + "'");
  os << text;
}

void write_manifest(const Globals& g, const std::string& command, const json& resolved, const std::string& started) {
  write_json({{"command", command},
              {"argv", g.argv},
              {"config", resolved},
              {"seed", g.seed},
              {"version", kVersion},
              {"started_at", started},
              {"finished_at", utc_now()}},
             fs::path(g.out) / "run_manifest.json");
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

PseudoMaskParams pseudo_params_from(const json& j, PseudoMaskParams p) {
  if (j.contains("ks")) p.ks = j.at("ks").get<std::vector<int>>();
  p.hole_area_max = j.value("hole_area_max", p.hole_area_max);
  p.fg_component_min_frac = j.value("fg_component_min_frac", p.fg_component_min_frac);
  p.closing_radius = j.value("closing_radius", p.closing_radius);
  p.kmeans_restarts = j.value("kmeans_restarts", p.kmeans_restarts);
  p.kmeans_max_iters = j.value("kmeans_max_iters", p.kmeans_max_iters);
  return p;
}

json pseudo_params_json(const PseudoMaskParams& p) {
  return {{"ks", p.ks},
          {"hole_area_max", p.hole_area_max},
          {"fg_component_min_frac", p.fg_component_min_frac},
          {"closing_radius", p.closing_radius},
          {"kmeans_restarts", p.kmeans_restarts},
          {"kmeans_max_iters", p.kmeans_max_iters},
          {"seed", p.seed}};
}

struct TrainEntry {
  std::string id;
  fs::path image, pseudo, gt;
};

std::vector<TrainEntry> read_train_manifest(const fs::path& path) {
  const auto j = read_json(path);
  if (!j.contains("cases") || !j.at("cases").is_array()) throw VolumeError("manifest: missing 'cases' array");
  const fs::path base = path.parent_path();
  std::vector<TrainEntry> out;
  for (const auto& c : j.at("cases")) {
    for (const char* key : {"id", "image", "pseudo"})
      if (!c.contains(key)) throw VolumeError(std::string("manifest: case lacks '") + key + "'");
    TrainEntry e{c.at("id").get<std::string>(), resolve(base, c.at("image").get<std::string>()),
                 resolve(base, c.at("pseudo").get<std::string>()), {}};
    if (c.contains("gt")) e.gt = resolve(base, c.at("gt").get<std::string>());
    out.push_back(std::move(e));
  }
  return out;
}

Volume binarized(const Volume& v, double threshold) {
  if (v.dtype() == DType::Uint8Label) return v;
  return binarize(SoftLabelVolume::from_volume(v), threshold, v.spacing());
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  g.argv.assign(argv, argv + argc);
  std::string command = "boxseg";
  const std::string started = utc_now();

  CLI::App app{"Dense 3D segmentation from bounding-box annotations"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  app.add_option("--seed", g.seed, "Random seed for every stochastic stage");
  app.add_option("--config", g.config_path, "JSON file with per-stage parameter overrides");
  app.add_option("--out", g.out, "Output directory")->required();

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic phantom corpus");
  std::size_t count = 10;
  PhantomSpec pspec;
  std::vector<std::size_t> pshape{pspec.shape.slices, pspec.shape.rows, pspec.shape.cols};
  phantom->add_option("--count", count, "Number of phantoms");
  phantom->add_option("--shape", pshape, "Volume shape S H W")->expected(3);
  phantom->add_option("--n-blobs", pspec.n_blobs, "Blobs per phantom (1 or 2)");
  phantom->add_option("--hole-probability", pspec.hole_probability, "Probability of a hole per blob");
  phantom->add_option("--noise-std", pspec.noise_std_hu, "Additive voxel noise (HU)");

  // preprocess
  auto* preprocess = app.add_subcommand("preprocess", "HU window + normalize, optional slab crop and resize");
  std::string pre_in, pre_organ = "liver", pre_slab_labels, pre_slab_boxes;
  bool pre_resize = false;
  preprocess->add_option("--in", pre_in, "Input int16-HU volume")->required();
  preprocess->add_option("--organ", pre_organ, "Organ profile: liver | spleen | kidneys");
  preprocess->add_option("--slab-labels", pre_slab_labels, "Crop to the slices holding foreground in this label volume");
  preprocess->add_option("--slab-boxes", pre_slab_boxes, "Crop to the slices holding boxes in this JSON");
  preprocess->add_flag("--resize", pre_resize, "Resize to the profile's target shape");

  // bbox
  auto* bbox = app.add_subcommand("bbox", "Derive per-slice bounding boxes from a label volume");
  std::string bbox_gt;
  std::size_t margin = 5;
  bool split_lr = false;
  bbox->add_option("--gt", bbox_gt, "Ground-truth label volume")->required();
  bbox->add_option("--margin", margin, "Margin in pixels around each box");
  bbox->add_flag("--split-lr", split_lr, "Emit separate left/right boxes (kidneys)");

  // pseudomask
  auto* pseudo = app.add_subcommand("pseudomask", "Generate a trinary pseudo mask from boxes");
  std::string pm_volume, pm_boxes, pm_organ = "liver";
  PseudoMaskParams pm;
  std::vector<int> pm_ks;
  pseudo->add_option("--volume", pm_volume, "Normalized volume")->required();
  pseudo->add_option("--boxes", pm_boxes, "Box JSON")->required();
  pseudo->add_option("--organ", pm_organ, "Organ profile supplying the k pair");
  pseudo->add_option("--ks", pm_ks, "Override the two k values (liver 3 4, spleen/kidneys 2 3)")->expected(2);
  pseudo->add_option("--hole-area-max", pm.hole_area_max, "Fill background holes smaller than this");
  pseudo->add_option("--min-component-frac", pm.fg_component_min_frac, "Drop components below this fraction of the largest");
  pseudo->add_option("--closing-radius", pm.closing_radius, "Closing structuring element radius");
  pseudo->add_option("--restarts", pm.kmeans_restarts, "k-means restarts");
  pseudo->add_option("--max-iters", pm.kmeans_max_iters, "k-means iteration cap");

  // train
  auto* train_cmd = app.add_subcommand("train", "Train BA-Unet with iterative label ensembling");
  std::string tr_manifest;
  TrainConfig tc;
  ArchConfig ac;
  bool resume = false;
  train_cmd->add_option("--manifest", tr_manifest, "JSON {\"cases\":[{\"id\",\"image\",\"pseudo\"[,\"gt\"]}]}")->required();
  train_cmd->add_option("--folds", tc.folds, "Cross-validation folds (1 = train on everything)");
  train_cmd->add_option("--alpha", tc.alpha, "Label ensembling momentum");
  train_cmd->add_option("--adam-epochs", tc.adam_epochs, "Epochs with Adam");
  train_cmd->add_option("--sgd-epochs", tc.sgd_epochs, "Epochs with SGD");
  train_cmd->add_option("--adam-lr", tc.adam_lr, "Adam learning rate");
  train_cmd->add_option("--sgd-lr", tc.sgd_lr_initial, "Initial SGD learning rate");
  train_cmd->add_option("--lr-decay-rate", tc.lr_decay_rate, "SGD learning-rate decay rate");
  train_cmd->add_option("--lr-decayed-step", tc.lr_decayed_step, "Steps per decay period");
  train_cmd->add_option("--epsilon", tc.epsilon, "Dice loss smoothing");
  train_cmd->add_option("--base-channels", ac.base_channels, "Channels at the first encoder level");
  train_cmd->add_option("--attention-divisor", ac.attention_inter_channels_divisor, "Attention inter-channel divisor");
  train_cmd->add_flag("--resume", resume, "Resume from the checkpoint in --out (single-fold only)");

  // infer
  auto* infer_cmd = app.add_subcommand("infer", "Predict a probability volume");
  std::string inf_ckpt, inf_volume;
  infer_cmd->add_option("--checkpoint", inf_ckpt, "Checkpoint directory")->required();
  infer_cmd->add_option("--volume", inf_volume, "Normalized volume")->required();

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "Score predictions against ground truth");
  std::vector<std::string> ev_pred, ev_gt;
  double threshold = 0.5;
  eval_cmd->add_option("--pred", ev_pred, "Prediction volumes (soft or label)")->required();
  eval_cmd->add_option("--gt", ev_gt, "Ground-truth label volumes, same order")->required();
  eval_cmd->add_option("--threshold", threshold, "Binarization threshold for soft predictions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") return app.exit(e);
    std::cerr << json{{"error", e.what()}, {"kind", "usage"}}.dump() << "\n";
    return e.get_exit_code() ? e.get_exit_code() : 2;
  }

  try {
    command = app.get_subcommands().front()->get_name();
    const fs::path out(g.out);
    fs::create_directories(out);
    const json cfg = load_config(g);

    if (command == "phantom") {
      pspec.shape = {pshape[0], pshape[1], pshape[2]};
      pspec.seed = g.seed;
      pspec = PhantomSpec::from_json(section(cfg, "phantom"), pspec);
      std::cout << "generating " << count << " phantoms in " << out << "\n";
      generate_corpus(count, pspec, out);
      write_manifest(g, command, {{"count", count}, {"phantom", pspec.to_json()}}, started);

    } else if (command == "preprocess") {
      const auto profile = apply_overrides(organ_profile(pre_organ), section(cfg, "preprocess"));
      const Volume hu = load_volume(pre_in);
      Volume v = window_normalize(hu, profile.hu_window);
      json resolved{{"organ", profile.name},
                    {"hu_window", {profile.hu_window.low, profile.hu_window.high}},
                    {"resize", pre_resize}};
      if (!pre_slab_labels.empty() && !pre_slab_boxes.empty())
        throw VolumeError("preprocess: give at most one of --slab-labels / --slab-boxes");
      if (!pre_slab_labels.empty() || !pre_slab_boxes.empty()) {
        auto [slab, range] = pre_slab_labels.empty() ? extract_organ_slab(v, load_boxes(pre_slab_boxes))
                                                     : extract_organ_slab(v, load_volume(pre_slab_labels));
        v = std::move(slab);
        resolved["slab"] = {range.first, range.last};
        write_json({{"first", range.first}, {"last", range.last}}, out / "slab_range.json");
      }
      if (pre_resize) {
        v = resize_volume(v, profile.target_shape, ResizeMode::Trilinear);
        resolved["target_shape"] = {profile.target_shape.slices, profile.target_shape.rows, profile.target_shape.cols};
      }
      save_volume(v, out / "normalized.json");
      std::cout << "wrote " << (out / "normalized.json") << " " << to_string(v.shape()) << "\n";
      write_manifest(g, command, resolved, started);

    } else if (command == "bbox") {
      const json over = section(cfg, "bbox");
      margin = over.value("margin", margin);
      split_lr = over.value("split_lr", split_lr);
      const auto boxes = make_bounding_boxes(load_volume(bbox_gt), margin, split_lr);
      save_boxes(boxes, out / "boxes.json");
      std::cout << "wrote " << boxes.box_count() << " boxes to " << (out / "boxes.json") << "\n";
      write_manifest(g, command, {{"margin", margin}, {"split_lr", split_lr}}, started);

    } else if (command == "pseudomask") {
      pm.ks = pm_ks.empty() ? organ_profile(pm_organ).kmeans_ks : pm_ks;
      pm.seed = g.seed;
      pm = pseudo_params_from(section(cfg, "pseudomask"), pm);
      const Volume vol = load_volume(pm_volume);
      PseudoMaskReport report;
      const auto mask = generate_pseudo_mask(vol, load_boxes(pm_boxes), pm, &report);
      save_volume(mask.to_volume(vol.spacing()), out / "pseudo_mask.json");
      write_json(report.to_json(), out / "stage_report.json");
      std::cout << "wrote " << (out / "pseudo_mask.json") << "\n";
      write_manifest(g, command, pseudo_params_json(pm), started);

    } else if (command == "train") {
      tc.seed = g.seed;
      {
        json merged = tc.to_json();
        merged.update(section(cfg, "train"));
        tc = TrainConfig::from_json(merged);
        json arch = ac.to_json();
        arch.update(section(cfg, "arch"));
        ac = ArchConfig::from_json(arch);
      }
      const auto entries = read_train_manifest(tr_manifest);
      std::vector<TrainCase> cases;
      for (const auto& e : entries)
        cases.push_back({e.id, load_volume(e.image), SoftLabelVolume::from_volume(load_volume(e.pseudo))});
      auto run = [&](const std::vector<TrainCase>& subset, const fs::path& dir, bool resume_run) {
        TrainOptions opts;
        opts.checkpoint_dir = dir / "checkpoint";
        opts.resume = resume_run;
        opts.on_epoch = [&](const EpochLog& e) {
          std::cout << dir.filename().string() << " epoch " << e.epoch << " " << e.phase << " loss " << e.mean_loss << " lr "
                    << e.lr << std::endl;
        };
        auto result = train(subset, tc, ac, opts);
        write_text(epoch_log_csv(result.log), dir / "train_log.csv");
        return result;
      };

      json resolved{{"train", tc.to_json()}, {"arch", ac.to_json()}};
      if (tc.folds == 1) {
        run(cases, out, resume);
      } else {
        if (resume) throw VolumeError("train: --resume is only supported with --folds 1");
        const auto folds = make_folds(cases.size(), tc.folds, tc.seed);
        std::vector<CaseScore> all_scores;
        json fold_json = json::array();
        for (std::size_t f = 0; f < folds.size(); ++f) {
          const fs::path dir = out / ("fold_" + std::to_string(f));
          fs::create_directories(dir / "predictions");
          std::vector<bool> held(cases.size(), false);
          for (auto i : folds[f]) held[i] = true;
          std::vector<TrainCase> subset;
          json test_ids = json::array();
          for (std::size_t i = 0; i < cases.size(); ++i) {
            if (held[i]) test_ids.push_back(cases[i].id);
            else subset.push_back(cases[i]);
          }
          fold_json.push_back({{"fold", f}, {"test", test_ids}});
          const auto result = run(subset, dir, false);
          std::vector<CaseScore> scores;
          for (auto i : folds[f]) {
            const auto pred = infer(result.model, cases[i].image);
            save_volume(pred.to_volume(cases[i].image.spacing()), dir / "predictions" / (cases[i].id + ".json"));
            if (!entries[i].gt.empty())
              scores.push_back(score_case(binarize(pred, 0.5, cases[i].image.spacing()), load_volume(entries[i].gt), cases[i].id));
          }
          if (!scores.empty()) {
            write_text(metrics_csv(scores), dir / "metrics.csv");
            all_scores.insert(all_scores.end(), scores.begin(), scores.end());
          }
        }
        if (!all_scores.empty()) write_text(metrics_csv(all_scores), out / "metrics.csv");
        resolved["folds"] = fold_json;
      }
      write_manifest(g, command, resolved, started);

    } else if (command == "infer") {
      const auto model = BaUnet<float>::load(inf_ckpt);
      const Volume vol = load_volume(inf_volume);
      save_volume(infer(model, vol).to_volume(vol.spacing()), out / "prediction.json");
      std::cout << "wrote " << (out / "prediction.json") << "\n";
      write_manifest(g, command, {{"checkpoint", inf_ckpt}, {"arch", model.config().to_json()}}, started);

    } else if (command == "eval") {
      if (ev_pred.size() != ev_gt.size()) throw VolumeError("eval: --pred and --gt need the same number of files");
      std::vector<CaseScore> scores;
      for (std::size_t i = 0; i < ev_pred.size(); ++i)
        scores.push_back(score_case(binarized(load_volume(ev_pred[i]), threshold), load_volume(ev_gt[i]),
                                    fs::path(ev_pred[i]).stem().string()));
      write_text(metrics_csv(scores), out / "metrics.csv");
      const auto f = aggregate_fold(scores);
      std::cout << "mean DSC " << f.mean.dsc << " over " << scores.size() << " case(s)\n";
      write_manifest(g, command, {{"threshold", threshold}}, started);
    }
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"command", command}}.dump() << "\n";
    return 1;
  }
  return 0;
}
