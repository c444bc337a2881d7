#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "boxseg/ba_unet.hpp"
#include "boxseg/volume.hpp"

namespace boxseg {

struct TrainConfig {
  double alpha = 0.1;
  double epsilon = 1e-7;
  std::size_t adam_epochs = 3;
  std::size_t sgd_epochs = 17;
  double adam_lr = 1e-4;
  double sgd_lr_initial = 1e-3;
  double lr_decay_rate = 0.94;
  std::size_t lr_decayed_step = 100;
  std::size_t batch_size = 1;
  std::size_t folds = 1;
  uint64_t seed = 0;

  void validate() const;
  std::size_t total_epochs() const { return adam_epochs + sgd_epochs; }
  nlohmann::json to_json() const;
  // Missing fields keep their defaults.
  static TrainConfig from_json(const nlohmann::json& j);
};

/// 1 - 2 (sum(Y y) + eps) / (sum(Y) + sum(y) + eps) over every voxel, with a
/// soft target Y (0.5 allowed). Differentiable in `pred`.
template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, std::span<const float> target, double epsilon);

/// Y' = (1 - alpha) Y + alpha y, voxelwise.
template <typename T>
void ema_update(std::span<T> ensemble, std::span<const T> prediction, double alpha);
SoftLabelVolume ema_update(const SoftLabelVolume& ensemble, const SoftLabelVolume& prediction, double alpha);

/// sgd_lr_initial * lr_decay_rate ^ (step / lr_decayed_step), real exponent.
double lr_schedule(std::size_t step, const TrainConfig& cfg);

enum class OptimizerKind { Adam, Sgd };

struct AdamHyper {
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
};

template <typename T>
struct OptimizerState {
  std::vector<std::vector<T>> m, v;  // Adam moments, one slot per parameter
  std::size_t adam_steps = 0;
};

/// One update of every parameter from its accumulated gradient (a missing
/// gradient counts as zero). SGD: p -= lr g. Adam: bias-corrected moments.
template <typename T>
void optimizer_step(std::vector<NamedParameter<T>>& params, OptimizerKind kind, OptimizerState<T>& state, double lr);

struct TrainCase {
  std::string id;
  Volume image;  // float32-normalized
  SoftLabelVolume pseudo_mask;
};

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  std::string phase;      // "adam" | "sgd"
  double mean_loss = 0.0;
  double lr = 0.0;  // learning rate of the epoch's first step
};

std::string epoch_log_csv(const std::vector<EpochLog>& log);

struct TrainOptions {
  // When set, a resumable checkpoint is written here after every epoch.
  std::optional<std::filesystem::path> checkpoint_dir;
  // Continue from the checkpoint in checkpoint_dir.
  bool resume = false;
  // Stop after this many epochs in this invocation (the checkpoint stays
  // resumable).
  std::optional<std::size_t> max_epochs_this_run;
  std::function<void(const EpochLog&)> on_epoch;
};

struct TrainResult {
  BaUnet<float> model;
  std::vector<EpochLog> log;
  std::vector<SoftLabelVolume> ensemble;  // Y^t per case after the last epoch
  std::size_t epochs_completed = 0;
};

/// Iterative training with label ensembling: Y^0 is each case's pseudo mask;
/// every epoch visits the cases in a seeded order (forward, Dice loss
/// against the current Y^t, backward, one optimizer step), then folds the
/// recorded outputs into the labels with `ema_update`. The first
/// `adam_epochs` use Adam at `adam_lr`; the rest use SGD with `lr_schedule`
/// over a step counter that starts at 0 when SGD begins.
TrainResult train(const std::vector<TrainCase>& cases, const TrainConfig& cfg, const ArchConfig& arch,
                  const TrainOptions& options = {});

Tensor<float> volume_tensor(const Volume& normalized);

/// Forward pass on a normalized volume; no labels involved.
SoftLabelVolume infer(const BaUnet<float>& model, const Volume& normalized);

/// Seeded shuffle of 0..n-1 split into k folds whose sizes differ by at
/// most one; the larger folds come last.
std::vector<std::vector<std::size_t>> make_folds(std::size_t n, std::size_t k, uint64_t seed);

}  // namespace boxseg
