#include "boxseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "boxseg/volume_io.hpp"

namespace boxseg {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  if (!(alpha > 0.0 && alpha <= 1.0)) throw VolumeError("alpha: must lie in (0,1]");
  if (!(epsilon > 0.0)) throw VolumeError("epsilon: must be > 0");
  if (!(lr_decay_rate > 0.0 && lr_decay_rate <= 1.0)) throw VolumeError("lr_decay_rate: must lie in (0,1]");
  if (lr_decayed_step == 0) throw VolumeError("lr_decayed_step: must be >= 1");
  if (batch_size != 1) throw VolumeError("batch_size: only 1 is supported");
  if (!(adam_lr > 0.0) || !(sgd_lr_initial > 0.0)) throw VolumeError("learning rates must be > 0");
  if (folds < 1) throw VolumeError("folds: must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"alpha", alpha},
          {"epsilon", epsilon},
          {"adam_epochs", adam_epochs},
          {"sgd_epochs", sgd_epochs},
          {"adam_lr", adam_lr},
          {"sgd_lr_initial", sgd_lr_initial},
          {"lr_decay_rate", lr_decay_rate},
          {"lr_decayed_step", lr_decayed_step},
          {"batch_size", batch_size},
          {"folds", folds},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.alpha = j.value("alpha", c.alpha);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.adam_epochs = j.value("adam_epochs", c.adam_epochs);
  c.sgd_epochs = j.value("sgd_epochs", c.sgd_epochs);
  c.adam_lr = j.value("adam_lr", c.adam_lr);
  c.sgd_lr_initial = j.value("sgd_lr_initial", c.sgd_lr_initial);
  c.lr_decay_rate = j.value("lr_decay_rate", c.lr_decay_rate);
  c.lr_decayed_step = j.value("lr_decayed_step", c.lr_decayed_step);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.folds = j.value("folds", c.folds);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

template <typename T>
Tensor<T> dice_loss(const Tensor<T>& pred, std::span<const float> target, double epsilon) {
  if (pred.numel() != target.size())
    throw TensorError("dice_loss: shape mismatch (" + std::to_string(pred.numel()) + " predictions, " +
                      std::to_string(target.size()) + " labels)");
  if (!(epsilon > 0.0)) throw TensorError("dice_loss: epsilon must be > 0");
  const auto y = pred.values();
  double inter = 0.0, sum_target = 0.0, sum_pred = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    inter += static_cast<double>(target[i]) * static_cast<double>(y[i]);
    sum_target += target[i];
    sum_pred += y[i];
  }
  const double num = inter + epsilon;
  const double den = sum_target + sum_pred + epsilon;
  const double loss = 1.0 - 2.0 * num / den;

  std::vector<float> labels(target.begin(), target.end());
  return Tensor<T>::make_result({1}, {static_cast<T>(loss)}, {pred},
                                [labels = std::move(labels), num, den](TensorNode<T>& self) {
                                  auto& dy = self.parents[0]->grad;
                                  const double g = static_cast<double>(self.grad[0]);
                                  // d/dy_i of -2 num/den = -2 (Y_i den - num) / den^2
                                  for (std::size_t i = 0; i < dy.size(); ++i)
                                    dy[i] += static_cast<T>(g * -2.0 * (labels[i] * den - num) / (den * den));
                                });
}

template <typename T>
void ema_update(std::span<T> ensemble, std::span<const T> prediction, double alpha) {
  if (ensemble.size() != prediction.size()) throw VolumeError("ema_update: shape mismatch");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw VolumeError("ema_update: alpha must lie in (0,1]");
  for (std::size_t i = 0; i < ensemble.size(); ++i)
    ensemble[i] = static_cast<T>((1.0 - alpha) * ensemble[i] + alpha * prediction[i]);
}

SoftLabelVolume ema_update(const SoftLabelVolume& ensemble, const SoftLabelVolume& prediction, double alpha) {
  if (!(ensemble.shape == prediction.shape)) throw VolumeError("ema_update: shape mismatch");
  std::vector<float> out = ensemble.data;
  ema_update(std::span<float>(out), std::span<const float>(prediction.data), alpha);
  for (auto& v : out) v = std::clamp(v, 0.0f, 1.0f);
  return SoftLabelVolume(ensemble.shape, std::move(out));
}

double lr_schedule(std::size_t step, const TrainConfig& cfg) {
  return cfg.sgd_lr_initial *
         std::pow(cfg.lr_decay_rate, static_cast<double>(step) / static_cast<double>(cfg.lr_decayed_step));
}

template <typename T>
void optimizer_step(std::vector<NamedParameter<T>>& params, OptimizerKind kind, OptimizerState<T>& state, double lr) {
  if (kind == OptimizerKind::Sgd) {
    for (auto& p : params) {
      if (!p.tensor.has_grad()) continue;
      auto v = p.tensor.mutable_values();
      const auto g = p.tensor.grad();
      if (g.size() != v.size()) throw TensorError("optimizer: gradient shape mismatch for '" + p.name + "'");
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(v[i] - lr * g[i]);
    }
    return;
  }

  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), T(0));
      state.v.emplace_back(p.tensor.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw TensorError("optimizer: state does not match parameter list");
  ++state.adam_steps;
  const double t = static_cast<double>(state.adam_steps);
  const double c1 = 1.0 - std::pow(AdamHyper::kBeta1, t);
  const double c2 = 1.0 - std::pow(AdamHyper::kBeta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = params[k].tensor.mutable_values();
    const auto g = params[k].tensor.grad();
    auto& m1 = state.m[k];
    auto& m2 = state.v[k];
    if (m1.size() != v.size()) throw TensorError("optimizer: state shape mismatch for '" + params[k].name + "'");
    if (!g.empty() && g.size() != v.size()) throw TensorError("optimizer: gradient shape mismatch for '" + params[k].name + "'");
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      const double mi = AdamHyper::kBeta1 * m1[i] + (1.0 - AdamHyper::kBeta1) * gi;
      const double vi = AdamHyper::kBeta2 * m2[i] + (1.0 - AdamHyper::kBeta2) * gi * gi;
      m1[i] = static_cast<T>(mi);
      m2[i] = static_cast<T>(vi);
      v[i] = static_cast<T>(v[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + AdamHyper::kEps));
    }
  }
}

std::string epoch_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,phase,mean_loss,lr\n";
  os << std::setprecision(10);
  for (const auto& e : log) os << e.epoch << ',' << e.phase << ',' << e.mean_loss << ',' << e.lr << '\n';
  return os.str();
}

Tensor<float> volume_tensor(const Volume& normalized) {
  const auto& sh = normalized.shape();
  const auto d = normalized.float_data();
  return Tensor<float>::from({1, 1, sh.slices, sh.rows, sh.cols}, std::vector<float>(d.begin(), d.end()));
}

SoftLabelVolume infer(const BaUnet<float>& model, const Volume& normalized) {
  if (normalized.dtype() != DType::Float32Normalized) throw VolumeError("infer: expected a float32-normalized volume");
  const auto out = model.forward(volume_tensor(normalized));
  const auto v = out.values();
  std::vector<float> data(v.begin(), v.end());
  return SoftLabelVolume(normalized.shape(), std::move(data));
}

std::vector<std::vector<std::size_t>> make_folds(std::size_t n, std::size_t k, uint64_t seed) {
  if (k < 2) throw VolumeError("folds: k must be >= 2");
  if (k > n) throw VolumeError("folds: k (" + std::to_string(k) + ") exceeds number of cases (" + std::to_string(n) + ")");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f >= k - n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos), order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    pos += size;
  }
  return folds;
}

namespace {

struct TrainerState {
  std::size_t epochs_completed = 0;
  std::size_t sgd_step = 0;
  OptimizerState<float> optimizer;
  std::vector<SoftLabelVolume> ensemble;
  std::vector<EpochLog> log;
};

std::vector<std::size_t> epoch_order(std::size_t n, uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<uint32_t>(seed), static_cast<uint32_t>(seed >> 32), static_cast<uint32_t>(epoch)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void save_state(const fs::path& dir, const BaUnet<float>& model, const TrainerState& st, const TrainConfig& cfg,
                const std::vector<TrainCase>& cases) {
  model.save(dir);
  fs::create_directories(dir / "ensemble");
  for (std::size_t c = 0; c < cases.size(); ++c)
    save_volume(st.ensemble[c].to_volume(cases[c].image.spacing()), dir / "ensemble" / (cases[c].id + ".json"));

  std::vector<StoredTensor> moments;
  for (std::size_t k = 0; k < st.optimizer.m.size(); ++k) {
    const auto& p = model.parameters()[k];
    moments.push_back({"m." + p.name, p.tensor.dims(), st.optimizer.m[k], false});
    moments.push_back({"v." + p.name, p.tensor.dims(), st.optimizer.v[k], false});
  }
  save_tensors(moments, dir, "optimizer.json");

  nlohmann::json log = nlohmann::json::array();
  for (const auto& e : st.log) log.push_back({{"epoch", e.epoch}, {"phase", e.phase}, {"mean_loss", e.mean_loss}, {"lr", e.lr}});
  nlohmann::json ids = nlohmann::json::array();
  for (const auto& c : cases) ids.push_back(c.id);
  write_json({{"epochs_completed", st.epochs_completed},
              {"sgd_step", st.sgd_step},
              {"adam_steps", st.optimizer.adam_steps},
              {"config", cfg.to_json()},
              {"cases", ids},
              {"log", log}},
             dir / "trainer_state.json");
}

TrainerState load_state(const fs::path& dir, BaUnet<float>& model, const std::vector<TrainCase>& cases) {
  TrainerState st;
  const auto j = read_json(dir / "trainer_state.json");
  st.epochs_completed = j.at("epochs_completed").get<std::size_t>();
  st.sgd_step = j.at("sgd_step").get<std::size_t>();
  st.optimizer.adam_steps = j.at("adam_steps").get<std::size_t>();
  const auto ids = j.at("cases").get<std::vector<std::string>>();
  if (ids.size() != cases.size()) throw VolumeError("resume: checkpoint was trained on a different case list");
  for (std::size_t c = 0; c < cases.size(); ++c)
    if (ids[c] != cases[c].id) throw VolumeError("resume: case '" + cases[c].id + "' does not match checkpoint");
  for (const auto& e : j.at("log"))
    st.log.push_back({e.at("epoch").get<std::size_t>(), e.at("phase").get<std::string>(), e.at("mean_loss").get<double>(),
                      e.at("lr").get<double>()});

  model.load_state(load_tensors(dir));
  const auto moments = load_tensors(dir, "optimizer.json");
  if (!moments.empty()) {
    if (moments.size() != 2 * model.parameters().size()) throw VolumeError("resume: optimizer state does not match model");
    for (std::size_t k = 0; k < model.parameters().size(); ++k) {
      st.optimizer.m.push_back(moments[2 * k].data);
      st.optimizer.v.push_back(moments[2 * k + 1].data);
    }
  }
  for (const auto& c : cases) st.ensemble.push_back(SoftLabelVolume::from_volume(load_volume(dir / "ensemble" / (c.id + ".json"))));
  return st;
}

}  // namespace

TrainResult train(const std::vector<TrainCase>& cases, const TrainConfig& cfg, const ArchConfig& arch,
                  const TrainOptions& options) {
  cfg.validate();
  arch.validate();
  if (cases.empty()) throw VolumeError("train: empty case list");
  for (const auto& c : cases) {
    if (c.image.dtype() != DType::Float32Normalized) throw VolumeError("train: case '" + c.id + "' image must be float32-normalized");
    if (!(c.pseudo_mask.shape == c.image.shape())) throw VolumeError("train: case '" + c.id + "' pseudo mask shape differs from image");
    const auto& sh = c.image.shape();
    if (sh.slices % 8 || sh.rows % 8 || sh.cols % 8)
      throw VolumeError("train: case '" + c.id + "' shape " + to_string(sh) + " is not divisible by 8");
  }
  if (options.resume && !options.checkpoint_dir) throw VolumeError("train: resume requires a checkpoint directory");

  BaUnet<float> model(arch, cfg.seed);
  TrainerState st;
  if (options.resume) {
    st = load_state(*options.checkpoint_dir, model, cases);
  } else {
    for (const auto& c : cases) st.ensemble.push_back(c.pseudo_mask);
  }

  std::vector<Tensor<float>> inputs;
  for (const auto& c : cases) inputs.push_back(volume_tensor(c.image));

  std::size_t ran = 0;
  while (st.epochs_completed < cfg.total_epochs()) {
    if (options.max_epochs_this_run && ran >= *options.max_epochs_this_run) break;
    const std::size_t epoch = st.epochs_completed;
    const bool adam = epoch < cfg.adam_epochs;

    EpochLog entry{epoch + 1, adam ? "adam" : "sgd", 0.0, adam ? cfg.adam_lr : lr_schedule(st.sgd_step, cfg)};
    std::vector<SoftLabelVolume> outputs(cases.size());
    double loss_sum = 0.0;
    for (std::size_t c : epoch_order(cases.size(), cfg.seed, epoch)) {
      model.zero_grad();
      const auto pred = model.forward(inputs[c]);
      auto loss = dice_loss(pred, st.ensemble[c].data, cfg.epsilon);
      loss.backward();
      loss_sum += loss.item();
      const auto pv = pred.values();
      outputs[c] = SoftLabelVolume(cases[c].image.shape(), std::vector<float>(pv.begin(), pv.end()));
      if (adam) {
        optimizer_step(model.parameters(), OptimizerKind::Adam, st.optimizer, cfg.adam_lr);
      } else {
        optimizer_step(model.parameters(), OptimizerKind::Sgd, st.optimizer, lr_schedule(st.sgd_step, cfg));
        ++st.sgd_step;
      }
    }
    for (std::size_t c = 0; c < cases.size(); ++c) st.ensemble[c] = ema_update(st.ensemble[c], outputs[c], cfg.alpha);

    entry.mean_loss = loss_sum / static_cast<double>(cases.size());
    st.log.push_back(entry);
    ++st.epochs_completed;
    ++ran;
    if (options.on_epoch) options.on_epoch(entry);
    if (options.checkpoint_dir) save_state(*options.checkpoint_dir, model, st, cfg, cases);
  }
  model.zero_grad();
  return {std::move(model), std::move(st.log), std::move(st.ensemble), st.epochs_completed};
}

template Tensor<float> dice_loss(const Tensor<float>&, std::span<const float>, double);
template Tensor<double> dice_loss(const Tensor<double>&, std::span<const float>, double);
template void ema_update(std::span<float>, std::span<const float>, double);
template void ema_update(std::span<double>, std::span<const double>, double);
template void optimizer_step(std::vector<NamedParameter<float>>&, OptimizerKind, OptimizerState<float>&, double);
template void optimizer_step(std::vector<NamedParameter<double>>&, OptimizerKind, OptimizerState<double>&, double);

}  // namespace boxseg
