// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/data.hpp"
#include "gssd/io.hpp"
#include "gssd/loss.hpp"
#include "gssd/model.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace gssd {

struct TrainConfig {
  int iterations = 2000;
  int batch_size = 8;
  double lr0 = 0.0005;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  /// Empty means the reference drops {5000, 8000} of a 10000-iteration run,
  /// scaled to `iterations`.
  std::vector<int> lr_drop_iters;
  double lr_drop_factor = 0.1;
  double jitter_alpha = 0.01;
  double match_threshold = 0.5;
  InputMode input_mode = InputMode::MultiPhase;
  int val_interval = 500;
  int checkpoint_interval = 0;  // 0: only at completion
  std::uint64_t seed = 0;
  ModelConfig model;
  LossConfig loss;
  AugmentConfig augment;

  std::vector<int> drop_iters() const;
  void validate() const;
};

double lr_at(int iter, const TrainConfig &cfg);

/// Momentum SGD with coupled L2 decay: v = m*v + g + wd*p; p -= lr*v. Decay is
/// skipped for `decay_exempt` tensors. Throws on a non-finite gradient.
void sgd_step(Tensor<float> &param, Eigen::ArrayXf &velocity, double lr, double momentum, double weight_decay,
              bool decay_exempt, const std::string &name = "");

/// Loaded volumes with their weak labels; a sample is one (volume, slice).
struct Dataset {
  std::vector<PhaseVolume> volumes;
  std::vector<std::vector<WeakLabel>> labels;

  struct Ref {
    int volume;
    int z;
  };
  std::vector<Ref> samples;

  void add(PhaseVolume volume, std::vector<WeakLabel> labels);
  std::vector<int> sample_volumes() const;
  Sample sample(std::size_t index, InputMode mode) const;
  std::vector<GroundTruth> ground_truths(int volume, int z) const;
};

Dataset load_dataset(const std::filesystem::path &dir);

struct LossRow {
  int iter = 0;
  double lr = 0;
  double total = 0, conf = 0, loc = 0;
};

std::string format_loss_row(const LossRow &row);
inline constexpr const char *kLossHeader = "iter,lr,loss_total,loss_conf,loss_loc";

/// Model weights plus optimizer state at an iteration boundary.
struct TrainState {
  Model<float> model;
  std::vector<Eigen::ArrayXf> velocity;  // parallel to model.parameters()
  int next_iter = 0;
};

TrainState initial_state(const TrainConfig &cfg);
Checkpoint make_checkpoint(const TrainState &state, const std::string &config_echo);
TrainState restore_state(const TrainConfig &cfg, const Checkpoint &ckpt);

struct TrainHooks {
  /// Files go here when set: loss.csv, checkpoint_<iter>.gssdckpt, final.gssdckpt.
  std::optional<std::filesystem::path> out_dir;
  std::string config_echo;
  /// Called after every val_interval-th iteration and after the last one.
  std::function<void(int completed, Model<float> &)> validate;
  std::function<void(const LossRow &)> on_row;
  /// Stop after this many completed iterations (the schedule still spans
  /// cfg.iterations); used to emulate interruption.
  std::optional<int> stop_after;
};

/// Runs iterations [state.next_iter, cfg.iterations) over the given sample
/// indices. Each iteration draws its batch and augmentation from an RNG
/// seeded by (seed, iteration), so a resumed run replays the same stream.
std::vector<LossRow> train(const TrainConfig &cfg, const Dataset &data, const std::vector<std::size_t> &indices,
                           TrainState &state, const TrainHooks &hooks = {});

} // namespace gssd
