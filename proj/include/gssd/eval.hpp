// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/train.hpp"

#include <map>
#include <string>
#include <vector>

namespace gssd {

struct Detection {
  int slice = 0;
  BoundingBox box;
  int label = 1;
  float confidence = 0;  // softmax probability
};

struct DetectConfig {
  double conf_threshold = 0.01;
  double nms_threshold = 0.45;
  int top_k = 200;
  InputMode input_mode = InputMode::MultiPhase;
  int batch_slices = 8;
};

/// Per-slice inference over a whole volume: stack, forward in inference
/// mode, softmax, decode against priors, keep p > threshold for each
/// foreground class, per-class NMS. Sorted by slice, class, confidence.
std::vector<Detection> detect(Model<float> &model, const PriorSet &priors, const PhaseVolume &pv,
                              const DetectConfig &cfg = {});

/// Same pipeline for a single slice input [C, S, S].
std::vector<Detection> detect_slice(Model<float> &model, const PriorSet &priors, const Tensor<float> &input,
                                    int slice, const DetectConfig &cfg = {});

struct PrPoint {
  double recall, precision;
};

struct ApResult {
  double ap = 0;
  std::vector<PrPoint> curve;  // one point per ranked detection
  int true_positives = 0;
  int num_gt = 0;
};

/// Ground truths keyed by slice.
using SliceTruth = std::map<int, std::vector<GroundTruth>>;

/// All-point interpolated AP with greedy per-slice matching at the IoU
/// threshold, same class only. Throws std::domain_error when there are
/// neither ground truths nor detections.
ApResult average_precision(const std::vector<Detection> &dets, const SliceTruth &gts, double iou_threshold = 0.5);

/// Detections and truths of several volumes, slices tagged by volume.
struct EvalSet {
  std::vector<Detection> detections;
  SliceTruth truth;
};

/// Runs detect() on each listed volume and pools detections and fused
/// per-slice ground truths, keying slices as volume * 100000 + z.
EvalSet evaluate_volumes(Model<float> &model, const Dataset &data, const std::vector<int> &volumes,
                         const DetectConfig &cfg);

struct FoldResult {
  int fold = 0;
  double best_ap = 0;
  int best_iter = 0;
  std::vector<std::pair<int, double>> ap_history;
  std::vector<LossRow> losses;
  std::vector<PrPoint> best_curve;
  std::string error;  // set when training failed for this fold
};

struct CvReport {
  std::vector<FoldResult> folds;
  double mean_ap = 0;
};

struct CvOptions {
  int folds = 5;
  double iou_threshold = 0.5;
  DetectConfig detect;
  std::optional<std::filesystem::path> out_dir;
  std::string config_echo;
};

/// Trains one model per fold, validating every val_interval iterations and
/// keeping the best AP per fold. A failing fold is recorded, not fatal.
CvReport cross_validate(const TrainConfig &cfg, const Dataset &data, const CvOptions &opts);

void write_pr_curve(const std::filesystem::path &path, const std::vector<PrPoint> &curve);
void write_cv_report(const std::filesystem::path &path, const CvReport &report);
void write_detections(const std::filesystem::path &path, const std::vector<Detection> &dets);
std::vector<Detection> read_detections(const std::filesystem::path &path);

struct BenchmarkResult {
  std::vector<double> seconds;  // wall clock per full-volume pass
  double median_seconds = 0;
  double slices_per_second = 0;
  double seconds_per_volume = 0;
  bool identical_outputs = true;
};

BenchmarkResult benchmark(Model<float> &model, const PriorSet &priors, const PhaseVolume &pv, int runs = 3,
                          const DetectConfig &cfg = {});

} // namespace gssd
