// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/model_config.hpp"

#include <Eigen/Core>

#include <array>
#include <vector>

namespace gssd {

/// Corner-form box in normalized image coordinates.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  BoundingBox clamped() const;
  bool operator==(const BoundingBox &) const = default;
};

struct CenterBox {
  double cx = 0, cy = 0, w = 0, h = 0;

  BoundingBox corners() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
  static CenterBox from(const BoundingBox &b) {
    return {(b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2, b.width(), b.height()};
  }
};

/// Box with a class label; label 0 is reserved for background.
struct GroundTruth {
  BoundingBox box;
  int label = 1;
};

struct BoxVariances {
  double center = 0.1;
  double size = 0.2;
};

struct PriorSet {
  struct Meta {
    int map;
    double scale;
    double aspect;
  };
  std::vector<CenterBox> boxes;
  std::vector<Meta> meta;
  BoxVariances variances;

  Index size() const { return static_cast<Index>(boxes.size()); }
};

using Offsets = std::array<double, 4>;

struct MatchResult {
  std::vector<int> matched_gt;  // -1 for background
  int num_matched = 0;
  Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor> encoded_targets;
  std::vector<int> class_targets;
};

struct ScoredBox {
  BoundingBox box;
  double score = 0;
};

/// Default boxes in head order: map, then row-major cell, then box index.
/// Within a cell: unit box at s_k, the extra unit box at sqrt(s_k s_{k+1}),
/// then the remaining aspect ratios in pairs (a, 1/a).
PriorSet generate_priors(const ModelConfig &config);

/// Unclamped priors, used to check the aspect construction.
PriorSet generate_raw_priors(const ModelConfig &config);

double iou(const BoundingBox &a, const BoundingBox &b);

/// Two-phase SSD matching. Phase one assigns every ground truth a distinct
/// prior greedily by highest IoU (ties: lower ground-truth index, then lower
/// prior index) regardless of threshold. Phase two gives each remaining prior
/// its best ground truth when that IoU exceeds the threshold.
MatchResult match(const PriorSet &priors, const std::vector<GroundTruth> &gts, double threshold = 0.5);

Offsets encode(const BoundingBox &gt, const CenterBox &prior, const BoxVariances &v = {});
BoundingBox decode(const Offsets &offsets, const CenterBox &prior, const BoxVariances &v = {});

/// Greedy NMS. Returns indices into boxes, in descending score order.
std::vector<std::size_t> nms(const std::vector<ScoredBox> &boxes, double iou_threshold = 0.45,
                             std::size_t top_k = 200);

} // namespace gssd
