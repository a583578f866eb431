// SPDX-License-Identifier: Apache-2.0
#include "gssd/priors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gssd {

BoundingBox BoundingBox::clamped() const {
  auto c = [](double v) { return std::clamp(v, 0.0, 1.0); };
  return {c(x_min), c(y_min), c(x_max), c(y_max)};
}

PriorSet generate_raw_priors(const ModelConfig &config) {
  const auto taps = config.tap_sizes();
  const auto m = static_cast<double>(taps.size());
  auto scale_of = [&](double k) {
    return config.scale_min + (config.scale_max - config.scale_min) * k / (m - 1);
  };
  PriorSet out;
  out.boxes.reserve(static_cast<std::size_t>(config.num_priors()));
  for (std::size_t k = 0; k < taps.size(); ++k) {
    const double s = scale_of(static_cast<double>(k));
    const double s_next = scale_of(static_cast<double>(k + 1));
    const double extra = std::sqrt(s * s_next);
    const auto ratios = ModelConfig::aspect_ratios(config.boxes_per_cell[k]);
    const Index f = taps[k];
    for (Index i = 0; i < f; ++i) {
      for (Index j = 0; j < f; ++j) {
        const double cx = (static_cast<double>(j) + 0.5) / static_cast<double>(f);
        const double cy = (static_cast<double>(i) + 0.5) / static_cast<double>(f);
        const int map = static_cast<int>(k);
        out.boxes.push_back({cx, cy, s, s});
        out.meta.push_back({map, s, 1.0});
        out.boxes.push_back({cx, cy, extra, extra});
        out.meta.push_back({map, extra, 1.0});
        for (std::size_t r = 1; r < ratios.size(); ++r) {
          const double root = std::sqrt(ratios[r]);
          out.boxes.push_back({cx, cy, s * root, s / root});
          out.meta.push_back({map, s, ratios[r]});
        }
      }
    }
  }
  return out;
}

PriorSet generate_priors(const ModelConfig &config) {
  PriorSet out = generate_raw_priors(config);
  for (auto &b : out.boxes)
    b = CenterBox::from(b.corners().clamped());
  return out;
}

double iou(const BoundingBox &a, const BoundingBox &b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0)
    return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

MatchResult match(const PriorSet &priors, const std::vector<GroundTruth> &gts, double threshold) {
  const Index p = priors.size();
  const auto g = static_cast<Index>(gts.size());
  MatchResult r;
  r.matched_gt.assign(static_cast<std::size_t>(p), -1);
  r.class_targets.assign(static_cast<std::size_t>(p), 0);
  r.encoded_targets = decltype(r.encoded_targets)::Zero(p, 4);
  if (g == 0)
    return r;

  Eigen::MatrixXd overlap(g, p);
  for (Index j = 0; j < g; ++j)
    for (Index i = 0; i < p; ++i)
      overlap(j, i) = iou(gts[static_cast<std::size_t>(j)].box,
                          priors.boxes[static_cast<std::size_t>(i)].corners());

  // phase 1: greedy bipartite assignment
  std::vector<bool> gt_done(static_cast<std::size_t>(g), false);
  for (Index round = 0; round < std::min(g, p); ++round) {
    double best = -1;
    Index bj = -1, bi = -1;
    for (Index j = 0; j < g; ++j) {
      if (gt_done[static_cast<std::size_t>(j)])
        continue;
      for (Index i = 0; i < p; ++i) {
        if (r.matched_gt[static_cast<std::size_t>(i)] >= 0)
          continue;
        if (overlap(j, i) > best) {
          best = overlap(j, i);
          bj = j;
          bi = i;
        }
      }
    }
    if (bj < 0)
      break;
    gt_done[static_cast<std::size_t>(bj)] = true;
    r.matched_gt[static_cast<std::size_t>(bi)] = static_cast<int>(bj);
  }

  // phase 2: threshold the remaining priors
  for (Index i = 0; i < p; ++i) {
    if (r.matched_gt[static_cast<std::size_t>(i)] >= 0)
      continue;
    Index bj = 0;
    for (Index j = 1; j < g; ++j)
      if (overlap(j, i) > overlap(bj, i))
        bj = j;
    if (overlap(bj, i) > threshold)
      r.matched_gt[static_cast<std::size_t>(i)] = static_cast<int>(bj);
  }

  for (Index i = 0; i < p; ++i) {
    const int j = r.matched_gt[static_cast<std::size_t>(i)];
    if (j < 0)
      continue;
    ++r.num_matched;
    const auto &gt = gts[static_cast<std::size_t>(j)];
    r.class_targets[static_cast<std::size_t>(i)] = gt.label;
    const Offsets o = encode(gt.box, priors.boxes[static_cast<std::size_t>(i)], priors.variances);
    for (int c = 0; c < 4; ++c)
      r.encoded_targets(i, c) = o[static_cast<std::size_t>(c)];
  }
  return r;
}

Offsets encode(const BoundingBox &gt, const CenterBox &prior, const BoxVariances &v) {
  if (!(gt.width() > 0 && gt.height() > 0))
    throw ConfigError("encode: ground truth box has non-positive width or height");
  if (!(prior.w > 0 && prior.h > 0))
    throw ConfigError("encode: prior box has non-positive width or height");
  const CenterBox c = CenterBox::from(gt);
  return {(c.cx - prior.cx) / (prior.w * v.center), (c.cy - prior.cy) / (prior.h * v.center),
          std::log(c.w / prior.w) / v.size, std::log(c.h / prior.h) / v.size};
}

BoundingBox decode(const Offsets &o, const CenterBox &prior, const BoxVariances &v) {
  const CenterBox c{prior.cx + o[0] * v.center * prior.w, prior.cy + o[1] * v.center * prior.h,
                    prior.w * std::exp(o[2] * v.size), prior.h * std::exp(o[3] * v.size)};
  return c.corners();
}

std::vector<std::size_t> nms(const std::vector<ScoredBox> &boxes, double iou_threshold,
                             std::size_t top_k) {
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return boxes[a].score > boxes[b].score;
  });
  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    if (kept.size() >= top_k)
      break;
    bool keep = true;
    for (std::size_t k : kept)
      if (iou(boxes[idx].box, boxes[k].box) > iou_threshold) {
        keep = false;
        break;
      }
    if (keep)
      kept.push_back(idx);
  }
  return kept;
}

} // namespace gssd
