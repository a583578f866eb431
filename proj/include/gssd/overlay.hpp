// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/data.hpp"
#include "gssd/eval.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace gssd {

using Rgb = std::array<std::uint8_t, 3>;

inline constexpr Rgb kTruthColor{255, 255, 0};
inline constexpr Rgb kPredictionColor{255, 0, 0};

struct RgbImage {
  Index width = 0, height = 0;
  std::vector<std::uint8_t> pixels;  // row-major RGB

  Rgb at(Index x, Index y) const;
  void set(Index x, Index y, Rgb c);
};

/// Windowed portal-phase slice in gray, ground-truth outlines, then
/// prediction outlines drawn on top.
RgbImage render_overlay(const PhaseVolume &pv, Index z, const std::vector<GroundTruth> &truth,
                        const std::vector<Detection> &detections);

void draw_box(RgbImage &img, const BoundingBox &box, Rgb color);
void write_ppm(const std::filesystem::path &path, const RgbImage &img);

} // namespace gssd
