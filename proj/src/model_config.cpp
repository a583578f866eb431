// SPDX-License-Identifier: Apache-2.0
#include "gssd/model_config.hpp"

#include "gssd/ops.hpp"

#include <cmath>

namespace gssd {

namespace {
// Reference VGG16-SSD widths of every backbone conv that must split evenly
// across phase groups.
constexpr Index kReferenceWidths[] = {64, 128, 256, 512, 1024, 128, 256};
} // namespace

Index ModelConfig::channels(Index reference) const {
  const auto base = static_cast<Index>(std::lround(static_cast<double>(reference) * width_scale));
  return std::max<Index>(base, 1) * (double_base ? 2 : 1);
}

ExtraGeometry extra_geometry(Index input_extent) {
  if (input_extent == 3)
    return {1, 0};
  return {2, 1};
}

std::vector<Index> ModelConfig::tap_sizes() const {
  Index s = input_size;
  s = pool_output_extent(s, {2, 2, 0, false});
  s = pool_output_extent(s, {2, 2, 0, false});
  s = pool_output_extent(s, {2, 2, 0, true});
  std::vector<Index> taps{s};
  s = pool_output_extent(s, {2, 2, 0, false});
  taps.push_back(s);
  while (taps.size() < 6) {
    const ExtraGeometry g = extra_geometry(s);
    s = conv_output_extent(s, 3, g.stride, g.padding);
    taps.push_back(s);
  }
  return taps;
}

std::vector<double> ModelConfig::aspect_ratios(int boxes_per_cell) {
  switch (boxes_per_cell) {
  case 2:
    return {1.0};
  case 4:
    return {1.0, 2.0, 0.5};
  case 6:
    return {1.0, 2.0, 0.5, 3.0, 1.0 / 3.0};
  default:
    throw ConfigError("boxes_per_cell must be 2, 4 or 6, got " + std::to_string(boxes_per_cell));
  }
}

Index ModelConfig::num_priors() const {
  const auto taps = tap_sizes();
  Index total = 0;
  for (std::size_t k = 0; k < taps.size(); ++k)
    total += taps[k] * taps[k] * boxes_per_cell[k];
  return total;
}

void ModelConfig::validate() const {
  if (input_size < 32)
    throw ConfigError("input_size " + std::to_string(input_size) +
                      " is too small for the six-map reduction ladder (minimum 32)");
  if (phases < 1 || slices_per_phase < 1)
    throw ConfigError("phases and slices_per_phase must be positive");
  if (n_fusion_convs < 0 || n_fusion_convs > 2)
    throw ConfigError("n_fusion_convs must be 0, 1 or 2, got " + std::to_string(n_fusion_convs));
  if (grouped && n_fusion_convs < 1)
    throw ConfigError("grouped models need at least one 1x1 fusion conv before the heads");
  if (n_classes < 2)
    throw ConfigError("n_classes must include background and at least one object class");
  if (!(width_scale > 0))
    throw ConfigError("width_scale must be positive");
  if (boxes_per_cell.size() != 6)
    throw ConfigError("boxes_per_cell needs one entry per feature map (6), got " +
                      std::to_string(boxes_per_cell.size()));
  for (int b : boxes_per_cell)
    aspect_ratios(b);
  if (!(scale_min > 0 && scale_min < scale_max && scale_max <= 1))
    throw ConfigError("need 0 < scale_min < scale_max <= 1");
  if (grouped) {
    for (Index ref : kReferenceWidths) {
      const Index c = channels(ref);
      if (c % phases != 0)
        throw ConfigError("grouped backbone width " + std::to_string(c) + " (reference " +
                          std::to_string(ref) + " x width_scale " + std::to_string(width_scale) +
                          ") is not divisible by phases=" + std::to_string(phases));
    }
  }
  for (Index t : tap_sizes())
    if (t < 1)
      throw ConfigError("input_size " + std::to_string(input_size) + " yields an empty feature map");
}

} // namespace gssd
