// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/tensor.hpp"

#include <string>
#include <vector>

namespace gssd {

/// Architecture knobs of the (grouped) SSD. Defaults are the desk-scale GSSD.
struct ModelConfig {
  Index input_size = 128;
  Index phases = 4;
  Index slices_per_phase = 3;
  bool grouped = true;
  bool double_base = false;
  int n_fusion_convs = 1;
  int n_classes = 2;
  double width_scale = 0.25;
  std::vector<int> boxes_per_cell{4, 6, 6, 6, 4, 4};
  double scale_min = 0.2;
  double scale_max = 0.9;

  Index input_channels() const { return phases * slices_per_phase; }
  Index groups() const { return grouped ? phases : 1; }

  /// Throws ConfigError naming the violated constraint.
  void validate() const;

  /// Spatial extents of the six feature maps feeding the heads.
  std::vector<Index> tap_sizes() const;

  /// Aspect ratios (besides the extra unit box) for a map with this many
  /// boxes per cell: 2 -> {1}, 4 -> {1,2,1/2}, 6 -> {1,2,1/2,3,1/3}.
  static std::vector<double> aspect_ratios(int boxes_per_cell);

  Index num_priors() const;

  /// Scaled channel count for a reference VGG width.
  Index channels(Index reference) const;
};

/// Geometry of the stride-reducing extra layers: 3x3 kernels with stride 2 and
/// padding 1, except a 3-wide map which collapses to 1 with an unpadded 3x3.
struct ExtraGeometry {
  Index stride;
  Index padding;
};
ExtraGeometry extra_geometry(Index input_extent);

} // namespace gssd
