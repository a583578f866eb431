// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/ops.hpp"
#include "gssd/priors.hpp"

#include <span>
#include <vector>

namespace gssd {

struct LossConfig {
  /// Online hard negative mining keeps this many negatives per positive (1:n).
  int negatives_per_positive = 3;
  double localization_weight = 1.0;

  void validate() const;
};

template <typename Scalar> struct LossTerms {
  Var<Scalar> total;
  double conf = 0;  // already divided by N
  double loc = 0;   // already divided by N, includes localization_weight
  int num_matched = 0;
  /// Mined negatives per image, as prior indices, hardest first.
  std::vector<std::vector<Index>> negatives;
};

/// Indices of the hardest background priors: the top min(ratio*positives,
/// available) by background loss, ties resolved toward the lower index.
std::vector<Index> mine_hard_negatives(std::span<const double> background_loss,
                                       std::span<const int> class_targets, int negatives_per_positive);

/// SSD multibox objective: (L_conf + alpha * L_loc) / N with N the number of
/// matched priors over the whole batch. Zero when nothing matched.
template <typename Scalar>
LossTerms<Scalar> multibox_loss(const Var<Scalar> &loc, const Var<Scalar> &conf,
                                std::span<const MatchResult> matches, const LossConfig &cfg);

} // namespace gssd
