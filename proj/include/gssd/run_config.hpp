// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/eval.hpp"
#include "gssd/io.hpp"
#include "gssd/train.hpp"

#include <optional>
#include <string>
#include <vector>

namespace gssd {

/// Everything a reproducible train/cv/detect run needs, read from a
/// key=value file. Unknown keys are rejected.
struct RunConfig {
  TrainConfig train;
  DetectConfig detect;
  double iou_threshold = 0.5;
  int folds = 5;
};

/// Seed precedence: `seed_override` (command line), then GSSD_SEED, then the
/// file's `seed` key. A run without any seed is rejected.
RunConfig parse_run_config(const KeyValues &kv, std::optional<std::uint64_t> seed_override = {});

/// Complete key=value echo; parse_run_config(echo) reproduces the config.
KeyValues echo_run_config(const RunConfig &cfg);

/// Keys whose values differ between two echoes, or that only one has.
std::vector<std::string> config_differences(const KeyValues &a, const KeyValues &b);

std::optional<std::uint64_t> env_seed();

} // namespace gssd
