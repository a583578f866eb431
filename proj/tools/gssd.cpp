// SPDX-License-Identifier: Apache-2.0
// gssd: phantom generation, training, cross-validation, detection, overlays.
#include "gssd/eval.hpp"
#include "gssd/io.hpp"
#include "gssd/overlay.hpp"
#include "gssd/run_config.hpp"
#include "gssd/train.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <cstdio>
#include <iostream>
#include <map>

using namespace gssd;
namespace fs = std::filesystem;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitInput = 2;

struct Loaded {
  RunConfig config;
  KeyValues echo;
  TrainState state;
};

Loaded load_checkpoint(const fs::path &path) {
  const Checkpoint ckpt = read_checkpoint(path);
  KeyValues echo = KeyValues::parse(ckpt.config, path.string() + " [config]");
  RunConfig cfg = parse_run_config(echo, echo.unsigned_integer("seed"));
  TrainState state = restore_state(cfg.train, ckpt);
  return {cfg, echo, std::move(state)};
}

PhaseVolume load_volume(const fs::path &path, float vendor_bias) {
  PhaseVolume pv = read_volume(path);
  pv.vendor_bias = vendor_bias;
  return pv;
}

int phantom_gen(const fs::path &spec_path, const fs::path &out, int count, std::optional<std::uint64_t> seed) {
  const PhantomConfig cfg = parse_phantom_config(KeyValues::load(spec_path));
  std::uint64_t s;
  if (seed)
    s = *seed;
  else if (auto env = env_seed())
    s = *env;
  else if (cfg.seed)
    s = *cfg.seed;
  else
    throw ConfigError(spec_path.string() + ": no seed (spec key, GSSD_SEED or --seed)");
  const auto entries = write_phantom_set(cfg, count, s, out);
  std::cout << "wrote " << entries.size() << " volumes to " << out.string() << "\n";
  return 0;
}

int train_cmd(const fs::path &config, const fs::path &data_dir, const fs::path &out,
              std::optional<std::uint64_t> seed, const std::optional<fs::path> &resume) {
  const RunConfig cfg = parse_run_config(KeyValues::load(config), seed);
  const KeyValues echo = echo_run_config(cfg);
  const Dataset data = load_dataset(data_dir);
  TrainState state = initial_state(cfg.train);
  if (resume) {
    Loaded prev = load_checkpoint(*resume);
    const auto diff = config_differences(echo, prev.echo);
    if (!diff.empty()) {
      std::string keys;
      for (const auto &k : diff)
        keys += (keys.empty() ? "" : ", ") + k;
      throw ConfigError("config does not match checkpoint " + resume->string() + ": " + keys);
    }
    state = std::move(prev.state);
  }
  std::vector<std::size_t> all(data.samples.size());
  for (std::size_t i = 0; i < all.size(); ++i)
    all[i] = i;
  TrainHooks hooks;
  hooks.out_dir = out;
  hooks.config_echo = echo.serialize();
  const auto rows = train(cfg.train, data, all, state, hooks);
  if (!rows.empty())
    std::cout << "iterations " << rows.front().iter << ".." << rows.back().iter << ", final loss "
              << format_loss_row(rows.back()) << "\n";
  std::cout << "checkpoint " << (out / "final.gssdckpt").string() << "\n";
  return 0;
}

int cv_cmd(const fs::path &config, const fs::path &data_dir, const fs::path &out, std::optional<std::uint64_t> seed) {
  const RunConfig cfg = parse_run_config(KeyValues::load(config), seed);
  const Dataset data = load_dataset(data_dir);
  CvOptions opts;
  opts.folds = cfg.folds;
  opts.iou_threshold = cfg.iou_threshold;
  opts.detect = cfg.detect;
  opts.out_dir = out;
  opts.config_echo = echo_run_config(cfg).serialize();
  const CvReport report = cross_validate(cfg.train, data, opts);
  int failed = 0;
  for (const auto &f : report.folds) {
    if (f.error.empty()) {
      std::cout << "fold " << f.fold << " best_ap " << f.best_ap << " at iter " << f.best_iter << "\n";
    } else {
      std::cout << "fold " << f.fold << " failed: " << f.error << "\n";
      ++failed;
    }
  }
  std::cout << "mean_ap " << report.mean_ap << "\n";
  return failed > 0 ? kExitRuntime : 0;
}

int detect_cmd(const fs::path &checkpoint, const fs::path &volume, const fs::path &out, double conf, float bias) {
  Loaded l = load_checkpoint(checkpoint);
  const PhaseVolume pv = load_volume(volume, bias);
  DetectConfig dcfg = l.config.detect;
  dcfg.conf_threshold = conf;
  const auto dets = detect(l.state.model, generate_priors(l.config.train.model), pv, dcfg);
  write_detections(out, dets);
  std::cout << dets.size() << " detections written to " << out.string() << "\n";
  return 0;
}

int overlay_cmd(const fs::path &volume, const fs::path &detections, const std::optional<fs::path> &labels,
                const fs::path &out, float bias) {
  const PhaseVolume pv = load_volume(volume, bias);
  const auto dets = read_detections(detections);
  std::vector<WeakLabel> weak;
  if (labels)
    weak = read_labels(*labels);
  std::map<int, std::vector<Detection>> by_slice;
  for (const auto &d : dets) {
    if (d.slice < 0 || d.slice >= pv.depth)
      throw FormatError(detections.string() + ": slice " + std::to_string(d.slice) + " outside the volume");
    by_slice[d.slice].push_back(d);
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec)
    throw IoError("cannot create " + out.string() + ": " + ec.message());
  for (Index z = 0; z < pv.depth; ++z) {
    const int zi = static_cast<int>(z);
    char name[32];
    std::snprintf(name, sizeof name, "slice_%03d.ppm", zi);
    write_ppm(out / name, render_overlay(pv, z, slice_ground_truths(weak, zi), by_slice[zi]));
  }
  std::cout << pv.depth << " images written to " << out.string() << "\n";
  return 0;
}

int benchmark_cmd(const fs::path &checkpoint, const fs::path &volume, int runs, float bias) {
  Loaded l = load_checkpoint(checkpoint);
  const PhaseVolume pv = load_volume(volume, bias);
  const auto r = benchmark(l.state.model, generate_priors(l.config.train.model), pv, runs, l.config.detect);
  std::cout << "runs";
  for (double s : r.seconds)
    std::cout << ' ' << s;
  std::cout << "\nslices_per_second " << r.slices_per_second << "\nseconds_per_volume " << r.seconds_per_volume
            << "\nidentical_outputs " << (r.identical_outputs ? "yes" : "no") << "\n";
  return 0;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Grouped SSD lesion detector on multi-phase phantoms"};
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (1 forces full determinism)")->check(CLI::PositiveNumber);

  std::optional<std::uint64_t> seed;
  fs::path spec, out, config, data, checkpoint, volume, detections;
  std::optional<fs::path> resume, labels;
  int count = 1, runs = 3;
  double conf = 0.3;
  float bias = 0;

  auto *gen = app.add_subcommand("phantom-gen", "Generate synthetic multi-phase volumes and labels");
  gen->add_option("--spec", spec, "Phantom spec (key=value)")->required();
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--count", count, "Number of volumes")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Seed (overrides GSSD_SEED and the spec)");

  auto *tr = app.add_subcommand("train", "Train on every slice of a data directory");
  tr->add_option("--config", config, "Run config (key=value)")->required();
  tr->add_option("--data", data, "Data directory from phantom-gen")->required();
  tr->add_option("--out", out, "Output directory")->required();
  tr->add_option("--seed", seed, "Seed (overrides GSSD_SEED and the config)");
  tr->add_option("--resume", resume, "Continue from a checkpoint of the same config");

  auto *cv = app.add_subcommand("cv", "k-fold cross-validation with periodic validation");
  cv->add_option("--config", config, "Run config (key=value)")->required();
  cv->add_option("--data", data, "Data directory from phantom-gen")->required();
  cv->add_option("--out", out, "Output directory")->required();
  cv->add_option("--seed", seed, "Seed (overrides GSSD_SEED and the config)");

  auto *det = app.add_subcommand("detect", "Detect lesions on every slice of a volume");
  det->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  det->add_option("--volume", volume, "GSSDVOL1 volume")->required();
  det->add_option("--out", out, "Detections CSV")->required();
  det->add_option("--conf", conf, "Confidence threshold")->capture_default_str();
  det->add_option("--vendor-bias", bias, "Known HU bias of the volume");

  auto *ov = app.add_subcommand("overlay", "Render per-slice PPM overlays");
  ov->add_option("--volume", volume, "GSSDVOL1 volume")->required();
  ov->add_option("--detections", detections, "Detections CSV")->required();
  ov->add_option("--labels", labels, "Label file with ground truth boxes");
  ov->add_option("--out", out, "Output directory")->required();
  ov->add_option("--vendor-bias", bias, "Known HU bias of the volume");

  auto *bench = app.add_subcommand("benchmark", "Time full-volume detection");
  bench->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  bench->add_option("--volume", volume, "GSSDVOL1 volume")->required();
  bench->add_option("--runs", runs, "Timed runs (>= 3)")->capture_default_str();
  bench->add_option("--vendor-bias", bias, "Known HU bias of the volume");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitInput;
  }
  Eigen::setNbThreads(threads);

  try {
    if (*gen)
      return phantom_gen(spec, out, count, seed);
    if (*tr)
      return train_cmd(config, data, out, seed, resume);
    if (*cv)
      return cv_cmd(config, data, out, seed);
    if (*det)
      return detect_cmd(checkpoint, volume, out, conf, bias);
    if (*ov)
      return overlay_cmd(volume, detections, labels, out, bias);
    if (*bench)
      return benchmark_cmd(checkpoint, volume, runs, bias);
  } catch (const std::invalid_argument &e) {  // ConfigError, FormatError
    std::cerr << "error: " << e.what() << "\n";
    return kExitInput;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitRuntime;
}
