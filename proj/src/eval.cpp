// SPDX-License-Identifier: Apache-2.0
#include "gssd/eval.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

namespace gssd {

namespace {

std::string shortest(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

void check_input(const ModelConfig &mc, Index channels, Index height, Index width) {
  if (channels != mc.input_channels() || height != mc.input_size || width != mc.input_size)
    throw ConfigError("detect: input [" + std::to_string(channels) + "," + std::to_string(height) + "," +
                      std::to_string(width) + "] does not match model [" + std::to_string(mc.input_channels()) +
                      "," + std::to_string(mc.input_size) + "," + std::to_string(mc.input_size) + "]");
}

// Decode, threshold and NMS the head outputs of batch entry b.
void postprocess(const Tensor<float> &loc, const Tensor<float> &conf, Index b, const PriorSet &priors, int slice,
                 const DetectConfig &cfg, std::vector<Detection> &out) {
  const Index p = loc.dim(1), k = conf.dim(2);
  const float *lp = loc.ptr() + b * p * 4;
  const float *cp = conf.ptr() + b * p * k;
  Eigen::ArrayXXd prob(k, p);
  for (Index i = 0; i < p; ++i) {
    const float *row = cp + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0;
    for (Index c = 0; c < k; ++c)
      z += prob(c, i) = std::exp(static_cast<double>(row[c]) - mx);
    prob.col(i) /= z;
  }
  std::vector<BoundingBox> decoded(static_cast<std::size_t>(p));
  std::vector<bool> done(static_cast<std::size_t>(p), false);
  for (Index c = 1; c < k; ++c) {
    std::vector<ScoredBox> cands;
    std::vector<Index> prior_of;
    for (Index i = 0; i < p; ++i) {
      if (!(prob(c, i) > cfg.conf_threshold))
        continue;
      const auto ui = static_cast<std::size_t>(i);
      if (!done[ui]) {
        const Offsets o{lp[i * 4], lp[i * 4 + 1], lp[i * 4 + 2], lp[i * 4 + 3]};
        decoded[ui] = decode(o, priors.boxes[ui], priors.variances).clamped();
        done[ui] = true;
      }
      cands.push_back({decoded[ui], prob(c, i)});
      prior_of.push_back(i);
    }
    for (std::size_t j : nms(cands, cfg.nms_threshold, static_cast<std::size_t>(cfg.top_k)))
      out.push_back({slice, cands[j].box, static_cast<int>(c), static_cast<float>(cands[j].score)});
  }
}

} // namespace

std::vector<Detection> detect_slice(Model<float> &model, const PriorSet &priors, const Tensor<float> &input,
                                    int slice, const DetectConfig &cfg) {
  if (input.rank() != 3)
    throw ConfigError("detect_slice: input must be [C,S,S], got " + shape_string(input.shape()));
  check_input(model.config(), input.dim(0), input.dim(1), input.dim(2));
  Graph<float> graph;
  auto fwd = model.forward(graph, input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}), false);
  std::vector<Detection> out;
  postprocess(fwd.loc.value(), fwd.conf.value(), 0, priors, slice, cfg, out);
  return out;
}

std::vector<Detection> detect(Model<float> &model, const PriorSet &priors, const PhaseVolume &pv,
                              const DetectConfig &cfg) {
  const ModelConfig &mc = model.config();
  if (pv.phases != mc.phases)
    throw ConfigError("detect: volume has " + std::to_string(pv.phases) + " phases, model expects " +
                      std::to_string(mc.phases));
  check_input(mc, mc.input_channels(), pv.height, pv.width);
  if (priors.size() != mc.num_priors())
    throw ConfigError("detect: prior set does not belong to this model");
  const Index chunk = std::max(1, cfg.batch_slices);
  const Index plane = mc.input_channels() * pv.height * pv.width;
  std::vector<Detection> out;
  for (Index z0 = 0; z0 < pv.depth; z0 += chunk) {
    const Index n = std::min(chunk, pv.depth - z0);
    auto batch = Tensor<float>::uninitialized({n, mc.input_channels(), pv.height, pv.width});
    for (Index i = 0; i < n; ++i) {
      const auto x = stack_phases(pv, z0 + i, cfg.input_mode);
      std::copy_n(x.ptr(), plane, batch.ptr() + i * plane);
    }
    Graph<float> graph;
    auto fwd = model.forward(graph, batch, false);
    for (Index i = 0; i < n; ++i)
      postprocess(fwd.loc.value(), fwd.conf.value(), i, priors, static_cast<int>(z0 + i), cfg, out);
  }
  return out;
}

ApResult average_precision(const std::vector<Detection> &dets, const SliceTruth &gts, double iou_threshold) {
  ApResult r;
  for (const auto &[z, list] : gts)
    r.num_gt += static_cast<int>(list.size());
  if (r.num_gt == 0 && dets.empty())
    throw std::domain_error("average_precision: no ground truths and no detections");

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].confidence != dets[b].confidence)
      return dets[a].confidence > dets[b].confidence;
    return dets[a].slice < dets[b].slice;
  });

  std::map<int, std::vector<bool>> used;
  for (const auto &[z, list] : gts)
    used[z].assign(list.size(), false);

  int tp = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    const Detection &d = dets[order[rank]];
    auto it = gts.find(d.slice);
    int best = -1;
    double best_iou = -1;
    if (it != gts.end()) {
      auto &taken = used[d.slice];
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        if (taken[g] || it->second[g].label != d.label)
          continue;
        const double o = iou(d.box, it->second[g].box);
        if (o >= iou_threshold && o > best_iou) {
          best_iou = o;
          best = static_cast<int>(g);
        }
      }
      if (best >= 0) {
        taken[static_cast<std::size_t>(best)] = true;
        ++tp;
      }
    }
    const double recall = r.num_gt > 0 ? static_cast<double>(tp) / r.num_gt : 0.0;
    r.curve.push_back({recall, static_cast<double>(tp) / static_cast<double>(rank + 1)});
  }
  r.true_positives = tp;
  if (r.num_gt == 0)
    return r;

  // area under the monotone precision envelope
  double envelope = 0, prev_recall = 0;
  std::vector<double> env(r.curve.size());
  for (std::size_t i = r.curve.size(); i-- > 0;) {
    envelope = std::max(envelope, r.curve[i].precision);
    env[i] = envelope;
  }
  for (std::size_t i = 0; i < r.curve.size(); ++i) {
    r.ap += (r.curve[i].recall - prev_recall) * env[i];
    prev_recall = r.curve[i].recall;
  }
  return r;
}

EvalSet evaluate_volumes(Model<float> &model, const Dataset &data, const std::vector<int> &volumes,
                         const DetectConfig &cfg) {
  const PriorSet priors = generate_priors(model.config());
  EvalSet out;
  for (int v : volumes) {
    const auto &pv = data.volumes.at(static_cast<std::size_t>(v));
    for (auto d : detect(model, priors, pv, cfg)) {
      const int z = d.slice;
      d.slice = v * 100000 + z;
      out.detections.push_back(d);
    }
    for (Index z = 0; z < pv.depth; ++z) {
      auto gts = data.ground_truths(v, static_cast<int>(z));
      if (!gts.empty())
        out.truth[v * 100000 + static_cast<int>(z)] = std::move(gts);
    }
  }
  return out;
}

CvReport cross_validate(const TrainConfig &cfg, const Dataset &data, const CvOptions &opts) {
  const auto sample_volume = data.sample_volumes();
  const auto folds = split_folds(sample_volume, opts.folds, cfg.seed);
  DetectConfig dcfg = opts.detect;
  dcfg.input_mode = cfg.input_mode;

  CvReport report;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    FoldResult fr;
    fr.fold = static_cast<int>(f);
    try {
      TrainState state = initial_state(cfg);
      TrainHooks hooks;
      hooks.config_echo = opts.config_echo;
      if (opts.out_dir)
        hooks.out_dir = *opts.out_dir / ("fold_" + std::to_string(f));
      bool have_best = false;
      hooks.validate = [&](int done, Model<float> &model) {
        const EvalSet es = evaluate_volumes(model, data, folds[f].val_volumes, dcfg);
        ApResult ap;
        if (!es.truth.empty() || !es.detections.empty())
          ap = average_precision(es.detections, es.truth, opts.iou_threshold);
        fr.ap_history.push_back({done, ap.ap});
        if (!have_best || ap.ap > fr.best_ap) {
          have_best = true;
          fr.best_ap = ap.ap;
          fr.best_iter = done;
          fr.best_curve = ap.curve;
        }
      };
      fr.losses = train(cfg, data, folds[f].train, state, hooks);
      if (opts.out_dir) {
        const auto dir = *opts.out_dir / ("fold_" + std::to_string(f));
        std::ofstream ap_log(dir / "ap.csv");
        ap_log << "iter,ap\n";
        for (const auto &[it, ap] : fr.ap_history)
          ap_log << it << ',' << shortest(ap) << '\n';
        write_pr_curve(dir / "pr.csv", fr.best_curve);
      }
    } catch (const std::exception &e) {
      fr.error = e.what();
    }
    report.folds.push_back(std::move(fr));
  }
  int ok = 0;
  for (const auto &fr : report.folds)
    if (fr.error.empty()) {
      report.mean_ap += fr.best_ap;
      ++ok;
    }
  if (ok > 0)
    report.mean_ap /= ok;
  if (opts.out_dir)
    write_cv_report(*opts.out_dir / "report.csv", report);
  return report;
}

void write_pr_curve(const std::filesystem::path &path, const std::vector<PrPoint> &curve) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << "recall,precision\n";
  for (const auto &p : curve)
    out << shortest(p.recall) << ',' << shortest(p.precision) << '\n';
}

void write_cv_report(const std::filesystem::path &path, const CvReport &report) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << "fold,best_ap,best_iter\n";
  for (const auto &f : report.folds)
    if (f.error.empty())
      out << f.fold << ',' << shortest(f.best_ap) << ',' << f.best_iter << '\n';
    else
      out << f.fold << ",nan,-1\n";
  out << "mean," << shortest(report.mean_ap) << ",\n";
}

void write_detections(const std::filesystem::path &path, const std::vector<Detection> &dets) {
  std::ofstream out(path);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << "slice,x_min,y_min,x_max,y_max,class,confidence\n";
  for (const auto &d : dets)
    out << d.slice << ',' << shortest(d.box.x_min) << ',' << shortest(d.box.y_min) << ',' << shortest(d.box.x_max)
        << ',' << shortest(d.box.y_max) << ',' << d.label << ',' << shortest(d.confidence) << '\n';
  if (!out)
    throw IoError("write to " + path.string() + " failed");
}

std::vector<Detection> read_detections(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in)
    throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "slice,x_min,y_min,x_max,y_max,class,confidence")
    throw FormatError(path.string() + ": missing detections header");
  std::vector<Detection> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty())
      continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream row(line);
    Detection d;
    if (!(row >> d.slice >> d.box.x_min >> d.box.y_min >> d.box.x_max >> d.box.y_max >> d.label >> d.confidence))
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed detection row");
    out.push_back(d);
  }
  return out;
}

BenchmarkResult benchmark(Model<float> &model, const PriorSet &priors, const PhaseVolume &pv, int runs,
                          const DetectConfig &cfg) {
  if (runs < 3)
    throw ConfigError("benchmark needs at least 3 runs");
  BenchmarkResult r;
  const auto reference = detect(model, priors, pv, cfg);  // warm-up
  auto same = [](const std::vector<Detection> &a, const std::vector<Detection> &b) {
    if (a.size() != b.size())
      return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (a[i].slice != b[i].slice || !(a[i].box == b[i].box) || a[i].label != b[i].label ||
          a[i].confidence != b[i].confidence)
        return false;
    return true;
  };
  for (int i = 0; i < runs; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dets = detect(model, priors, pv, cfg);
    const auto t1 = std::chrono::steady_clock::now();
    r.seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    r.identical_outputs = r.identical_outputs && same(dets, reference);
  }
  auto sorted = r.seconds;
  std::sort(sorted.begin(), sorted.end());
  r.median_seconds = sorted[sorted.size() / 2];
  if (sorted.size() % 2 == 0)
    r.median_seconds = (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]) / 2;
  r.seconds_per_volume = r.median_seconds;
  r.slices_per_second = static_cast<double>(pv.depth) / r.median_seconds;
  return r;
}

} // namespace gssd
