// SPDX-License-Identifier: Apache-2.0
#include "gssd/train.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

namespace gssd {

namespace {

const std::string kIterRecord = "__iter__";
const std::string kVelocityPrefix = "__velocity__.";

std::string shortest(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(c)};
  return std::mt19937_64(seq);
}

} // namespace

std::vector<int> TrainConfig::drop_iters() const {
  if (!lr_drop_iters.empty())
    return lr_drop_iters;
  std::vector<int> out;
  for (long long ref : {5000LL, 8000LL}) {
    const int d = static_cast<int>(ref * iterations / 10000);
    if (out.empty() || d > out.back())
      out.push_back(d);
  }
  return out;
}

void TrainConfig::validate() const {
  if (iterations < 1)
    throw ConfigError("iterations must be positive");
  if (batch_size < 1)
    throw ConfigError("batch_size must be positive");
  if (!(lr0 > 0) || momentum < 0 || momentum >= 1 || weight_decay < 0)
    throw ConfigError("optimizer settings out of range (lr0 > 0, 0 <= momentum < 1, weight_decay >= 0)");
  const auto drops = drop_iters();
  for (std::size_t i = 0; i < drops.size(); ++i) {
    if (drops[i] >= iterations)
      throw ConfigError("lr drop at " + std::to_string(drops[i]) + " is not below iterations=" +
                        std::to_string(iterations));
    if (i > 0 && drops[i] <= drops[i - 1])
      throw ConfigError("lr drop iterations must be strictly increasing");
  }
  if (jitter_alpha < 0 || jitter_alpha >= 1)
    throw ConfigError("jitter alpha must lie in [0, 1)");
  if (val_interval < 0 || checkpoint_interval < 0)
    throw ConfigError("intervals must be non-negative");
  model.validate();
  loss.validate();
}

double lr_at(int iter, const TrainConfig &cfg) {
  if (iter < 0 || iter >= cfg.iterations)
    throw std::out_of_range("lr_at: iteration " + std::to_string(iter) + " outside [0," +
                            std::to_string(cfg.iterations) + ")");
  double lr = cfg.lr0;
  for (int d : cfg.drop_iters())
    if (d <= iter)
      lr *= cfg.lr_drop_factor;
  return lr;
}

void sgd_step(Tensor<float> &param, Eigen::ArrayXf &velocity, double lr, double momentum, double weight_decay,
              bool decay_exempt, const std::string &name) {
  if (velocity.size() != param.size())
    throw ConfigError("sgd_step: velocity for '" + name + "' has " + std::to_string(velocity.size()) +
                      " entries, parameter has " + std::to_string(param.size()));
  const auto m = static_cast<float>(momentum);
  const auto wd = decay_exempt ? 0.0f : static_cast<float>(weight_decay);
  if (param.has_grad()) {
    const auto &g = param.grad();
    if (!g.allFinite())
      throw std::runtime_error("sgd_step: non-finite gradient in '" + name + "'");
    velocity = m * velocity + g + wd * param.data();
  } else {
    velocity = m * velocity + wd * param.data();
  }
  param.data() -= static_cast<float>(lr) * velocity;
}

void Dataset::add(PhaseVolume volume, std::vector<WeakLabel> l) {
  const int v = static_cast<int>(volumes.size());
  for (Index z = 0; z < volume.depth; ++z)
    samples.push_back({v, static_cast<int>(z)});
  volumes.push_back(std::move(volume));
  labels.push_back(std::move(l));
}

std::vector<int> Dataset::sample_volumes() const {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto &s : samples)
    out.push_back(s.volume);
  return out;
}

Sample Dataset::sample(std::size_t index, InputMode mode) const {
  const Ref &r = samples.at(index);
  Sample s;
  s.input = stack_phases(volumes[static_cast<std::size_t>(r.volume)], r.z, mode);
  s.gts = ground_truths(r.volume, r.z);
  s.center_z = r.z;
  s.volume = r.volume;
  return s;
}

std::vector<GroundTruth> Dataset::ground_truths(int volume, int z) const {
  return slice_ground_truths(labels.at(static_cast<std::size_t>(volume)), z);
}

Dataset load_dataset(const std::filesystem::path &dir) {
  Dataset data;
  for (const auto &e : read_manifest(dir)) {
    PhaseVolume pv = read_volume(dir / e.volume);
    pv.vendor_bias = e.vendor_bias;
    data.add(std::move(pv), read_labels(dir / e.labels));
  }
  return data;
}

std::string format_loss_row(const LossRow &r) {
  return std::to_string(r.iter) + "," + shortest(r.lr) + "," + shortest(r.total) + "," + shortest(r.conf) + "," +
         shortest(r.loc);
}

TrainState initial_state(const TrainConfig &cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  TrainState s{build_model<float>(cfg.model, rng), {}, 0};
  for (const auto &p : s.model.parameters())
    s.velocity.push_back(Eigen::ArrayXf::Zero(p.tensor.size()));
  return s;
}

Checkpoint make_checkpoint(const TrainState &state, const std::string &config_echo) {
  Checkpoint c;
  store_model(state.model, c);
  const auto &params = state.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    c.records.push_back({kVelocityPrefix + params[i].name, Tensor<float>(params[i].tensor.shape(), state.velocity[i])});
  c.records.push_back({kIterRecord, Tensor<float>::filled({1}, static_cast<float>(state.next_iter))});
  c.config = config_echo;
  return c;
}

TrainState restore_state(const TrainConfig &cfg, const Checkpoint &ckpt) {
  TrainState s = initial_state(cfg);
  load_model(ckpt, s.model);
  const auto &params = s.model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    // a weights-only checkpoint restarts the optimizer from rest
    if (const auto *v = ckpt.find(kVelocityPrefix + params[i].name)) {
      if (v->size() != params[i].tensor.size())
        throw FormatError("velocity for '" + params[i].name + "' has the wrong size");
      s.velocity[i] = v->data();
    }
  }
  if (const auto *it = ckpt.find(kIterRecord))
    s.next_iter = static_cast<int>((*it)[0]);
  return s;
}

std::vector<LossRow> train(const TrainConfig &cfg, const Dataset &data, const std::vector<std::size_t> &indices,
                           TrainState &state, const TrainHooks &hooks) {
  cfg.validate();
  if (indices.empty())
    throw ConfigError("train: empty training set");
  const ModelConfig &mc = state.model.config();
  for (std::size_t i : indices) {
    const auto &pv = data.volumes.at(static_cast<std::size_t>(data.samples.at(i).volume));
    if (pv.phases != mc.phases || pv.height != mc.input_size || pv.width != mc.input_size)
      throw ConfigError("train: volume " + std::to_string(data.samples[i].volume) + " is " +
                        std::to_string(pv.phases) + " phases of " + std::to_string(pv.height) + "x" +
                        std::to_string(pv.width) + ", model expects " + std::to_string(mc.phases) + " phases of " +
                        std::to_string(mc.input_size) + "x" + std::to_string(mc.input_size));
  }

  const PriorSet priors = generate_priors(mc);
  const Index s = mc.input_size, c = mc.input_channels(), plane = c * s * s;

  std::ofstream log;
  if (hooks.out_dir) {
    std::filesystem::create_directories(*hooks.out_dir);
    const auto path = *hooks.out_dir / "loss.csv";
    const bool append = state.next_iter > 0 && std::filesystem::exists(path);
    log.open(path, append ? std::ios::app : std::ios::trunc);
    if (!log)
      throw IoError("cannot open " + path.string() + " for writing");
    if (!append)
      log << kLossHeader << '\n';
  }
  auto save = [&](const std::string &file) {
    if (hooks.out_dir)
      write_checkpoint(*hooks.out_dir / file, make_checkpoint(state, hooks.config_echo));
  };

  std::vector<LossRow> rows;
  int completed_here = 0;
  while (state.next_iter < cfg.iterations) {
    if (hooks.stop_after && completed_here >= *hooks.stop_after)
      break;
    const int iter = state.next_iter;
    auto rng = stream(cfg.seed, static_cast<std::uint64_t>(iter), 1);
    std::uniform_int_distribution<std::size_t> pick(0, indices.size() - 1);

    auto batch = Tensor<float>::uninitialized({cfg.batch_size, c, s, s});
    std::vector<MatchResult> matches;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t idx = indices[pick(rng)];
      auto srng = stream(cfg.seed, static_cast<std::uint64_t>(iter), static_cast<std::uint64_t>(b) + 1, 2);
      Sample sample = augment(data.sample(idx, cfg.input_mode), srng, cfg.augment);
      const auto gts = jitter_boxes(sample.gts, cfg.jitter_alpha, srng);
      std::copy_n(sample.input.ptr(), plane, batch.ptr() + b * plane);
      matches.push_back(match(priors, gts, cfg.match_threshold));
    }

    std::vector<Tensor<float>> saved_buffers;
    for (const auto &buf : state.model.buffers())
      saved_buffers.push_back(buf.tensor);
    auto rollback = [&] {
      for (std::size_t i = 0; i < saved_buffers.size(); ++i)
        state.model.buffers()[i].tensor = saved_buffers[i];
    };

    Graph<float> graph;
    auto fwd = state.model.forward(graph, batch, true);
    LossTerms<float> terms;
    try {
      terms = multibox_loss(fwd.loc, fwd.conf, matches, cfg.loss);
    } catch (const std::runtime_error &e) {
      rollback();
      save("last_good.gssdckpt");
      throw std::runtime_error("iteration " + std::to_string(iter) + ": " + e.what());
    }
    const double total = static_cast<double>(terms.total.value()[0]);
    if (!std::isfinite(total)) {
      rollback();
      save("last_good.gssdckpt");
      throw std::runtime_error("iteration " + std::to_string(iter) + ": non-finite loss; last good state kept");
    }
    graph.backward(terms.total);

    auto &params = state.model.parameters();
    for (const auto &p : params)
      if (p.tensor.has_grad() && !p.tensor.grad().allFinite()) {
        rollback();
        for (auto &q : params)
          q.tensor.zero_grad();
        save("last_good.gssdckpt");
        throw std::runtime_error("iteration " + std::to_string(iter) + ": non-finite gradient in '" + p.name + "'");
      }
    const double lr = lr_at(iter, cfg);
    for (std::size_t i = 0; i < params.size(); ++i) {
      sgd_step(params[i].tensor, state.velocity[i], lr, cfg.momentum, cfg.weight_decay,
               is_decay_exempt(params[i].name), params[i].name);
      params[i].tensor.zero_grad();
    }

    LossRow row{iter, lr, total, terms.conf, terms.loc};
    rows.push_back(row);
    if (log)
      log << format_loss_row(row) << '\n';
    if (hooks.on_row)
      hooks.on_row(row);

    state.next_iter = iter + 1;
    ++completed_here;
    const int done = state.next_iter;
    if (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.iterations)
      save("checkpoint_" + std::to_string(done) + ".gssdckpt");
    if (hooks.validate && ((cfg.val_interval > 0 && done % cfg.val_interval == 0) || done == cfg.iterations))
      hooks.validate(done, state.model);
  }
  if (state.next_iter == cfg.iterations)
    save("final.gssdckpt");
  if (log)
    log.flush();
  return rows;
}

} // namespace gssd
