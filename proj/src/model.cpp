// SPDX-License-Identifier: Apache-2.0
#include "gssd/model.hpp"

namespace gssd {

template <typename Scalar> Model<Scalar>::Model(const ModelConfig &config, std::mt19937_64 &rng) : config_(config) {
  config_.validate();
  const Index groups = config_.groups();
  auto conv = [&](const std::string &name, Index in, Index ref_out, Index kernel, Index stride,
                  Index padding) {
    const Index out = config_.channels(ref_out);
    add_conv({name, in, out, kernel, {stride, padding, groups}, true, true});
    return out;
  };

  Index c = config_.input_channels();
  c = conv("conv1_1", c, 64, 3, 1, 1);
  c = conv("conv1_2", c, 64, 3, 1, 1);
  add_pool({2, 2, 0, false});
  c = conv("conv2_1", c, 128, 3, 1, 1);
  c = conv("conv2_2", c, 128, 3, 1, 1);
  add_pool({2, 2, 0, false});
  c = conv("conv3_1", c, 256, 3, 1, 1);
  c = conv("conv3_2", c, 256, 3, 1, 1);
  c = conv("conv3_3", c, 256, 3, 1, 1);
  add_pool({2, 2, 0, true});
  c = conv("conv4_1", c, 512, 3, 1, 1);
  c = conv("conv4_2", c, 512, 3, 1, 1);
  c = conv("conv4_3", c, 512, 3, 1, 1);
  add_tap();
  add_pool({2, 2, 0, false});
  c = conv("conv5_1", c, 512, 3, 1, 1);
  c = conv("conv5_2", c, 512, 3, 1, 1);
  c = conv("conv5_3", c, 512, 3, 1, 1);
  add_pool({3, 1, 1, false});
  c = conv("conv6", c, 1024, 3, 1, 1);
  c = conv("conv7", c, 1024, 1, 1, 0);
  add_tap();

  const auto taps = config_.tap_sizes();
  const Index extra_refs[4][2] = {{256, 512}, {128, 256}, {128, 256}, {128, 256}};
  for (int e = 0; e < 4; ++e) {
    const std::string stem = "conv" + std::to_string(8 + e);
    c = conv(stem + "_1", c, extra_refs[e][0], 1, 1, 0);
    const ExtraGeometry g = extra_geometry(taps[static_cast<std::size_t>(e) + 1]);
    c = conv(stem + "_2", c, extra_refs[e][1], 3, g.stride, g.padding);
    add_tap();
  }

  // fusion and heads, one set per tap
  std::size_t tap = 0;
  for (const auto &step : plan_) {
    if (step.kind != LayerStep::Tap)
      continue;
    HeadSpec head;
    head.boxes = config_.boxes_per_cell[tap];
    for (int i = 0; i < config_.n_fusion_convs; ++i)
      head.fusion.push_back("fusion." + std::to_string(tap) + "." + std::to_string(i));
    head.loc = "head." + std::to_string(tap) + ".loc";
    head.conf = "head." + std::to_string(tap) + ".conf";
    heads_.push_back(head);
    ++tap;
  }
  init_parameters(rng);
}

template <typename Scalar> void Model<Scalar>::add_conv(ConvLayerSpec layer) {
  plan_.push_back({LayerStep::Conv, convs_.size()});
  convs_.push_back(std::move(layer));
}

template <typename Scalar> void Model<Scalar>::add_pool(Pool2dOptions opts) {
  plan_.push_back({LayerStep::Pool, pools_.size()});
  pools_.push_back(opts);
}

template <typename Scalar> void Model<Scalar>::add_tap() { plan_.push_back({LayerStep::Tap, 0}); }

template <typename Scalar> void Model<Scalar>::init_parameters(std::mt19937_64 &rng) {
  auto add_param = [&](std::string name, Tensor<Scalar> t) {
    params_.push_back({std::move(name), std::move(t)});
  };
  std::vector<Index> tap_channels;
  Index last_out = 0;
  for (const auto &step : plan_) {
    if (step.kind == LayerStep::Tap)
      tap_channels.push_back(last_out);
    if (step.kind != LayerStep::Conv)
      continue;
    const auto &l = convs_[step.index];
    last_out = l.out;
    const std::string base = "base." + l.name;
    add_param(base + ".weight",
              xavier_uniform<Scalar>({l.out, l.in / l.opts.groups, l.kernel, l.kernel}, rng));
    if (l.batch_norm) {
      add_param(base + ".bn.gamma", Tensor<Scalar>::filled({l.out}, Scalar(1)));
      add_param(base + ".bn.beta", Tensor<Scalar>({l.out}));
      buffers_.push_back({base + ".bn.running_mean", Tensor<Scalar>({l.out})});
      buffers_.push_back({base + ".bn.running_var", Tensor<Scalar>::filled({l.out}, Scalar(1))});
    } else {
      add_param(base + ".bias", Tensor<Scalar>({l.out}));
    }
  }
  const Index k = config_.n_classes;
  for (std::size_t t = 0; t < heads_.size(); ++t) {
    const Index ch = tap_channels[t];
    for (const auto &name : heads_[t].fusion) {
      add_param(name + ".weight", xavier_uniform<Scalar>({ch, ch, 1, 1}, rng));
      add_param(name + ".bias", Tensor<Scalar>({ch}));
    }
    const Index a = heads_[t].boxes;
    add_param(heads_[t].loc + ".weight", xavier_uniform<Scalar>({a * 4, ch, 3, 3}, rng));
    add_param(heads_[t].loc + ".bias", Tensor<Scalar>({a * 4}));
    add_param(heads_[t].conf + ".weight", xavier_uniform<Scalar>({a * k, ch, 3, 3}, rng));
    add_param(heads_[t].conf + ".bias", Tensor<Scalar>({a * k}));
  }
  index_params();
}

template <typename Scalar> void Model<Scalar>::index_params() {
  param_index_.clear();
  buffer_index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (!param_index_.emplace(params_[i].name, i).second)
      throw ConfigError("duplicate parameter name " + params_[i].name);
  for (std::size_t i = 0; i < buffers_.size(); ++i)
    buffer_index_.emplace(buffers_[i].name, i);
}

template <typename Scalar> Tensor<Scalar> &Model<Scalar>::parameter(const std::string &name) {
  auto it = param_index_.find(name);
  if (it == param_index_.end())
    throw ConfigError("unknown parameter " + name);
  return params_[it->second].tensor;
}

template <typename Scalar> const Tensor<Scalar> &Model<Scalar>::parameter(const std::string &name) const {
  auto it = param_index_.find(name);
  if (it == param_index_.end())
    throw ConfigError("unknown parameter " + name);
  return params_[it->second].tensor;
}

template <typename Scalar> Index Model<Scalar>::parameter_count() const {
  Index n = 0;
  for (const auto &p : params_)
    n += p.tensor.size();
  return n;
}

template <typename Scalar> Var<Scalar> Model<Scalar>::param(Graph<Scalar> &graph, const std::string &name) {
  return graph.parameter(parameter(name));
}

template <typename Scalar>
ForwardResult<Scalar> Model<Scalar>::forward(Graph<Scalar> &graph, const Tensor<Scalar> &batch,
                                             bool training) {
  return forward(graph, graph.constant(batch), training);
}

template <typename Scalar>
ForwardResult<Scalar> Model<Scalar>::forward(Graph<Scalar> &graph, const Var<Scalar> &input, bool training) {
  const Shape shape = input.value().shape();  // node storage may move as the graph grows
  const Index s = config_.input_size;
  if (shape.size() != 4 || shape[1] != config_.input_channels() || shape[2] != s || shape[3] != s)
    throw ConfigError("forward: expected batch [N," + std::to_string(config_.input_channels()) + "," +
                      std::to_string(s) + "," + std::to_string(s) + "], got " +
                      shape_string(shape));
  ForwardResult<Scalar> r;
  Var<Scalar> x = input;
  for (const auto &step : plan_) {
    switch (step.kind) {
    case LayerStep::Conv: {
      const auto &l = convs_[step.index];
      const std::string base = "base." + l.name;
      std::optional<Var<Scalar>> bias;
      if (!l.batch_norm)
        bias = param(graph, base + ".bias");
      x = conv2d(x, param(graph, base + ".weight"), bias, l.opts);
      if (l.batch_norm) {
        auto &mean = buffers_[buffer_index_.at(base + ".bn.running_mean")].tensor;
        auto &var = buffers_[buffer_index_.at(base + ".bn.running_var")].tensor;
        x = batch_norm(x, param(graph, base + ".bn.gamma"), param(graph, base + ".bn.beta"),
                       BatchNormState<Scalar>{mean, var}, training);
      }
      if (l.relu)
        x = relu(x);
      r.backbone.push_back(x);
      break;
    }
    case LayerStep::Pool:
      x = max_pool2d(x, pools_[step.index]);
      break;
    case LayerStep::Tap:
      r.taps.push_back(x);
      break;
    }
  }

  const Index n = shape[0];
  const auto k = static_cast<Index>(config_.n_classes);
  std::vector<Var<Scalar>> locs, confs;
  for (std::size_t t = 0; t < heads_.size(); ++t) {
    const auto &head = heads_[t];
    Var<Scalar> h = r.taps[t];
    for (std::size_t i = 0; i < head.fusion.size(); ++i) {
      h = conv2d(h, param(graph, head.fusion[i] + ".weight"),
                 std::optional<Var<Scalar>>(param(graph, head.fusion[i] + ".bias")), {1, 0, 1});
      if (i + 1 < head.fusion.size())
        h = relu(h);
    }
    const Index cells = h.shape()[2] * h.shape()[3];
    Var<Scalar> loc = conv2d(h, param(graph, head.loc + ".weight"),
                             std::optional<Var<Scalar>>(param(graph, head.loc + ".bias")), {1, 1, 1});
    Var<Scalar> conf = conv2d(h, param(graph, head.conf + ".weight"),
                              std::optional<Var<Scalar>>(param(graph, head.conf + ".bias")), {1, 1, 1});
    locs.push_back(reshape(to_channels_last(loc), {n, cells * head.boxes, 4}));
    confs.push_back(reshape(to_channels_last(conf), {n, cells * head.boxes, k}));
  }
  r.loc = concat<Scalar>(locs, 1);
  r.conf = concat<Scalar>(confs, 1);
  return r;
}

template <typename Scalar> std::uint64_t parameter_checksum(const Model<Scalar> &model) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](const void *data, std::size_t len) {
    const auto *p = static_cast<const unsigned char *>(data);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= p[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto &p : model.parameters()) {
    mix(p.name.data(), p.name.size());
    mix(p.tensor.ptr(), static_cast<std::size_t>(p.tensor.size()) * sizeof(Scalar));
  }
  return h;
}

bool is_decay_exempt(const std::string &name) {
  auto ends_with = [&](const std::string &suffix) {
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return ends_with(".bias") || ends_with(".gamma") || ends_with(".beta");
}

template class Model<float>;
template class Model<double>;
template std::uint64_t parameter_checksum<float>(const Model<float> &);
template std::uint64_t parameter_checksum<double>(const Model<double> &);

} // namespace gssd
