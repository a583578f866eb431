// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/model_config.hpp"
#include "gssd/ops.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace gssd {

template <typename Scalar> struct NamedTensor {
  std::string name;
  Tensor<Scalar> tensor;
};

template <typename Scalar> struct ForwardResult {
  Var<Scalar> loc;   // [N, P, 4] encoded offsets
  Var<Scalar> conf;  // [N, P, K] logits
  std::vector<Var<Scalar>> taps;      // six pre-fusion feature maps
  std::vector<Var<Scalar>> backbone;  // every backbone conv output (post relu)
};

struct ConvLayerSpec {
  std::string name;
  Index in = 0, out = 0, kernel = 3;
  Conv2dOptions opts;
  bool batch_norm = false;
  bool relu = true;
};

struct HeadSpec {
  std::vector<std::string> fusion;
  std::string loc, conf;
  Index boxes = 0;
};

struct LayerStep {
  enum Kind { Conv, Pool, Tap } kind;
  std::size_t index = 0;  // into the conv or pool list
};

/// Grouped SSD: VGG-style backbone (grouped per phase when config.grouped),
/// optional 1x1 fusion convs per tap, 3x3 loc/conf heads.
template <typename Scalar> class Model {
public:
  Model(const ModelConfig &config, std::mt19937_64 &rng);

  const ModelConfig &config() const { return config_; }

  std::vector<NamedTensor<Scalar>> &parameters() { return params_; }
  const std::vector<NamedTensor<Scalar>> &parameters() const { return params_; }
  /// Batch-norm running statistics, named "<layer>.bn.running_mean|var".
  std::vector<NamedTensor<Scalar>> &buffers() { return buffers_; }
  const std::vector<NamedTensor<Scalar>> &buffers() const { return buffers_; }

  Tensor<Scalar> &parameter(const std::string &name);
  const Tensor<Scalar> &parameter(const std::string &name) const;

  Index parameter_count() const;

  ForwardResult<Scalar> forward(Graph<Scalar> &graph, const Tensor<Scalar> &batch, bool training);
  /// Same, with the input already on the graph (e.g. to differentiate w.r.t. it).
  ForwardResult<Scalar> forward(Graph<Scalar> &graph, const Var<Scalar> &input, bool training);

  template <typename Other> Model<Other> cast() const {
    Model<Other> out(config_, typename Model<Other>::Uninitialized{});
    out.plan_ = plan_;
    out.convs_ = convs_;
    out.pools_ = pools_;
    out.heads_ = heads_;
    for (const auto &p : params_)
      out.params_.push_back({p.name, p.tensor.template cast<Other>()});
    for (const auto &b : buffers_)
      out.buffers_.push_back({b.name, b.tensor.template cast<Other>()});
    out.index_params();
    return out;
  }

  /// Backbone layer plan, exposed for tests and tooling.
  const std::vector<ConvLayerSpec> &conv_layers() const { return convs_; }

private:
  template <typename> friend class Model;
  struct Uninitialized {};

  Model(const ModelConfig &config, Uninitialized) : config_(config) {}
  void add_conv(ConvLayerSpec layer);
  void add_pool(Pool2dOptions opts);
  void add_tap();
  void init_parameters(std::mt19937_64 &rng);
  void index_params();
  Var<Scalar> param(Graph<Scalar> &graph, const std::string &name);

  ModelConfig config_;
  std::vector<LayerStep> plan_;
  std::vector<ConvLayerSpec> convs_;
  std::vector<Pool2dOptions> pools_;
  std::vector<HeadSpec> heads_;
  std::vector<NamedTensor<Scalar>> params_;
  std::vector<NamedTensor<Scalar>> buffers_;
  std::map<std::string, std::size_t> param_index_;
  std::map<std::string, std::size_t> buffer_index_;
};

/// Builds and Xavier-initializes a model; validates the config first.
template <typename Scalar> Model<Scalar> build_model(const ModelConfig &config, std::mt19937_64 &rng) {
  return Model<Scalar>(config, rng);
}

/// FNV-1a checksum over parameter names and raw bytes.
template <typename Scalar> std::uint64_t parameter_checksum(const Model<Scalar> &model);

/// Names excluded from weight decay: biases and batch-norm affine terms.
bool is_decay_exempt(const std::string &parameter_name);

extern template class Model<float>;
extern template class Model<double>;

} // namespace gssd
