// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace gssd {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

/// Raised for invalid shapes, group counts and model/config combinations.
class ConfigError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

Index numel(const Shape &shape);
std::string shape_string(const Shape &shape);

/// Dense row-major tensor. Scalar is float for training and inference and
/// double for finite-difference gradient checks.
template <typename Scalar> class Tensor {
public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(Array::Zero(numel(shape_))) {}
  Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  /// Storage left uninitialized; the caller writes every element.
  static Tensor uninitialized(Shape shape) {
    Tensor t;
    t.data_.resize(numel(shape));
    t.shape_ = std::move(shape);
    return t;
  }

  static Tensor filled(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }

  const Shape &shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
  Index size() const { return data_.size(); }

  Array &data() { return data_; }
  const Array &data() const { return data_; }
  Scalar *ptr() { return data_.data(); }
  const Scalar *ptr() const { return data_.data(); }

  Scalar &operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  // NCHW element access.
  Scalar &at(Index n, Index c, Index h, Index w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  Scalar at(Index n, Index c, Index h, Index w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool has_grad() const { return grad_.has_value(); }
  /// Gradient buffer, zero-allocated on first access.
  Array &grad() {
    if (!grad_)
      grad_ = Array::Zero(data_.size());
    return *grad_;
  }
  const Array &grad() const {
    if (!grad_)
      throw std::logic_error("tensor has no gradient");
    return *grad_;
  }
  void zero_grad() { grad_.reset(); }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other> Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

private:
  Shape shape_;
  Array data_;
  std::optional<Array> grad_;
};

template <typename Scalar> class Graph;

/// Handle to a node recorded on a Graph.
template <typename Scalar> class Var {
public:
  Var() = default;
  Var(Graph<Scalar> *graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph<Scalar> &graph() const { return *graph_; }
  std::size_t id() const { return id_; }
  bool valid() const { return graph_ != nullptr; }
  const Tensor<Scalar> &value() const { return graph_->value(id_); }
  const Shape &shape() const { return value().shape(); }

private:
  Graph<Scalar> *graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order; backward() walks it in reverse exactly once.
template <typename Scalar> class Graph {
public:
  using Array = typename Tensor<Scalar>::Array;
  using BackwardFn = std::function<void(Graph &, std::size_t)>;

  Graph() = default;
  Graph(const Graph &) = delete;
  Graph &operator=(const Graph &) = delete;

  Var<Scalar> constant(Tensor<Scalar> value);
  /// Leaf bound to a parameter; backward() accumulates into param.grad().
  Var<Scalar> parameter(Tensor<Scalar> &param);
  Var<Scalar> record(Tensor<Scalar> value, std::vector<std::size_t> inputs, BackwardFn fn);

  const Tensor<Scalar> &value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  Array &grad(std::size_t id);

  void backward(const Var<Scalar> &loss);

  std::size_t size() const { return nodes_.size(); }

  /// Data-dependent discrete choices (relu masks, pooling argmax, mined
  /// negatives) are ignored by default. In Record mode each choice site
  /// appends its choice to decisions(); in Replay mode sites take the choice
  /// recorded at the same position instead of their own, which pins the
  /// evaluation to one smooth piece of the loss surface.
  enum class DecisionMode { Off, Record, Replay };
  void record_decisions();
  void replay_decisions(std::vector<std::vector<Index>> log);
  bool tracks_decisions() const { return mode_ != DecisionMode::Off; }
  /// Returns `natural` (Record) or the recorded choice for this site (Replay).
  std::vector<Index> decide(std::vector<Index> natural);
  const std::vector<std::vector<Index>> &decisions() const { return decisions_; }
  /// Replayed sites whose own choice differed from the recorded one.
  int overridden_decisions() const { return overridden_; }

private:
  struct Node {
    Tensor<Scalar> value;
    Array grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    Tensor<Scalar> *param = nullptr;
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
  DecisionMode mode_ = DecisionMode::Off;
  std::vector<std::vector<Index>> decisions_;
  std::size_t cursor_ = 0;
  int overridden_ = 0;
};

/// Uniform Xavier/Glorot sample on +-sqrt(6 / (fan_in + fan_out)). For conv
/// kernels [F, C, kh, kw] the receptive field kh*kw scales both fans.
template <typename Scalar> Tensor<Scalar> xavier_uniform(const Shape &shape, std::mt19937_64 &rng);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

} // namespace gssd
