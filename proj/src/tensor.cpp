// SPDX-License-Identifier: Apache-2.0
#include "gssd/tensor.hpp"

#include <cassert>
#include <cmath>
#include <sstream>

namespace gssd {

Index numel(const Shape &shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d <= 0)
      throw ConfigError("non-positive extent in shape " + shape_string(shape));
    n *= d;
  }
  return n;
}

std::string shape_string(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i)
    os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename Scalar> Var<Scalar> Graph<Scalar>::constant(Tensor<Scalar> value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar> Var<Scalar> Graph<Scalar>::parameter(Tensor<Scalar> &param) {
  Node node;
  node.value = Tensor<Scalar>(param.shape(), param.data());
  node.requires_grad = true;
  node.param = &param;
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar>
Var<Scalar> Graph<Scalar>::record(Tensor<Scalar> value, std::vector<std::size_t> inputs,
                                  BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    // Inputs always precede their consumer, so the tape cannot contain a cycle.
    assert(in < nodes_.size());
    node.requires_grad = node.requires_grad || nodes_[in].requires_grad;
  }
  node.inputs = std::move(inputs);
  if (node.requires_grad)
    node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var<Scalar>(this, nodes_.size() - 1);
}

template <typename Scalar> typename Graph<Scalar>::Array &Graph<Scalar>::grad(std::size_t id) {
  Node &node = nodes_[id];
  if (!node.has_grad) {
    node.grad = Array::Zero(node.value.size());
    node.has_grad = true;
  }
  return node.grad;
}

template <typename Scalar> void Graph<Scalar>::backward(const Var<Scalar> &loss) {
  if (&loss.graph() != this)
    throw std::logic_error("loss belongs to a different graph");
  if (loss.value().size() != 1)
    throw ConfigError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  if (backward_done_)
    throw std::logic_error("backward() already ran on this graph");
  backward_done_ = true;

  grad(loss.id()).setOnes();
  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    Node &node = nodes_[i];
    if (!node.requires_grad || !node.has_grad)
      continue;
    if (node.param) {
      node.param->grad() += node.grad;
    } else if (node.backward) {
      node.backward(*this, i);
    }
    node.grad = Array();
    node.has_grad = false;
  }
}

template <typename Scalar> void Graph<Scalar>::record_decisions() {
  mode_ = DecisionMode::Record;
  decisions_.clear();
  cursor_ = 0;
}

template <typename Scalar> void Graph<Scalar>::replay_decisions(std::vector<std::vector<Index>> log) {
  mode_ = DecisionMode::Replay;
  decisions_ = std::move(log);
  cursor_ = 0;
  overridden_ = 0;
}

template <typename Scalar> std::vector<Index> Graph<Scalar>::decide(std::vector<Index> natural) {
  if (mode_ == DecisionMode::Record)
    decisions_.push_back(natural);
  if (mode_ != DecisionMode::Replay)
    return natural;
  if (cursor_ >= decisions_.size())
    throw std::logic_error("replayed graph has more decision sites than the recording");
  const auto &recorded = decisions_[cursor_++];
  overridden_ += recorded != natural;
  return recorded;
}

template <typename Scalar> Tensor<Scalar> xavier_uniform(const Shape &shape, std::mt19937_64 &rng) {
  if (shape.size() < 2)
    throw ConfigError("xavier_uniform needs at least 2 dims, got " + shape_string(shape));
  Index receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i)
    receptive *= shape[i];
  const Index fan_in = shape[1] * receptive;
  const Index fan_out = shape[0] * receptive;
  if (fan_in <= 0 || fan_out <= 0)
    throw ConfigError("xavier_uniform: zero fan for shape " + shape_string(shape));
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor<Scalar> out(shape);
  for (Index i = 0; i < out.size(); ++i)
    out[i] = static_cast<Scalar>(dist(rng));
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;
template Tensor<float> xavier_uniform<float>(const Shape &, std::mt19937_64 &);
template Tensor<double> xavier_uniform<double>(const Shape &, std::mt19937_64 &);

} // namespace gssd
