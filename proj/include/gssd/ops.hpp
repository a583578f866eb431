// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "gssd/tensor.hpp"

#include <optional>
#include <type_traits>
#include <span>

namespace gssd {

struct Conv2dOptions {
  Index stride = 1;
  Index padding = 0;
  Index groups = 1;
};

struct Pool2dOptions {
  Index kernel = 2;
  Index stride = 2;
  Index padding = 0;
  bool ceil_mode = false;
};

struct BatchNormOptions {
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Views of the running statistics owned by the model; batch_norm updates
/// them in training mode.
template <typename Scalar> struct BatchNormState {
  Tensor<Scalar> &running_mean;
  Tensor<Scalar> &running_var;
};

template <typename S> Var<S> add(const Var<S> &a, const Var<S> &b);
template <typename S> Var<S> mul(const Var<S> &a, const Var<S> &b);
template <typename S> Var<S> scale(const Var<S> &a, S factor);
template <typename S> Var<S> sum(const Var<S> &a);

template <typename S> Var<S> operator+(const Var<S> &a, const Var<S> &b) { return add(a, b); }
template <typename S> Var<S> operator*(const Var<S> &a, const Var<S> &b) { return mul(a, b); }
template <typename S> Var<S> operator*(const Var<S> &a, S factor) { return scale(a, factor); }

template <typename S> Var<S> relu(const Var<S> &x);
template <typename S> Var<S> reshape(const Var<S> &x, Shape shape);
/// [N, C, H, W] -> [N, H, W, C].
template <typename S> Var<S> to_channels_last(const Var<S> &x);
template <typename S> Var<S> concat(std::span<const Var<S>> parts, Index axis);
template <typename S> Var<S> softmax(const Var<S> &x, Index axis);

/// Grouped 2-D cross-correlation. kernel is [F, C/groups, kh, kw]; output
/// channel block g depends only on input channel block g.
template <typename S>
Var<S> conv2d(const Var<S> &input, const Var<S> &kernel, const std::optional<std::type_identity_t<Var<S>>> &bias,
              const Conv2dOptions &opts);

/// Output extent of a convolution or pooling window along one axis. Returns
/// a non-positive value when the window does not fit.
Index conv_output_extent(Index in, Index kernel, Index stride, Index padding);
Index pool_output_extent(Index in, const Pool2dOptions &opts);

template <typename S> Var<S> max_pool2d(const Var<S> &x, const Pool2dOptions &opts);

template <typename S>
Var<S> batch_norm(const Var<S> &x, const Var<S> &gamma, const Var<S> &beta, BatchNormState<S> state,
                  bool training, const BatchNormOptions &opts = {});

/// Elementwise Huber-style loss with unit threshold.
template <typename S> Var<S> smooth_l1(const Var<S> &pred, const Tensor<S> &target);

/// Row-wise -log softmax(logits)[label] for logits [M, K].
template <typename S> Var<S> softmax_cross_entropy(const Var<S> &logits, std::span<const int> labels);

/// sum_i w_i x_i over a flattened tensor; returns a scalar.
template <typename S> Var<S> weighted_sum(const Var<S> &x, const typename Tensor<S>::Array &weights);

} // namespace gssd
