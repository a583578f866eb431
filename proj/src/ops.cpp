// SPDX-License-Identifier: Apache-2.0
#include "gssd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gssd {

namespace {

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S> using MapMat = Eigen::Map<RowMat<S>>;
template <typename S> using ConstMapMat = Eigen::Map<const RowMat<S>>;

void require_same_shape(const Shape &a, const Shape &b, const char *op) {
  if (a != b)
    throw ConfigError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " +
                      shape_string(b));
}

void require_rank(const Shape &s, std::size_t rank, const char *op, const char *what) {
  if (s.size() != rank)
    throw ConfigError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                      ", got " + shape_string(s));
}

template <typename S> Graph<S> &graph_of(const Var<S> &a, const Var<S> &b) {
  if (&a.graph() != &b.graph())
    throw std::logic_error("operands recorded on different graphs");
  return a.graph();
}

struct ConvGeometry {
  Index n, c, h, w;    // input
  Index f, kh, kw;     // kernel
  Index ho, wo;        // output
  Index groups, cg, fg;
  Index stride, pad;
  Index k() const { return cg * kh * kw; }
  Index cols() const { return n * ho * wo; }
};

// Column matrix [cg*kh*kw, n*ho*wo] for input channel block g.
template <typename S> void im2col(const S *x, const ConvGeometry &g, Index group, S *col) {
  const Index hw_out = g.ho * g.wo;
  const Index ncols = g.cols();
  for (Index c = 0; c < g.cg; ++c) {
    const Index channel = group * g.cg + c;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        S *row = col + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (Index n = 0; n < g.n; ++n) {
          const S *plane = x + (n * g.c + channel) * g.h * g.w;
          S *dst = row + n * hw_out;
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh * g.stride - g.pad + ki;
            S *drow = dst + oh * g.wo;
            if (ih < 0 || ih >= g.h) {
              std::fill(drow, drow + g.wo, S(0));
              continue;
            }
            const S *srow = plane + ih * g.w;
            if (g.stride == 1) {
              const Index iw0 = kj - g.pad;
              const Index lo = std::min<Index>(g.wo, std::max<Index>(0, -iw0));
              const Index hi = std::min<Index>(g.wo, g.w - iw0);
              std::fill(drow, drow + lo, S(0));
              if (hi > lo)
                std::copy(srow + iw0 + lo, srow + iw0 + hi, drow + lo);
              std::fill(drow + std::max(hi, lo), drow + g.wo, S(0));
            } else {
              for (Index ow = 0; ow < g.wo; ++ow) {
                const Index iw = ow * g.stride - g.pad + kj;
                drow[ow] = (iw < 0 || iw >= g.w) ? S(0) : srow[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename S> void col2im_add(const S *col, const ConvGeometry &g, Index group, S *dx) {
  const Index hw_out = g.ho * g.wo;
  const Index ncols = g.cols();
  for (Index c = 0; c < g.cg; ++c) {
    const Index channel = group * g.cg + c;
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const S *row = col + ((c * g.kh + ki) * g.kw + kj) * ncols;
        for (Index n = 0; n < g.n; ++n) {
          S *plane = dx + (n * g.c + channel) * g.h * g.w;
          const S *src = row + n * hw_out;
          for (Index oh = 0; oh < g.ho; ++oh) {
            const Index ih = oh * g.stride - g.pad + ki;
            if (ih < 0 || ih >= g.h)
              continue;
            S *drow = plane + ih * g.w;
            const S *srow = src + oh * g.wo;
            if (g.stride == 1) {
              const Index iw0 = kj - g.pad;
              const Index lo = std::min<Index>(g.wo, std::max<Index>(0, -iw0));
              const Index hi = std::min<Index>(g.wo, g.w - iw0);
              for (Index ow = lo; ow < hi; ++ow)
                drow[ow + iw0] += srow[ow];
            } else {
              for (Index ow = 0; ow < g.wo; ++ow) {
                const Index iw = ow * g.stride - g.pad + kj;
                if (iw >= 0 && iw < g.w)
                  drow[iw] += srow[ow];
              }
            }
          }
        }
      }
    }
  }
}

} // namespace

Index conv_output_extent(Index in, Index kernel, Index stride, Index padding) {
  const Index span = in + 2 * padding - kernel;
  if (span < 0 || stride <= 0)
    return 0;
  return span / stride + 1;
}

Index pool_output_extent(Index in, const Pool2dOptions &o) {
  const Index span = in + 2 * o.padding - o.kernel;
  if (span < 0 || o.stride <= 0)
    return 0;
  Index out = (o.ceil_mode ? (span + o.stride - 1) / o.stride : span / o.stride) + 1;
  // the last window must start inside the padded input
  if (o.ceil_mode && (out - 1) * o.stride >= in + o.padding)
    --out;
  return out;
}

template <typename S> Var<S> add(const Var<S> &a, const Var<S> &b) {
  Graph<S> &g = graph_of(a, b);
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<S> out(a.shape(), a.value().data() + b.value().data());
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<S> &gr, std::size_t self) {
    const auto &dy = gr.grad(self);
    if (gr.requires_grad(ia))
      gr.grad(ia) += dy;
    if (gr.requires_grad(ib))
      gr.grad(ib) += dy;
  });
}

template <typename S> Var<S> mul(const Var<S> &a, const Var<S> &b) {
  Graph<S> &g = graph_of(a, b);
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<S> out(a.shape(), a.value().data() * b.value().data());
  const std::size_t ia = a.id(), ib = b.id();
  return g.record(std::move(out), {ia, ib}, [ia, ib](Graph<S> &gr, std::size_t self) {
    const auto &dy = gr.grad(self);
    if (gr.requires_grad(ia))
      gr.grad(ia) += dy * gr.value(ib).data();
    if (gr.requires_grad(ib))
      gr.grad(ib) += dy * gr.value(ia).data();
  });
}

template <typename S> Var<S> scale(const Var<S> &a, S factor) {
  Tensor<S> out(a.shape(), a.value().data() * factor);
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia, factor](Graph<S> &gr, std::size_t self) {
    gr.grad(ia) += gr.grad(self) * factor;
  });
}

template <typename S> Var<S> sum(const Var<S> &a) {
  Tensor<S> out(Shape{});
  out[0] = a.value().data().sum();
  const std::size_t ia = a.id();
  return a.graph().record(std::move(out), {ia}, [ia](Graph<S> &gr, std::size_t self) {
    gr.grad(ia) += gr.grad(self)[0];
  });
}

template <typename S> Var<S> relu(const Var<S> &x) {
  const auto &in = x.value().data();
  Graph<S> &g = x.graph();
  const std::size_t ix = x.id();
  if (g.tracks_decisions()) {
    std::vector<Index> on;
    for (Index i = 0; i < in.size(); ++i)
      if (in[i] > S(0))
        on.push_back(i);
    typename Tensor<S>::Array mask = Tensor<S>::Array::Zero(in.size());
    for (Index i : g.decide(std::move(on))) {
      if (i < 0 || i >= in.size())
        throw std::logic_error("relu: replayed mask does not fit the input");
      mask[i] = S(1);
    }
    Tensor<S> out(x.shape(), in * mask);
    return g.record(std::move(out), {ix}, [ix, mask = std::move(mask)](Graph<S> &gr, std::size_t self) {
      gr.grad(ix) += gr.grad(self) * mask;
    });
  }
  Tensor<S> out(x.shape(), in.max(S(0)));
  return g.record(std::move(out), {ix}, [ix](Graph<S> &gr, std::size_t self) {
    const auto &in = gr.value(ix).data();
    gr.grad(ix) += (in > S(0)).select(gr.grad(self), S(0));
  });
}

template <typename S> Var<S> reshape(const Var<S> &x, Shape shape) {
  if (numel(shape) != x.value().size())
    throw ConfigError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                      shape_string(shape));
  Tensor<S> out(std::move(shape), x.value().data());
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix](Graph<S> &gr, std::size_t self) {
    gr.grad(ix) += gr.grad(self);
  });
}

template <typename S> Var<S> to_channels_last(const Var<S> &x) {
  require_rank(x.shape(), 4, "to_channels_last", "input");
  const Index n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  auto out = Tensor<S>::uninitialized(Shape{n, x.shape()[2], x.shape()[3], c});
  const S *src = x.value().ptr();
  S *dst = out.ptr();
  for (Index b = 0; b < n; ++b)
    for (Index ch = 0; ch < c; ++ch)
      for (Index p = 0; p < hw; ++p)
        dst[(b * hw + p) * c + ch] = src[(b * c + ch) * hw + p];
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, n, c, hw](Graph<S> &gr, std::size_t self) {
    const auto &dy = gr.grad(self);
    auto &dx = gr.grad(ix);
    for (Index b = 0; b < n; ++b)
      for (Index ch = 0; ch < c; ++ch)
        for (Index p = 0; p < hw; ++p)
          dx[(b * c + ch) * hw + p] += dy[(b * hw + p) * c + ch];
  });
}

template <typename S> Var<S> concat(std::span<const Var<S>> parts, Index axis) {
  if (parts.empty())
    throw ConfigError("concat: no inputs");
  const Shape &first = parts[0].shape();
  if (axis < 0 || axis >= static_cast<Index>(first.size()))
    throw ConfigError("concat: axis " + std::to_string(axis) + " out of range for " +
                      shape_string(first));
  Graph<S> &g = parts[0].graph();
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i)
    outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i)
    inner *= first[i];
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<Index> extents;
  std::vector<std::size_t> ids;
  for (const auto &p : parts) {
    if (&p.graph() != &g)
      throw std::logic_error("concat operands recorded on different graphs");
    Shape s = p.shape();
    if (s.size() != first.size())
      throw ConfigError("concat: rank mismatch " + shape_string(s) + " vs " + shape_string(first));
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<Index>(i) != axis && s[i] != first[i])
        throw ConfigError("concat: shape mismatch " + shape_string(s) + " vs " +
                          shape_string(first));
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
    ids.push_back(p.id());
  }
  auto out = Tensor<S>::uninitialized(out_shape);
  const Index total = out_shape[axis];
  Index offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Index block = extents[k] * inner;
    const S *src = parts[k].value().ptr();
    for (Index o = 0; o < outer; ++o)
      std::copy(src + o * block, src + (o + 1) * block, out.ptr() + (o * total + offset) * inner);
    offset += extents[k];
  }
  return g.record(std::move(out), ids,
                  [ids, extents, outer, inner, total](Graph<S> &gr, std::size_t self) {
                    const auto &dy = gr.grad(self);
                    Index offset = 0;
                    for (std::size_t k = 0; k < ids.size(); ++k) {
                      const Index block = extents[k] * inner;
                      if (gr.requires_grad(ids[k])) {
                        auto &dx = gr.grad(ids[k]);
                        for (Index o = 0; o < outer; ++o)
                          dx.segment(o * block, block) +=
                              dy.segment((o * total + offset) * inner, block);
                      }
                      offset += extents[k];
                    }
                  });
}

template <typename S> Var<S> softmax(const Var<S> &x, Index axis) {
  const Shape &shape = x.shape();
  if (axis < 0 || axis >= static_cast<Index>(shape.size()))
    throw ConfigError("softmax: axis out of range for " + shape_string(shape));
  Index outer = 1, inner = 1;
  for (Index i = 0; i < axis; ++i)
    outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i)
    inner *= shape[i];
  const Index k = shape[axis];
  Tensor<S> out(shape);
  const S *in = x.value().ptr();
  S *y = out.ptr();
  for (Index o = 0; o < outer; ++o)
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * k * inner + i;
      S m = -std::numeric_limits<S>::infinity();
      for (Index j = 0; j < k; ++j)
        m = std::max(m, in[base + j * inner]);
      S z = 0;
      for (Index j = 0; j < k; ++j)
        z += (y[base + j * inner] = std::exp(in[base + j * inner] - m));
      for (Index j = 0; j < k; ++j)
        y[base + j * inner] /= z;
    }
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, outer, inner, k](Graph<S> &gr, std::size_t self) {
    const auto &dy = gr.grad(self);
    const auto &y = gr.value(self).data();
    auto &dx = gr.grad(ix);
    for (Index o = 0; o < outer; ++o)
      for (Index i = 0; i < inner; ++i) {
        const Index base = o * k * inner + i;
        S dot = 0;
        for (Index j = 0; j < k; ++j)
          dot += dy[base + j * inner] * y[base + j * inner];
        for (Index j = 0; j < k; ++j)
          dx[base + j * inner] += y[base + j * inner] * (dy[base + j * inner] - dot);
      }
  });
}

template <typename S>
Var<S> conv2d(const Var<S> &input, const Var<S> &kernel, const std::optional<std::type_identity_t<Var<S>>> &bias,
              const Conv2dOptions &opts) {
  Graph<S> &gr = graph_of(input, kernel);
  const Shape &xs = input.shape();
  const Shape &ks = kernel.shape();
  require_rank(xs, 4, "conv2d", "input");
  require_rank(ks, 4, "conv2d", "kernel");
  ConvGeometry g{};
  g.n = xs[0], g.c = xs[1], g.h = xs[2], g.w = xs[3];
  g.f = ks[0], g.kh = ks[2], g.kw = ks[3];
  g.groups = opts.groups, g.stride = opts.stride, g.pad = opts.padding;
  if (g.groups <= 0 || g.c % g.groups != 0 || g.f % g.groups != 0)
    throw ConfigError("conv2d: channels in=" + std::to_string(g.c) + " out=" + std::to_string(g.f) +
                      " not divisible by groups=" + std::to_string(g.groups));
  g.cg = g.c / g.groups;
  g.fg = g.f / g.groups;
  if (ks[1] != g.cg)
    throw ConfigError("conv2d: kernel " + shape_string(ks) + " expects " + std::to_string(ks[1]) +
                      " channels per group, input " + shape_string(xs) + " has " +
                      std::to_string(g.cg) + " with groups=" + std::to_string(g.groups));
  g.ho = conv_output_extent(g.h, g.kh, g.stride, g.pad);
  g.wo = conv_output_extent(g.w, g.kw, g.stride, g.pad);
  if (g.ho <= 0 || g.wo <= 0)
    throw ConfigError("conv2d: kernel " + shape_string(ks) + " with stride " +
                      std::to_string(g.stride) + " padding " + std::to_string(g.pad) +
                      " does not fit input " + shape_string(xs));
  std::optional<std::size_t> ib;
  if (bias) {
    if (bias->shape() != Shape{g.f})
      throw ConfigError("conv2d: bias " + shape_string(bias->shape()) + " does not match " +
                        std::to_string(g.f) + " filters");
    ib = bias->id();
  }

  const Index hw_out = g.ho * g.wo;
  const Index k = g.k();
  const Index ncols = g.cols();
  auto out = Tensor<S>::uninitialized(Shape{g.n, g.f, g.ho, g.wo});
  RowMat<S> col(k, ncols);
  RowMat<S> prod(g.fg, ncols);
  const S *x = input.value().ptr();
  const S *w = kernel.value().ptr();
  for (Index grp = 0; grp < g.groups; ++grp) {
    im2col(x, g, grp, col.data());
    ConstMapMat<S> wg(w + grp * g.fg * k, g.fg, k);
    prod.noalias() = wg * col;
    for (Index n = 0; n < g.n; ++n)
      for (Index f = 0; f < g.fg; ++f) {
        S *dst = out.ptr() + (n * g.f + grp * g.fg + f) * hw_out;
        const S *src = prod.data() + f * ncols + n * hw_out;
        std::copy(src, src + hw_out, dst);
      }
  }
  if (ib) {
    const auto &b = gr.value(*ib).data();
    for (Index n = 0; n < g.n; ++n)
      for (Index f = 0; f < g.f; ++f)
        out.data().segment((n * g.f + f) * hw_out, hw_out) += b[f];
  }

  std::vector<std::size_t> inputs{input.id(), kernel.id()};
  if (ib)
    inputs.push_back(*ib);
  const std::size_t ix = input.id(), iw = kernel.id();
  return gr.record(std::move(out), inputs, [g, ix, iw, ib](Graph<S> &gr, std::size_t self) {
    const Index hw_out = g.ho * g.wo;
    const Index k = g.k();
    const Index ncols = g.cols();
    const auto &dy = gr.grad(self);
    if (ib && gr.requires_grad(*ib)) {
      auto &db = gr.grad(*ib);
      for (Index n = 0; n < g.n; ++n)
        for (Index f = 0; f < g.f; ++f)
          db[f] += dy.segment((n * g.f + f) * hw_out, hw_out).sum();
    }
    const bool need_x = gr.requires_grad(ix);
    const bool need_w = gr.requires_grad(iw);
    if (!need_x && !need_w)
      return;
    const S *x = gr.value(ix).ptr();
    const S *w = gr.value(iw).ptr();
    RowMat<S> col(k, ncols);
    RowMat<S> dyg(g.fg, ncols);
    RowMat<S> dcol;
    for (Index grp = 0; grp < g.groups; ++grp) {
      for (Index n = 0; n < g.n; ++n)
        for (Index f = 0; f < g.fg; ++f) {
          const S *src = dy.data() + (n * g.f + grp * g.fg + f) * hw_out;
          std::copy(src, src + hw_out, dyg.data() + f * ncols + n * hw_out);
        }
      if (need_w) {
        im2col(x, g, grp, col.data());
        MapMat<S> dwg(gr.grad(iw).data() + grp * g.fg * k, g.fg, k);
        dwg.noalias() += dyg * col.transpose();
      }
      if (need_x) {
        ConstMapMat<S> wg(w + grp * g.fg * k, g.fg, k);
        dcol.noalias() = wg.transpose() * dyg;
        col2im_add(dcol.data(), g, grp, gr.grad(ix).data());
      }
    }
  });
}

template <typename S> Var<S> max_pool2d(const Var<S> &x, const Pool2dOptions &o) {
  require_rank(x.shape(), 4, "max_pool2d", "input");
  const Index n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const Index ho = pool_output_extent(h, o), wo = pool_output_extent(w, o);
  if (ho <= 0 || wo <= 0)
    throw ConfigError("max_pool2d: window " + std::to_string(o.kernel) + " does not fit input " +
                      shape_string(x.shape()));
  auto out = Tensor<S>::uninitialized(Shape{n, c, ho, wo});
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  const S *in = x.value().ptr();
  for (Index p = 0; p < n * c; ++p) {
    const S *plane = in + p * h * w;
    for (Index oh = 0; oh < ho; ++oh)
      for (Index ow = 0; ow < wo; ++ow) {
        const Index h0 = oh * o.stride - o.padding, w0 = ow * o.stride - o.padding;
        S best = -std::numeric_limits<S>::infinity();
        Index arg = -1;
        for (Index i = std::max<Index>(h0, 0); i < std::min(h0 + o.kernel, h); ++i)
          for (Index j = std::max<Index>(w0, 0); j < std::min(w0 + o.kernel, w); ++j)
            if (plane[i * w + j] > best || arg < 0) {
              best = plane[i * w + j];
              arg = i * w + j;
            }
        const Index oi = (p * ho + oh) * wo + ow;
        out[oi] = best;
        argmax[static_cast<std::size_t>(oi)] = p * h * w + arg;
      }
  }
  if (x.graph().tracks_decisions()) {
    argmax = x.graph().decide(std::move(argmax));
    if (static_cast<Index>(argmax.size()) != out.size())
      throw std::logic_error("max_pool2d: replayed argmax does not fit the output");
    for (Index i = 0; i < out.size(); ++i) {
      const Index a = argmax[static_cast<std::size_t>(i)];
      if (a < 0 || a >= x.value().size())
        throw std::logic_error("max_pool2d: replayed argmax out of range");
      out[i] = in[a];
    }
  }
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix},
                          [ix, argmax = std::move(argmax)](Graph<S> &gr, std::size_t self) {
                            const auto &dy = gr.grad(self);
                            auto &dx = gr.grad(ix);
                            for (std::size_t i = 0; i < argmax.size(); ++i)
                              dx[argmax[i]] += dy[static_cast<Index>(i)];
                          });
}

template <typename S>
Var<S> batch_norm(const Var<S> &x, const Var<S> &gamma, const Var<S> &beta, BatchNormState<S> state,
                  bool training, const BatchNormOptions &opts) {
  require_rank(x.shape(), 4, "batch_norm", "input");
  const Index n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ConfigError("batch_norm: affine params " + shape_string(gamma.shape()) + "/" +
                      shape_string(beta.shape()) + " do not match " + std::to_string(c) +
                      " channels");
  if (state.running_mean.shape() != Shape{c} || state.running_var.shape() != Shape{c})
    throw ConfigError("batch_norm: running stats do not match " + std::to_string(c) + " channels");
  const Index count = n * hw;
  if (training && count < 2)
    throw ConfigError("batch_norm: training-mode statistics need at least 2 values per channel, got " +
                      std::to_string(count));

  const S *in = x.value().ptr();
  const auto &gm = gamma.value().data();
  const auto &bt = beta.value().data();
  auto out = Tensor<S>::uninitialized(x.shape());
  typename Tensor<S>::Array xhat(x.value().size());
  typename Tensor<S>::Array inv_std(c);
  const S eps = static_cast<S>(opts.epsilon);
  for (Index ch = 0; ch < c; ++ch) {
    S mean, var;
    if (training) {
      // two-pass mean/variance
      double acc = 0;
      for (Index b = 0; b < n; ++b)
        acc += x.value().data().segment((b * c + ch) * hw, hw).template cast<double>().sum();
      const double m = acc / static_cast<double>(count);
      double sq = 0;
      for (Index b = 0; b < n; ++b)
        sq += (x.value().data().segment((b * c + ch) * hw, hw).template cast<double>() - m)
                  .square()
                  .sum();
      const double v = sq / static_cast<double>(count);
      mean = static_cast<S>(m);
      var = static_cast<S>(v);
      const S mom = static_cast<S>(opts.momentum);
      state.running_mean[ch] = (S(1) - mom) * state.running_mean[ch] + mom * mean;
      state.running_var[ch] = (S(1) - mom) * state.running_var[ch] +
                              mom * static_cast<S>(v * static_cast<double>(count) /
                                                   static_cast<double>(count - 1));
    } else {
      mean = state.running_mean[ch];
      var = state.running_var[ch];
    }
    const S istd = S(1) / std::sqrt(var + eps);
    inv_std[ch] = istd;
    for (Index b = 0; b < n; ++b) {
      const Index off = (b * c + ch) * hw;
      for (Index p = 0; p < hw; ++p) {
        const S xh = (in[off + p] - mean) * istd;
        xhat[off + p] = xh;
        out[off + p] = gm[ch] * xh + bt[ch];
      }
    }
  }

  const std::size_t ix = x.id(), ig = gamma.id(), ibt = beta.id();
  return x.graph().record(
      std::move(out), {ix, ig, ibt},
      [ix, ig, ibt, n, c, hw, training, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](Graph<S> &gr, std::size_t self) {
        const auto &dy = gr.grad(self);
        const auto &gm = gr.value(ig).data();
        const S count = static_cast<S>(n * hw);
        for (Index ch = 0; ch < c; ++ch) {
          S sum_dy = 0, sum_dy_xh = 0;
          for (Index b = 0; b < n; ++b) {
            const Index off = (b * c + ch) * hw;
            sum_dy += dy.segment(off, hw).sum();
            sum_dy_xh += (dy.segment(off, hw) * xhat.segment(off, hw)).sum();
          }
          if (gr.requires_grad(ig))
            gr.grad(ig)[ch] += sum_dy_xh;
          if (gr.requires_grad(ibt))
            gr.grad(ibt)[ch] += sum_dy;
          if (!gr.requires_grad(ix))
            continue;
          auto &dx = gr.grad(ix);
          const S k = gm[ch] * inv_std[ch];
          for (Index b = 0; b < n; ++b) {
            const Index off = (b * c + ch) * hw;
            if (training) {
              dx.segment(off, hw) += k * (dy.segment(off, hw) - sum_dy / count -
                                          xhat.segment(off, hw) * (sum_dy_xh / count));
            } else {
              dx.segment(off, hw) += k * dy.segment(off, hw);
            }
          }
        }
      });
}

template <typename S> Var<S> smooth_l1(const Var<S> &pred, const Tensor<S> &target) {
  require_same_shape(pred.shape(), target.shape(), "smooth_l1");
  const auto d = (pred.value().data() - target.data()).eval();
  const auto ad = d.abs();
  Tensor<S> out(pred.shape(), (ad < S(1)).select(S(0.5) * d.square(), ad - S(0.5)));
  const std::size_t ip = pred.id();
  return pred.graph().record(std::move(out), {ip}, [ip, d](Graph<S> &gr, std::size_t self) {
    // derivative: d inside the unit band, sign(d) outside
    const auto slope = (d.abs() < S(1)).select(d, d.sign());
    gr.grad(ip) += gr.grad(self) * slope;
  });
}

template <typename S> Var<S> softmax_cross_entropy(const Var<S> &logits, std::span<const int> labels) {
  require_rank(logits.shape(), 2, "softmax_cross_entropy", "logits");
  const Index m = logits.shape()[0], k = logits.shape()[1];
  if (static_cast<Index>(labels.size()) != m)
    throw ConfigError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                      " labels for logits " + shape_string(logits.shape()));
  const S *z = logits.value().ptr();
  Tensor<S> out(Shape{m});
  typename Tensor<S>::Array prob(m * k);
  std::vector<int> lab(labels.begin(), labels.end());
  for (Index i = 0; i < m; ++i) {
    const int y = lab[static_cast<std::size_t>(i)];
    if (y < 0 || y >= k)
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(y) + " outside [0," +
                        std::to_string(k) + ")");
    const S *row = z + i * k;
    const S mx = *std::max_element(row, row + k);
    S se = 0;
    for (Index j = 0; j < k; ++j)
      se += (prob[i * k + j] = std::exp(row[j] - mx));
    for (Index j = 0; j < k; ++j)
      prob[i * k + j] /= se;
    out[i] = mx + std::log(se) - row[y];
  }
  const std::size_t il = logits.id();
  return logits.graph().record(
      std::move(out), {il},
      [il, m, k, lab = std::move(lab), prob = std::move(prob)](Graph<S> &gr, std::size_t self) {
        const auto &dy = gr.grad(self);
        auto &dz = gr.grad(il);
        for (Index i = 0; i < m; ++i) {
          if (dy[i] == S(0))
            continue;
          for (Index j = 0; j < k; ++j)
            dz[i * k + j] += dy[i] * prob[i * k + j];
          dz[i * k + lab[static_cast<std::size_t>(i)]] -= dy[i];
        }
      });
}

template <typename S> Var<S> weighted_sum(const Var<S> &x, const typename Tensor<S>::Array &weights) {
  if (weights.size() != x.value().size())
    throw ConfigError("weighted_sum: " + std::to_string(weights.size()) + " weights for " +
                      shape_string(x.shape()));
  Tensor<S> out(Shape{});
  out[0] = (x.value().data() * weights).sum();
  const std::size_t ix = x.id();
  return x.graph().record(std::move(out), {ix}, [ix, weights](Graph<S> &gr, std::size_t self) {
    gr.grad(ix) += weights * gr.grad(self)[0];
  });
}

#define GSSD_INSTANTIATE_OPS(S)                                                                    \
  template Var<S> add<S>(const Var<S> &, const Var<S> &);                                         \
  template Var<S> mul<S>(const Var<S> &, const Var<S> &);                                         \
  template Var<S> scale<S>(const Var<S> &, S);                                                    \
  template Var<S> sum<S>(const Var<S> &);                                                         \
  template Var<S> relu<S>(const Var<S> &);                                                        \
  template Var<S> reshape<S>(const Var<S> &, Shape);                                              \
  template Var<S> to_channels_last<S>(const Var<S> &);                                            \
  template Var<S> concat<S>(std::span<const Var<S>>, Index);                                      \
  template Var<S> softmax<S>(const Var<S> &, Index);                                              \
  template Var<S> conv2d<S>(const Var<S> &, const Var<S> &, const std::optional<Var<S>> &,        \
                            const Conv2dOptions &);                                               \
  template Var<S> max_pool2d<S>(const Var<S> &, const Pool2dOptions &);                           \
  template Var<S> batch_norm<S>(const Var<S> &, const Var<S> &, const Var<S> &,                   \
                                BatchNormState<S>, bool, const BatchNormOptions &);             \
  template Var<S> smooth_l1<S>(const Var<S> &, const Tensor<S> &);                                \
  template Var<S> softmax_cross_entropy<S>(const Var<S> &, std::span<const int>);                 \
  template Var<S> weighted_sum<S>(const Var<S> &, const typename Tensor<S>::Array &);

GSSD_INSTANTIATE_OPS(float)
GSSD_INSTANTIATE_OPS(double)

#undef GSSD_INSTANTIATE_OPS

} // namespace gssd
