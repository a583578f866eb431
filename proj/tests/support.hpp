// SPDX-License-Identifier: Apache-2.0
// Shared generators and reference implementations for the unit tests.
#pragma once

#include "gssd/ops.hpp"
#include "gssd/priors.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <functional>
#include <random>
#include <vector>

namespace gssd::test {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
  explicit TempDir(const std::string &tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("gssd_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;
  const std::filesystem::path &path() const { return path_; }
  std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path &p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

inline void write_file(const std::filesystem::path &p, const std::string &text) {
  std::ofstream(p, std::ios::binary) << text;
}

template <typename S = double> Tensor<S> random_tensor(const Shape &shape, std::mt19937_64 &rng, double lo = -1,
                                                      double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<S> t(shape);
  for (Index i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(u(rng));
  return t;
}

inline BoundingBox random_box(std::mt19937_64 &rng, double min_size = 0.05, double max_size = 0.6) {
  std::uniform_real_distribution<double> size(min_size, max_size);
  std::uniform_real_distribution<double> unit(0, 1);
  const double w = size(rng), h = size(rng);
  const double x = unit(rng) * (1 - w), y = unit(rng) * (1 - h);
  return {x, y, x + w, y + h};
}

/// Direct-loop grouped cross-correlation, [N,C,H,W] * [F,C/g,kh,kw].
inline Tensor<double> naive_conv(const Tensor<double> &x, const Tensor<double> &k, const Tensor<double> *bias,
                                 Index stride, Index pad, Index groups) {
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index f = k.dim(0), cg = k.dim(1), kh = k.dim(2), kw = k.dim(3);
  const Index ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  const Index fg = f / groups;
  (void)c;
  Tensor<double> y({n, f, ho, wo});
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < f; ++o) {
      const Index g = o / fg;
      for (Index i = 0; i < ho; ++i)
        for (Index j = 0; j < wo; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (Index ci = 0; ci < cg; ++ci)
            for (Index u = 0; u < kh; ++u)
              for (Index v = 0; v < kw; ++v) {
                const Index yy = i * stride - pad + u, xx = j * stride - pad + v;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w)
                  continue;
                acc += x.at(b, g * cg + ci, yy, xx) * k.at(o, ci, u, v);
              }
          y.at(b, o, i, j) = acc;
        }
    }
  return y;
}

/// Largest relative error between analytic gradients and central
/// differences of `loss` with respect to every entry of `inputs`.
inline double max_fd_error(std::vector<Tensor<double>> inputs,
                           const std::function<Var<double>(Graph<double> &, std::vector<Var<double>> &)> &loss,
                           double eps = 1e-5) {
  std::vector<Tensor<double>> grads;
  {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (auto &t : inputs) {
      t.zero_grad();
      vars.push_back(g.parameter(t));
    }
    g.backward(loss(g, vars));
    for (auto &t : inputs)
      grads.push_back(Tensor<double>(t.shape(), t.grad()));
  }
  auto eval = [&] {
    Graph<double> g;
    std::vector<Var<double>> vars;
    for (auto &t : inputs)
      vars.push_back(g.constant(t));
    return loss(g, vars).value()[0];
  };
  double worst = 0;
  for (std::size_t a = 0; a < inputs.size(); ++a)
    for (Index i = 0; i < inputs[a].size(); ++i) {
      const double keep = inputs[a][i];
      inputs[a][i] = keep + eps;
      const double up = eval();
      inputs[a][i] = keep - eps;
      const double down = eval();
      inputs[a][i] = keep;
      const double fd = (up - down) / (2 * eps);
      const double an = grads[a][i];
      worst = std::max(worst, std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}));
    }
  return worst;
}

} // namespace gssd::test
