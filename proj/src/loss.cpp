// SPDX-License-Identifier: Apache-2.0
#include "gssd/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace gssd {

void LossConfig::validate() const {
  if (negatives_per_positive < 1)
    throw ConfigError("OHNM ratio needs at least one negative per positive, got 1:" +
                      std::to_string(negatives_per_positive));
  if (!(localization_weight >= 0))
    throw ConfigError("localization_weight must be non-negative");
}

std::vector<Index> mine_hard_negatives(std::span<const double> background_loss,
                                       std::span<const int> class_targets, int negatives_per_positive) {
  std::vector<Index> candidates;
  Index positives = 0;
  for (std::size_t i = 0; i < class_targets.size(); ++i) {
    if (class_targets[i] > 0)
      ++positives;
    else
      candidates.push_back(static_cast<Index>(i));
  }
  const auto keep = std::min<std::size_t>(candidates.size(),
                                          static_cast<std::size_t>(positives * negatives_per_positive));
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                    candidates.end(), [&](Index a, Index b) {
                      const double la = background_loss[static_cast<std::size_t>(a)];
                      const double lb = background_loss[static_cast<std::size_t>(b)];
                      return la != lb ? la > lb : a < b;
                    });
  candidates.resize(keep);
  return candidates;
}

template <typename Scalar>
LossTerms<Scalar> multibox_loss(const Var<Scalar> &loc, const Var<Scalar> &conf,
                                std::span<const MatchResult> matches, const LossConfig &cfg) {
  cfg.validate();
  const Shape &ls = loc.shape();
  const Shape &cs = conf.shape();
  if (ls.size() != 3 || ls[2] != 4 || cs.size() != 3 || cs[0] != ls[0] || cs[1] != ls[1])
    throw ConfigError("multibox_loss: loc " + shape_string(ls) + " and conf " + shape_string(cs) +
                      " are not [N,P,4] and [N,P,K]");
  const Index n = ls[0], p = ls[1], k = cs[2];
  if (static_cast<Index>(matches.size()) != n)
    throw ConfigError("multibox_loss: " + std::to_string(matches.size()) + " match results for batch of " +
                      std::to_string(n));
  for (const auto &m : matches)
    if (static_cast<Index>(m.class_targets.size()) != p || m.encoded_targets.rows() != p)
      throw ConfigError("multibox_loss: match result covers " + std::to_string(m.class_targets.size()) +
                        " priors, predictions have " + std::to_string(p));
  if (!loc.value().data().allFinite() || !conf.value().data().allFinite())
    throw std::runtime_error("multibox_loss: non-finite values in predictions");

  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(n * p));
  int total_matched = 0;
  for (const auto &m : matches) {
    labels.insert(labels.end(), m.class_targets.begin(), m.class_targets.end());
    total_matched += m.num_matched;
  }
  for (int label : labels)
    if (label >= k)
      throw ConfigError("multibox_loss: class target " + std::to_string(label) + " but only " +
                        std::to_string(k) + " classes");

  Var<Scalar> ce = softmax_cross_entropy(reshape(conf, {n * p, k}), labels);

  LossTerms<Scalar> out;
  out.num_matched = total_matched;
  using Array = typename Tensor<Scalar>::Array;
  Array conf_w = Array::Zero(n * p);
  Array loc_w = Array::Zero(n * p * 4);
  Tensor<Scalar> loc_target(Shape{n * p * 4});
  const Scalar inv_n = total_matched > 0 ? Scalar(1) / static_cast<Scalar>(total_matched) : Scalar(0);
  const auto alpha = static_cast<Scalar>(cfg.localization_weight);

  std::vector<double> bg_loss(static_cast<std::size_t>(p));
  Graph<Scalar> &graph = loc.graph();
  for (Index b = 0; b < n; ++b) {
    const auto &m = matches[static_cast<std::size_t>(b)];
    for (Index i = 0; i < p; ++i)
      bg_loss[static_cast<std::size_t>(i)] = static_cast<double>(ce.value()[b * p + i]);
    auto negatives = mine_hard_negatives(bg_loss, m.class_targets, cfg.negatives_per_positive);
    if (graph.tracks_decisions())
      negatives = graph.decide(std::move(negatives));
    for (Index i : negatives) {
      if (i < 0 || i >= p)
        throw std::logic_error("multibox_loss: replayed negative out of range");
      conf_w[b * p + i] = inv_n;
    }
    for (Index i = 0; i < p; ++i) {
      if (m.class_targets[static_cast<std::size_t>(i)] <= 0)
        continue;
      conf_w[b * p + i] = inv_n;
      for (Index c = 0; c < 4; ++c) {
        loc_w[(b * p + i) * 4 + c] = alpha * inv_n;
        loc_target[(b * p + i) * 4 + c] = static_cast<Scalar>(m.encoded_targets(i, c));
      }
    }
    out.negatives.push_back(std::move(negatives));
  }

  Var<Scalar> l_conf = weighted_sum(ce, conf_w);
  Var<Scalar> l_loc = weighted_sum(smooth_l1(reshape(loc, {n * p * 4}), loc_target), loc_w);
  out.conf = static_cast<double>(l_conf.value()[0]);
  out.loc = static_cast<double>(l_loc.value()[0]);
  out.total = l_conf + l_loc;
  return out;
}

template LossTerms<float> multibox_loss<float>(const Var<float> &, const Var<float> &,
                                               std::span<const MatchResult>, const LossConfig &);
template LossTerms<double> multibox_loss<double>(const Var<double> &, const Var<double> &,
                                                 std::span<const MatchResult>, const LossConfig &);

} // namespace gssd
