// SPDX-License-Identifier: Apache-2.0
#include "gssd/run_config.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>
#include <set>

namespace gssd {

namespace {

std::string num(double v) {
  char buf[32];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T> std::string join(const std::vector<T> &v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i)
    out += (i ? "," : "") + num(static_cast<double>(v[i]));
  return out;
}

std::string mode_name(InputMode m) { return m == InputMode::PortalOnly ? "portal_only" : "multi_phase"; }

struct Field {
  const char *key;
  std::function<void(RunConfig &, const KeyValues &, const std::string &)> read;
  std::function<std::string(const RunConfig &)> write;
};

template <typename Get> Field real(const char *key, Get get) {
  return {key, [get](RunConfig &c, const KeyValues &kv, const std::string &k) { get(c) = kv.number(k); },
          [get](const RunConfig &c) { return num(get(c)); }};
}

template <typename Get> Field integer(const char *key, Get get) {
  return {key,
          [get](RunConfig &c, const KeyValues &kv, const std::string &k) {
            using T = std::remove_cvref_t<decltype(get(c))>;
            get(c) = static_cast<T>(kv.integer(k));
          },
          [get](const RunConfig &c) { return std::to_string(get(c)); }};
}

template <typename Get> Field flag(const char *key, Get get) {
  return {key, [get](RunConfig &c, const KeyValues &kv, const std::string &k) { get(c) = kv.boolean(k); },
          [get](const RunConfig &c) { return std::string(get(c) ? "true" : "false"); }};
}

const std::vector<Field> &fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(integer("iterations", [](auto &c) -> auto & { return c.train.iterations; }));
    f.push_back(integer("batch_size", [](auto &c) -> auto & { return c.train.batch_size; }));
    f.push_back(real("lr0", [](auto &c) -> auto & { return c.train.lr0; }));
    f.push_back(real("momentum", [](auto &c) -> auto & { return c.train.momentum; }));
    f.push_back(real("weight_decay", [](auto &c) -> auto & { return c.train.weight_decay; }));
    f.push_back({"lr_drop_iters",
                 [](RunConfig &c, const KeyValues &kv, const std::string &k) {
                   c.train.lr_drop_iters.clear();
                   if (kv.get(k) == "auto")
                     return;
                   for (double d : kv.numbers(k))
                     c.train.lr_drop_iters.push_back(static_cast<int>(d));
                 },
                 [](const RunConfig &c) { return join(c.train.drop_iters()); }});
    f.push_back(real("lr_drop_factor", [](auto &c) -> auto & { return c.train.lr_drop_factor; }));
    f.push_back(real("jitter_alpha", [](auto &c) -> auto & { return c.train.jitter_alpha; }));
    f.push_back(real("match_threshold", [](auto &c) -> auto & { return c.train.match_threshold; }));
    f.push_back({"input_mode",
                 [](RunConfig &c, const KeyValues &kv, const std::string &k) {
                   const auto &v = kv.get(k);
                   if (v == "multi_phase")
                     c.train.input_mode = InputMode::MultiPhase;
                   else if (v == "portal_only")
                     c.train.input_mode = InputMode::PortalOnly;
                   else
                     throw ConfigError(kv.source() + ": input_mode must be multi_phase or portal_only, got '" + v +
                                       "'");
                 },
                 [](const RunConfig &c) { return mode_name(c.train.input_mode); }});
    f.push_back(integer("val_interval", [](auto &c) -> auto & { return c.train.val_interval; }));
    f.push_back(integer("checkpoint_interval", [](auto &c) -> auto & { return c.train.checkpoint_interval; }));
    f.push_back(integer("ohnm_ratio", [](auto &c) -> auto & { return c.train.loss.negatives_per_positive; }));
    f.push_back(
        real("localization_weight", [](auto &c) -> auto & { return c.train.loss.localization_weight; }));
    f.push_back(integer("model.input_size", [](auto &c) -> auto & { return c.train.model.input_size; }));
    f.push_back(integer("model.phases", [](auto &c) -> auto & { return c.train.model.phases; }));
    f.push_back(flag("model.grouped", [](auto &c) -> auto & { return c.train.model.grouped; }));
    f.push_back(flag("model.double_base", [](auto &c) -> auto & { return c.train.model.double_base; }));
    f.push_back(integer("model.n_fusion_convs", [](auto &c) -> auto & { return c.train.model.n_fusion_convs; }));
    f.push_back(integer("model.n_classes", [](auto &c) -> auto & { return c.train.model.n_classes; }));
    f.push_back(real("model.width_scale", [](auto &c) -> auto & { return c.train.model.width_scale; }));
    f.push_back({"model.boxes_per_cell",
                 [](RunConfig &c, const KeyValues &kv, const std::string &k) {
                   c.train.model.boxes_per_cell.clear();
                   for (double d : kv.numbers(k))
                     c.train.model.boxes_per_cell.push_back(static_cast<int>(d));
                 },
                 [](const RunConfig &c) { return join(c.train.model.boxes_per_cell); }});
    f.push_back(real("model.scale_min", [](auto &c) -> auto & { return c.train.model.scale_min; }));
    f.push_back(real("model.scale_max", [](auto &c) -> auto & { return c.train.model.scale_max; }));
    f.push_back(real("augment.mirror_prob", [](auto &c) -> auto & { return c.train.augment.mirror_prob; }));
    f.push_back(real("augment.scale_prob", [](auto &c) -> auto & { return c.train.augment.scale_prob; }));
    f.push_back(real("augment.scale_min", [](auto &c) -> auto & { return c.train.augment.scale_min; }));
    f.push_back(real("augment.scale_max", [](auto &c) -> auto & { return c.train.augment.scale_max; }));
    f.push_back(real("augment.photometric_prob",
                     [](auto &c) -> auto & { return c.train.augment.photometric_prob; }));
    f.push_back(real("augment.brightness", [](auto &c) -> auto & { return c.train.augment.brightness; }));
    f.push_back(real("augment.contrast", [](auto &c) -> auto & { return c.train.augment.contrast; }));
    f.push_back(real("eval.conf_threshold", [](auto &c) -> auto & { return c.detect.conf_threshold; }));
    f.push_back(real("eval.nms_threshold", [](auto &c) -> auto & { return c.detect.nms_threshold; }));
    f.push_back(integer("eval.top_k", [](auto &c) -> auto & { return c.detect.top_k; }));
    f.push_back(real("eval.iou_threshold", [](auto &c) -> auto & { return c.iou_threshold; }));
    f.push_back(integer("cv.folds", [](auto &c) -> auto & { return c.folds; }));
    return f;
  }();
  return table;
}

} // namespace

std::optional<std::uint64_t> env_seed() {
  const char *v = std::getenv("GSSD_SEED");
  if (!v || !*v)
    return std::nullopt;
  std::uint64_t seed = 0;
  const char *end = v + std::char_traits<char>::length(v);
  auto [ptr, ec] = std::from_chars(v, end, seed);
  if (ec != std::errc() || ptr != end)
    throw ConfigError(std::string("GSSD_SEED='") + v + "' is not an unsigned integer");
  return seed;
}

RunConfig parse_run_config(const KeyValues &kv, std::optional<std::uint64_t> seed_override) {
  RunConfig cfg;
  std::set<std::string> known{"seed"};
  for (const auto &f : fields())
    known.insert(f.key);
  for (const auto &[key, value] : kv.entries())
    if (!known.count(key))
      throw ConfigError(kv.source() + ": unknown key '" + key + "'");
  for (const auto &f : fields())
    if (kv.has(f.key))
      f.read(cfg, kv, f.key);

  if (seed_override)
    cfg.train.seed = *seed_override;
  else if (auto env = env_seed())
    cfg.train.seed = *env;
  else if (kv.has("seed"))
    cfg.train.seed = kv.unsigned_integer("seed");
  else
    throw ConfigError(kv.source() + ": seed is mandatory (config key, GSSD_SEED or --seed)");

  cfg.detect.input_mode = cfg.train.input_mode;
  if (cfg.folds < 2)
    throw ConfigError(kv.source() + ": cv.folds must be at least 2");
  if (cfg.detect.top_k < 1)
    throw ConfigError(kv.source() + ": eval.top_k must be positive");
  cfg.train.validate();
  return cfg;
}

KeyValues echo_run_config(const RunConfig &cfg) {
  KeyValues kv;
  kv.set("seed", std::to_string(cfg.train.seed));
  for (const auto &f : fields())
    kv.set(f.key, f.write(cfg));
  return kv;
}

std::vector<std::string> config_differences(const KeyValues &a, const KeyValues &b) {
  std::vector<std::string> out;
  for (const auto &[k, v] : a.entries())
    if (!b.has(k) || b.get(k) != v)
      out.push_back(k);
  for (const auto &[k, v] : b.entries())
    if (!a.has(k))
      out.push_back(k);
  return out;
}

} // namespace gssd
