// SPDX-License-Identifier: Apache-2.0
#include "gssd/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <stdexcept>

namespace gssd {

float window_hu(float hu) {
  if (std::isnan(hu))
    throw std::domain_error("window_hu: NaN input");
  const float c = std::clamp(hu, kHuWindowLow, kHuWindowHigh);
  return (c - kHuWindowLow) / (kHuWindowHigh - kHuWindowLow);
}

void window_hu(std::span<const float> hu, std::span<float> out) {
  if (hu.size() != out.size())
    throw ConfigError("window_hu: output span has the wrong length");
  for (std::size_t i = 0; i < hu.size(); ++i)
    out[i] = window_hu(hu[i]);
}

Tensor<float> stack_phases(const PhaseVolume &pv, Index z, InputMode mode) {
  if (z < 0 || z >= pv.depth)
    throw std::out_of_range("stack_phases: slice " + std::to_string(z) + " outside [0," +
                            std::to_string(pv.depth) + ")");
  constexpr Index kSlices = 3;
  const Index plane = pv.height * pv.width;
  auto out = Tensor<float>::uninitialized({pv.phases * kSlices, pv.height, pv.width});
  for (Index p = 0; p < pv.phases; ++p) {
    const Index src_phase = mode == InputMode::PortalOnly ? std::min<Index>(kPortalPhase, pv.phases - 1) : p;
    for (Index s = 0; s < kSlices; ++s) {
      const Index zz = std::clamp<Index>(z - 1 + s, 0, pv.depth - 1);
      const float *src = pv.slice(src_phase, zz);
      float *dst = out.ptr() + (p * kSlices + s) * plane;
      for (Index i = 0; i < plane; ++i)
        dst[i] = window_hu(src[i] - pv.vendor_bias);
    }
  }
  return out;
}

std::vector<GroundTruth> slice_ground_truths(std::span<const WeakLabel> labels, int z) {
  struct Cluster {
    GroundTruth gt;
    std::vector<int> phases;
  };
  std::vector<Cluster> clusters;
  for (const auto &l : labels) {
    if (z < l.z_start || z > l.z_end)
      continue;
    Cluster *home = nullptr;
    for (auto &c : clusters) {
      if (c.gt.label != l.label || std::find(c.phases.begin(), c.phases.end(), l.phase) != c.phases.end())
        continue;
      if (iou(c.gt.box, l.box) >= 0.3) {
        home = &c;
        break;
      }
    }
    if (!home) {
      clusters.push_back({{l.box, l.label}, {l.phase}});
      continue;
    }
    auto &b = home->gt.box;
    b = {std::min(b.x_min, l.box.x_min), std::min(b.y_min, l.box.y_min), std::max(b.x_max, l.box.x_max),
         std::max(b.y_max, l.box.y_max)};
    home->phases.push_back(l.phase);
  }
  std::vector<GroundTruth> out;
  for (const auto &c : clusters)
    out.push_back(c.gt);
  return out;
}

std::vector<GroundTruth> jitter_boxes(const std::vector<GroundTruth> &gts, double alpha, std::mt19937_64 &rng) {
  std::uniform_real_distribution<double> noise(1.0 - alpha, 1.0 + alpha);
  std::vector<GroundTruth> out;
  out.reserve(gts.size());
  for (const auto &g : gts) {
    BoundingBox b{g.box.x_min * noise(rng), g.box.y_min * noise(rng), g.box.x_max * noise(rng),
                  g.box.y_max * noise(rng)};
    b = b.clamped();
    if (b.x_min > b.x_max)
      std::swap(b.x_min, b.x_max);
    if (b.y_min > b.y_max)
      std::swap(b.y_min, b.y_max);
    out.push_back({b, g.label});
  }
  return out;
}

BoundingBox mirror_box(const BoundingBox &b) { return {1.0 - b.x_max, b.y_min, 1.0 - b.x_min, b.y_max}; }

namespace {

void mirror_channels(Tensor<float> &t) {
  const Index c = t.dim(0), h = t.dim(1), w = t.dim(2);
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y) {
      float *row = t.ptr() + (ch * h + y) * w;
      std::reverse(row, row + w);
    }
}

// Resample `src` scaled to `scaled` pixels per side, then read the size x size
// window whose origin sits at (shift_x, shift_y) in scaled coordinates.
// Outside the scaled image the canvas is zero.
Tensor<float> scale_and_place(const Tensor<float> &src, Index scaled, Index shift_x, Index shift_y) {
  const Index c = src.dim(0), h = src.dim(1), w = src.dim(2);
  Tensor<float> out({c, h, w});
  const double fy = static_cast<double>(h) / static_cast<double>(scaled);
  const double fx = static_cast<double>(w) / static_cast<double>(scaled);
  for (Index y = 0; y < h; ++y) {
    const Index sy = y + shift_y;
    if (sy < 0 || sy >= scaled)
      continue;
    const double py = std::clamp((static_cast<double>(sy) + 0.5) * fy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<Index>(std::floor(py));
    const Index y1 = std::min(y0 + 1, h - 1);
    const double wy = py - static_cast<double>(y0);
    for (Index x = 0; x < w; ++x) {
      const Index sx = x + shift_x;
      if (sx < 0 || sx >= scaled)
        continue;
      const double px =
          std::clamp((static_cast<double>(sx) + 0.5) * fx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<Index>(std::floor(px));
      const Index x1 = std::min(x0 + 1, w - 1);
      const double wx = px - static_cast<double>(x0);
      for (Index ch = 0; ch < c; ++ch) {
        const float *p = src.ptr() + ch * h * w;
        const double v = (1 - wy) * ((1 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1]) +
                         wy * ((1 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1]);
        out.ptr()[(ch * h + y) * w + x] = static_cast<float>(v);
      }
    }
  }
  return out;
}

} // namespace

Sample augment(const Sample &sample, std::mt19937_64 &rng, const AugmentConfig &cfg) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Sample out = sample;
  const Index size = sample.input.dim(1);
  const auto side = static_cast<double>(size);

  if (unit(rng) < cfg.mirror_prob) {
    mirror_channels(out.input);
    for (auto &g : out.gts)
      g.box = mirror_box(g.box);
  }

  if (unit(rng) < cfg.scale_prob) {
    std::uniform_real_distribution<double> scale_dist(cfg.scale_min, cfg.scale_max);
    for (int attempt = 0; attempt < cfg.max_tries; ++attempt) {
      const auto scaled = std::max<Index>(1, static_cast<Index>(std::lround(scale_dist(rng) * side)));
      Index shift_x = 0, shift_y = 0;
      if (scaled >= size) {
        std::uniform_int_distribution<Index> off(0, scaled - size);
        shift_x = off(rng);
        shift_y = off(rng);
      } else {
        std::uniform_int_distribution<Index> off(0, size - scaled);
        shift_x = -off(rng);
        shift_y = -off(rng);
      }
      const auto s = static_cast<double>(scaled);
      auto map_x = [&](double v) { return (v * s - static_cast<double>(shift_x)) / side; };
      auto map_y = [&](double v) { return (v * s - static_cast<double>(shift_y)) / side; };

      bool center_inside = out.gts.empty();
      std::vector<GroundTruth> kept;
      for (const auto &g : out.gts) {
        const double cx = map_x((g.box.x_min + g.box.x_max) / 2);
        const double cy = map_y((g.box.y_min + g.box.y_max) / 2);
        if (cx >= 0 && cx < 1 && cy >= 0 && cy < 1)
          center_inside = true;
        const BoundingBox b =
            BoundingBox{map_x(g.box.x_min), map_y(g.box.y_min), map_x(g.box.x_max), map_y(g.box.y_max)}.clamped();
        if (b.area() * side * side >= cfg.min_area_px)
          kept.push_back({b, g.label});
      }
      if (!center_inside || (!out.gts.empty() && kept.empty()))
        continue;
      out.input = scale_and_place(out.input, scaled, shift_x, shift_y);
      out.gts = std::move(kept);
      break;
    }
  }

  if (unit(rng) < cfg.photometric_prob) {
    std::uniform_real_distribution<double> gain(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    std::uniform_real_distribution<double> shift(-cfg.brightness, cfg.brightness);
    const auto a = static_cast<float>(gain(rng));
    const auto b = static_cast<float>(shift(rng));
    out.input.data() = out.input.data() * a + b;
  }
  return out;
}

namespace {

double lesion_distance2(const LesionSpec &l, double z, double y, double x, double spacing) {
  const double dz = (z - l.z) * spacing;
  return (x - l.x) * (x - l.x) + (y - l.y) * (y - l.y) + dz * dz;
}

} // namespace

void PhantomSpec::validate() const {
  if (phases < 1 || depth < 1 || height < 1 || width < 1)
    throw ConfigError("phantom dims must be positive");
  if (!(slice_spacing > 0))
    throw ConfigError("slice_spacing must be positive");
  const double rz = liver_radii[0] * static_cast<double>(depth);
  const double ry = liver_radii[1] * static_cast<double>(height);
  const double rx = liver_radii[2] * static_cast<double>(width);
  const double cz = liver_center[0] * static_cast<double>(depth);
  const double cy = liver_center[1] * static_cast<double>(height);
  const double cx = liver_center[2] * static_cast<double>(width);
  for (std::size_t i = 0; i < lesions.size(); ++i) {
    const auto &l = lesions[i];
    const std::string tag = "lesion " + std::to_string(i);
    if (static_cast<Index>(l.delta.size()) != phases)
      throw ConfigError(tag + " has " + std::to_string(l.delta.size()) + " phase deltas, expected " +
                        std::to_string(phases));
    if (!(l.radius > 0))
      throw ConfigError(tag + " has non-positive radius");
    const double lz = l.radius / slice_spacing;
    if (l.radius >= rx || l.radius >= ry || lz >= rz)
      throw ConfigError(tag + " is outside the liver (larger than the liver ellipsoid)");
    const double ex = (l.x - cx) / (rx - l.radius);
    const double ey = (l.y - cy) / (ry - l.radius);
    const double ez = (l.z - cz) / (rz - lz);
    if (ex * ex + ey * ey + ez * ez > 1.0)
      throw ConfigError(tag + " is outside the liver");
  }
}

Phantom generate_phantom(const PhantomSpec &spec, std::mt19937_64 &rng) {
  spec.validate();
  Phantom out;
  auto &v = out.volume;
  v = PhaseVolume(spec.phases, spec.depth, spec.height, spec.width);
  v.vendor_bias = spec.vendor_bias;
  std::normal_distribution<float> noise(0.0f, spec.noise_sigma);

  const double rz = spec.liver_radii[0] * static_cast<double>(spec.depth);
  const double ry = spec.liver_radii[1] * static_cast<double>(spec.height);
  const double rx = spec.liver_radii[2] * static_cast<double>(spec.width);
  const double cz = spec.liver_center[0] * static_cast<double>(spec.depth);
  const double cy = spec.liver_center[1] * static_cast<double>(spec.height);
  const double cx = spec.liver_center[2] * static_cast<double>(spec.width);

  for (Index z = 0; z < spec.depth; ++z) {
    for (Index y = 0; y < spec.height; ++y) {
      for (Index x = 0; x < spec.width; ++x) {
        const double ez = (static_cast<double>(z) - cz) / rz;
        const double ey = (static_cast<double>(y) - cy) / ry;
        const double ex = (static_cast<double>(x) - cx) / rx;
        const bool liver = ex * ex + ey * ey + ez * ez <= 1.0;
        const LesionSpec *lesion = nullptr;
        for (const auto &l : spec.lesions)
          if (lesion_distance2(l, static_cast<double>(z), static_cast<double>(y), static_cast<double>(x),
                               spec.slice_spacing) <= l.radius * l.radius)
            lesion = &l;
        for (Index p = 0; p < spec.phases; ++p) {
          float hu = liver ? spec.liver_hu : spec.background_hu;
          if (lesion)
            hu += lesion->delta[static_cast<std::size_t>(p)];
          v.at(p, z, y, x) = hu + spec.vendor_bias;
        }
      }
    }
  }
  // noise drawn in storage order for reproducibility
  for (Index i = 0; i < v.hu.size(); ++i)
    v.hu[i] += noise(rng);

  for (const auto &l : spec.lesions) {
    // widest cross-section sits on the slice nearest the center
    const auto zc = std::clamp<Index>(static_cast<Index>(std::ceil(l.z - 0.5)), 0, spec.depth - 1);
    Index x_lo = spec.width, x_hi = -1, y_lo = spec.height, y_hi = -1;
    const double r2 = l.radius * l.radius;
    for (Index y = 0; y < spec.height; ++y)
      for (Index x = 0; x < spec.width; ++x)
        if (lesion_distance2(l, static_cast<double>(zc), static_cast<double>(y), static_cast<double>(x),
                             spec.slice_spacing) <= r2) {
          x_lo = std::min(x_lo, x);
          x_hi = std::max(x_hi, x);
          y_lo = std::min(y_lo, y);
          y_hi = std::max(y_hi, y);
        }
    if (x_hi < 0)
      continue;  // sub-voxel lesion, nothing visible
    // slices reached by the lesion: the nearest in-plane pixel center decides
    const double dx0 = std::abs(std::round(l.x) - l.x);
    const double dy0 = std::abs(std::round(l.y) - l.y);
    int z_start = -1, z_end = -1;
    for (Index z = 0; z < spec.depth; ++z) {
      const double dz = (static_cast<double>(z) - l.z) * spec.slice_spacing;
      if (dx0 * dx0 + dy0 * dy0 + dz * dz <= r2) {
        if (z_start < 0)
          z_start = static_cast<int>(z);
        z_end = static_cast<int>(z);
      }
    }
    const BoundingBox box{static_cast<double>(x_lo) / static_cast<double>(spec.width),
                          static_cast<double>(y_lo) / static_cast<double>(spec.height),
                          static_cast<double>(x_hi + 1) / static_cast<double>(spec.width),
                          static_cast<double>(y_hi + 1) / static_cast<double>(spec.height)};
    for (Index p = 0; p < spec.phases; ++p)
      out.labels.push_back({static_cast<int>(p), z_start, z_end, box, 1});
  }
  return out;
}

std::vector<LesionSpec> sample_lesions(const PhantomSpec &base, const LesionSampler &s, std::mt19937_64 &rng) {
  std::uniform_int_distribution<int> count_dist(s.count_min, s.count_max);
  std::uniform_real_distribution<double> radius_dist(s.radius_min, s.radius_max);
  std::uniform_real_distribution<double> contrast_dist(s.contrast_min, s.contrast_max);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> sym(-1.0, 1.0);

  const double rz = base.liver_radii[0] * static_cast<double>(base.depth);
  const double ry = base.liver_radii[1] * static_cast<double>(base.height);
  const double rx = base.liver_radii[2] * static_cast<double>(base.width);
  const double cz = base.liver_center[0] * static_cast<double>(base.depth);
  const double cy = base.liver_center[1] * static_cast<double>(base.height);
  const double cx = base.liver_center[2] * static_cast<double>(base.width);

  const int count = count_dist(rng);
  std::vector<LesionSpec> out;
  for (int i = 0; i < count; ++i) {
    for (int attempt = 0; attempt < s.max_tries; ++attempt) {
      LesionSpec l;
      l.radius = radius_dist(rng);
      const double lz = l.radius / base.slice_spacing;
      // uniform in the shrunken ellipsoid, with a small safety margin
      double ez, ey, ex;
      do {
        ez = sym(rng);
        ey = sym(rng);
        ex = sym(rng);
      } while (ex * ex + ey * ey + ez * ez > 0.9);
      l.z = cz + ez * (rz - lz);
      l.y = cy + ey * (ry - l.radius);
      l.x = cx + ex * (rx - l.radius);
      bool clear = true;
      for (const auto &o : out) {
        const double d2 = lesion_distance2(o, l.z, l.y, l.x, base.slice_spacing);
        const double gap = o.radius + l.radius + 4.0;
        if (d2 < gap * gap)
          clear = false;
      }
      if (!clear)
        continue;
      const double c = contrast_dist(rng);
      const bool hidden = unit(rng) < s.portal_hidden_fraction;
      // hypovascular before contrast, arterial hyperenhancement, washout later
      l.delta.assign(static_cast<std::size_t>(base.phases), 0.0f);
      const float profile[4] = {static_cast<float>(-0.3 * c), static_cast<float>(c),
                                hidden ? 0.0f : static_cast<float>(-0.8 * c), static_cast<float>(-0.6 * c)};
      for (Index p = 0; p < base.phases; ++p)
        l.delta[static_cast<std::size_t>(p)] = profile[p % 4];
      out.push_back(std::move(l));
      break;
    }
  }
  return out;
}

std::vector<Fold> split_folds(std::span<const int> sample_volume, int k, std::uint64_t seed) {
  std::vector<int> volumes(sample_volume.begin(), sample_volume.end());
  std::sort(volumes.begin(), volumes.end());
  volumes.erase(std::unique(volumes.begin(), volumes.end()), volumes.end());
  if (k < 2 || k > static_cast<int>(volumes.size()))
    throw ConfigError("split_folds: k=" + std::to_string(k) + " needs 2 <= k <= " +
                      std::to_string(volumes.size()) + " volumes");
  std::mt19937_64 rng(seed);
  std::shuffle(volumes.begin(), volumes.end(), rng);
  std::map<int, int> fold_of;
  for (std::size_t i = 0; i < volumes.size(); ++i)
    fold_of[volumes[i]] = static_cast<int>(i % static_cast<std::size_t>(k));
  std::vector<Fold> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < volumes.size(); ++i)
    folds[i % static_cast<std::size_t>(k)].val_volumes.push_back(volumes[i]);
  for (auto &f : folds)
    std::sort(f.val_volumes.begin(), f.val_volumes.end());
  for (std::size_t s = 0; s < sample_volume.size(); ++s) {
    const int f = fold_of[sample_volume[s]];
    for (int j = 0; j < k; ++j)
      (j == f ? folds[static_cast<std::size_t>(j)].val : folds[static_cast<std::size_t>(j)].train).push_back(s);
  }
  return folds;
}

} // namespace gssd
