// SPDX-License-Identifier: Apache-2.0
#include "gssd/data.hpp"
#include "oracles.hpp"

#include <doctest.h>

#include <set>

using namespace gssd;

TEST_CASE("window endpoints and clamping") {
  CHECK(window_hu(-100.0f) == 0.0f);
  CHECK(window_hu(400.0f) == 1.0f);
  CHECK(window_hu(150.0f) == 0.5f);
  CHECK(window_hu(-1000.0f) == 0.0f);
  CHECK(window_hu(3000.0f) == 1.0f);
  CHECK_THROWS(window_hu(std::nanf("")));
  std::vector<float> in{-100, 150, 400}, out(3);
  window_hu(in, out);
  CHECK(out == std::vector<float>{0.0f, 0.5f, 1.0f});
}

TEST_CASE("windowing is monotone") {
  float prev = -1;
  for (float hu = -300; hu <= 600; hu += 0.5f) {
    const float w = window_hu(hu);
    CHECK(w >= prev);
    prev = w;
  }
}

TEST_CASE("stack_phases: slice order, edge repetition, bias, portal-only") {
  PhaseVolume pv(4, 3, 2, 2);
  for (Index p = 0; p < 4; ++p)
    for (Index z = 0; z < 3; ++z)
      for (Index i = 0; i < 4; ++i)
        pv.at(p, z, i / 2, i % 2) = static_cast<float>(p * 100 + z * 10) + 5.0f;
  pv.vendor_bias = 5;
  const auto hu_of = [](float w) { return w * 500.0f - 100.0f; };
  const auto x = stack_phases(pv, 0);
  REQUIRE(x.shape() == Shape{12, 2, 2});
  for (Index p = 0; p < 4; ++p) {
    CHECK(hu_of(x[(p * 3 + 0) * 4]) == doctest::Approx(p * 100 + 0));  // z=-1 repeats z=0
    CHECK(hu_of(x[(p * 3 + 1) * 4]) == doctest::Approx(p * 100 + 0));
    CHECK(hu_of(x[(p * 3 + 2) * 4]) == doctest::Approx(p * 100 + 10));
  }
  const auto last = stack_phases(pv, 2);
  CHECK(hu_of(last[2 * 4]) == doctest::Approx(20));
  const auto mid = stack_phases(pv, 1);
  const auto portal = stack_phases(pv, 1, InputMode::PortalOnly);
  for (Index p = 0; p < 4; ++p)
    for (Index s = 0; s < 3; ++s)
      CHECK(portal[(p * 3 + s) * 4] == mid[(2 * 3 + s) * 4]);
  CHECK_THROWS(stack_phases(pv, 3));
}

TEST_CASE("per-phase boxes of one lesion fuse by union") {
  std::vector<WeakLabel> labels{
      {0, 2, 5, {0.2, 0.2, 0.4, 0.4}, 1},
      {1, 2, 5, {0.22, 0.21, 0.43, 0.41}, 1},
      {2, 4, 6, {0.7, 0.7, 0.8, 0.8}, 1},  // different lesion
      {3, 2, 3, {0.21, 0.2, 0.4, 0.45}, 1},
  };
  auto gts = slice_ground_truths(labels, 3);
  REQUIRE(gts.size() == 1);
  CHECK(gts[0].box == BoundingBox{0.2, 0.2, 0.43, 0.45});
  gts = slice_ground_truths(labels, 4);
  REQUIRE(gts.size() == 2);
  CHECK(gts[0].box == BoundingBox{0.2, 0.2, 0.43, 0.41});
  CHECK(slice_ground_truths(labels, 7).empty());
  // same phase, overlapping: two distinct lesions
  std::vector<WeakLabel> same{{0, 0, 0, {0.2, 0.2, 0.4, 0.4}, 1}, {0, 0, 0, {0.21, 0.2, 0.41, 0.4}, 1}};
  CHECK(slice_ground_truths(same, 0).size() == 2);
}

TEST_CASE("jitter stays within alpha and averages to one") {
  std::mt19937_64 rng(1);
  const std::vector<GroundTruth> gts{{{0.2, 0.3, 0.6, 0.7}, 1}};
  double sum = 0;
  int n = 0;
  for (int i = 0; i < 20000; ++i) {
    const auto j = jitter_boxes(gts, 0.01, rng);
    const double m[4] = {j[0].box.x_min / 0.2, j[0].box.y_min / 0.3, j[0].box.x_max / 0.6, j[0].box.y_max / 0.7};
    for (double v : m) {
      REQUIRE(std::abs(v - 1) <= 0.01 + 1e-12);
      sum += v;
      ++n;
    }
  }
  CHECK(std::abs(sum / n - 1) < 1e-3);
}

TEST_CASE("jitter clamps and reorders") {
  std::mt19937_64 rng(2);
  const std::vector<GroundTruth> gts{{{0.5, 0.5, 0.5000001, 1.0}, 1}};
  for (int i = 0; i < 1000; ++i) {
    const auto j = jitter_boxes(gts, 0.2, rng);
    CHECK(j[0].box.x_min <= j[0].box.x_max);
    CHECK(j[0].box.y_max <= 1.0);
  }
}

namespace {

// A sample whose every channel holds 1 inside the ground-truth box, 0 elsewhere.
Sample box_sample(Index size, const BoundingBox &box) {
  Sample s;
  s.input = Tensor<float>({12, size, size});
  for (Index c = 0; c < 12; ++c)
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x) {
        const double cx = (x + 0.5) / size, cy = (y + 0.5) / size;
        if (cx > box.x_min && cx < box.x_max && cy > box.y_min && cy < box.y_max)
          s.input[(c * size + y) * size + x] = 1;
      }
  s.gts = {{box, 1}};
  return s;
}

} // namespace

TEST_CASE("augment: one geometric transform for all channels, boxes follow the image") {
  std::mt19937_64 rng(5);
  AugmentConfig cfg;
  cfg.photometric_prob = 0;
  const Index size = 64;
  for (int trial = 0; trial < 60; ++trial) {
    const Sample s = box_sample(size, {0.3, 0.25, 0.55, 0.6});
    const Sample a = augment(s, rng, cfg);
    REQUIRE(a.input.shape() == s.input.shape());
    const Index plane = size * size;
    for (Index c = 1; c < 12; ++c)
      for (Index i = 0; i < plane; ++i)
        REQUIRE(a.input[c * plane + i] == a.input[i]);
    REQUIRE(a.gts.size() == 1);
    const auto &b = a.gts[0].box;
    CHECK(b.x_min >= 0);
    CHECK(b.x_max <= 1);
    CHECK(b.area() * size * size >= cfg.min_area_px);
    // bright pixels lie inside the box, allowing a one-pixel resampling fringe
    for (Index y = 0; y < size; ++y)
      for (Index x = 0; x < size; ++x)
        if (a.input[y * size + x] > 0.5f) {
          CHECK(x + 0.5 >= b.x_min * size - 1.0);
          CHECK(x + 0.5 <= b.x_max * size + 1.0);
          CHECK(y + 0.5 >= b.y_min * size - 1.0);
          CHECK(y + 0.5 <= b.y_max * size + 1.0);
        }
  }
}

TEST_CASE("augment mirror reflects boxes exactly") {
  AugmentConfig cfg;
  cfg.mirror_prob = 1;
  cfg.scale_prob = 0;
  cfg.photometric_prob = 0;
  std::mt19937_64 rng(1);
  const Sample s = box_sample(32, {0.1, 0.2, 0.3, 0.5});
  const Sample a = augment(s, rng, cfg);
  CHECK(a.gts[0].box.x_min == doctest::Approx(0.7));
  CHECK(a.gts[0].box.x_max == doctest::Approx(0.9));
  CHECK(a.input[10 * 32 + 31 - 5] == 1.0f);
  CHECK(a.input[10 * 32 + 5] == 0.0f);
  const auto twice = mirror_box(mirror_box({0.1, 0.2, 0.3, 0.4}));
  CHECK(twice.x_min == doctest::Approx(0.1));
  CHECK(twice.x_max == doctest::Approx(0.3));
  CHECK(twice.y_min == 0.2);
}

TEST_CASE("augment: photometric changes are affine and shared") {
  AugmentConfig cfg;
  cfg.mirror_prob = 0;
  cfg.scale_prob = 0;
  cfg.photometric_prob = 1;
  std::mt19937_64 rng(3);
  Sample s = box_sample(16, {0.2, 0.2, 0.6, 0.6});
  const Sample a = augment(s, rng, cfg);
  const float lo = a.input[0];
  const float hi = a.input[(16 / 2 - 2) * 16 + 16 / 2 - 2];
  CHECK(std::abs(lo) <= 0.05f + 1e-6f);
  CHECK(hi - lo >= 0.9f - 1e-6f);
  CHECK(hi - lo <= 1.1f + 1e-6f);
  CHECK(a.gts[0].box == s.gts[0].box);
}

TEST_CASE("phantom labels equal a voxel-scan oracle") {
  std::mt19937_64 rng(7);
  PhantomSpec spec;
  spec.depth = 24;
  spec.height = spec.width = 64;
  spec.noise_sigma = 0;
  spec.lesions = {{12.3, 30.6, 28.2, 6.5, {-20, 80, -60, -40}}, {9.0, 24.0, 40.0, 5.0, {0, 70, 0, 0}}};
  const auto ph = generate_phantom(spec, rng);
  REQUIRE(ph.labels.size() == 8);
  for (std::size_t k = 0; k < spec.lesions.size(); ++k) {
    const auto ref = oracle::scan_lesion(spec, spec.lesions[k]);
    for (int p = 0; p < 4; ++p) {
      const auto &l = ph.labels[k * 4 + static_cast<std::size_t>(p)];
      CHECK(l.phase == p);
      CHECK(l.z_start == ref.z_start);
      CHECK(l.z_end == ref.z_end);
      CHECK(l.box.x_min == doctest::Approx(static_cast<double>(ref.x0) / 64));
      CHECK(l.box.x_max == doctest::Approx(static_cast<double>(ref.x1 + 1) / 64));
      CHECK(l.box.y_min == doctest::Approx(static_cast<double>(ref.y0) / 64));
      CHECK(l.box.y_max == doctest::Approx(static_cast<double>(ref.y1 + 1) / 64));
    }
  }
  // noiseless intensities: background, liver, lesion with its phase delta
  CHECK(ph.volume.at(0, 0, 0, 0) == 30.0f);
  CHECK(ph.volume.at(1, 12, 31, 28) == 140.0f);
  CHECK(ph.volume.at(2, 12, 31, 28) == 0.0f);
  CHECK(ph.volume.at(1, 12, 32, 40) == 60.0f);
}

TEST_CASE("phantom noise, vendor bias and determinism") {
  PhantomSpec spec;
  spec.depth = 8;
  spec.height = spec.width = 32;
  spec.vendor_bias = 25;
  std::mt19937_64 a(1), b(1);
  const auto p1 = generate_phantom(spec, a);
  const auto p2 = generate_phantom(spec, b);
  CHECK((p1.volume.hu == p2.volume.hu).all());
  CHECK(p1.volume.vendor_bias == 25.0f);
  double mean = 0;
  for (Index i = 0; i < 32 * 32; ++i)
    mean += p1.volume.slice(0, 0)[i];
  mean /= 32 * 32;
  CHECK(mean == doctest::Approx(55).epsilon(0.05));  // 30 HU background + 25 bias, pure noise otherwise
}

TEST_CASE("phantom spec rejects a lesion outside the liver by index") {
  PhantomSpec spec;
  spec.lesions = {{20, 64, 64, 8, {0, 50, 0, 0}}, {20, 5, 5, 8, {0, 50, 0, 0}}};
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("lesion 1"), ConfigError);
  spec.lesions = {{20, 64, 64, 8, {0, 50}}};
  CHECK_THROWS_WITH_AS(spec.validate(), doctest::Contains("lesion 0"), ConfigError);
}

TEST_CASE("sampled lesions are valid and respect the hidden-portal fraction") {
  PhantomSpec base;
  LesionSampler s;
  s.count_min = 2;
  s.count_max = 3;
  s.portal_hidden_fraction = 1;
  std::mt19937_64 rng(3);
  for (int i = 0; i < 20; ++i) {
    PhantomSpec spec = base;
    spec.lesions = sample_lesions(base, s, rng);
    CHECK(spec.lesions.size() >= 2);
    CHECK_NOTHROW(spec.validate());
    for (const auto &l : spec.lesions) {
      CHECK(l.delta[2] == 0.0f);
      CHECK(l.delta[1] >= 60.0f);
      CHECK(l.radius >= 10);
      CHECK(l.radius <= 16);
    }
  }
}

TEST_CASE("folds partition volumes, keep slices together, and are seeded") {
  std::vector<int> sample_volume;
  for (int v = 0; v < 11; ++v)
    for (int z = 0; z < 5 + v % 3; ++z)
      sample_volume.push_back(v);
  const auto folds = split_folds(sample_volume, 5, 42);
  REQUIRE(folds.size() == 5);
  std::set<int> seen;
  for (const auto &f : folds) {
    CHECK(f.val_volumes.size() >= 2);
    CHECK(f.val_volumes.size() <= 3);
    CHECK(f.train.size() + f.val.size() == sample_volume.size());
    std::set<int> val(f.val_volumes.begin(), f.val_volumes.end());
    for (std::size_t i : f.val)
      CHECK(val.count(sample_volume[i]) == 1);
    for (std::size_t i : f.train)
      CHECK(val.count(sample_volume[i]) == 0);
    for (int v : f.val_volumes)
      CHECK(seen.insert(v).second);
  }
  CHECK(seen.size() == 11);
  const auto again = split_folds(sample_volume, 5, 42);
  for (std::size_t k = 0; k < 5; ++k)
    CHECK(again[k].val_volumes == folds[k].val_volumes);
  CHECK_THROWS_AS(split_folds(sample_volume, 12, 1), ConfigError);
}
