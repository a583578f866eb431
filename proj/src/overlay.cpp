// SPDX-License-Identifier: Apache-2.0
#include "gssd/overlay.hpp"

#include "gssd/io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace gssd {

Rgb RgbImage::at(Index x, Index y) const {
  const auto i = static_cast<std::size_t>((y * width + x) * 3);
  return {pixels[i], pixels[i + 1], pixels[i + 2]};
}

void RgbImage::set(Index x, Index y, Rgb c) {
  const auto i = static_cast<std::size_t>((y * width + x) * 3);
  std::copy(c.begin(), c.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i));
}

void draw_box(RgbImage &img, const BoundingBox &box, Rgb color) {
  const auto w = static_cast<double>(img.width), h = static_cast<double>(img.height);
  const auto x0 = std::clamp<Index>(static_cast<Index>(std::floor(box.x_min * w)), 0, img.width - 1);
  const auto y0 = std::clamp<Index>(static_cast<Index>(std::floor(box.y_min * h)), 0, img.height - 1);
  const auto x1 = std::clamp<Index>(static_cast<Index>(std::ceil(box.x_max * w)) - 1, x0, img.width - 1);
  const auto y1 = std::clamp<Index>(static_cast<Index>(std::ceil(box.y_max * h)) - 1, y0, img.height - 1);
  for (Index x = x0; x <= x1; ++x) {
    img.set(x, y0, color);
    img.set(x, y1, color);
  }
  for (Index y = y0; y <= y1; ++y) {
    img.set(x0, y, color);
    img.set(x1, y, color);
  }
}

RgbImage render_overlay(const PhaseVolume &pv, Index z, const std::vector<GroundTruth> &truth,
                        const std::vector<Detection> &detections) {
  if (z < 0 || z >= pv.depth)
    throw std::out_of_range("render_overlay: slice " + std::to_string(z) + " outside the volume");
  RgbImage img{pv.width, pv.height, std::vector<std::uint8_t>(static_cast<std::size_t>(pv.width * pv.height * 3))};
  const float *src = pv.slice(std::min<Index>(kPortalPhase, pv.phases - 1), z);
  for (Index y = 0; y < pv.height; ++y)
    for (Index x = 0; x < pv.width; ++x) {
      const auto g = static_cast<std::uint8_t>(std::lround(window_hu(src[y * pv.width + x] - pv.vendor_bias) * 255));
      img.set(x, y, {g, g, g});
    }
  for (const auto &t : truth)
    draw_box(img, t.box, kTruthColor);
  for (const auto &d : detections)
    draw_box(img, d.box, kPredictionColor);
  return img;
}

void write_ppm(const std::filesystem::path &path, const RgbImage &img) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char *>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out)
    throw IoError("write to " + path.string() + " failed");
}

} // namespace gssd
