#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "handqa/errors.hpp"
#include "handqa/geometry.hpp"
#include "handqa/rng.hpp"

namespace handqa {

// 64x64 8-bit grayscale raster. All hand images in the dataset use this
// format; it divides evenly into the scorer's 8x8 patch grid.
inline constexpr int kRasterSize = 64;
inline constexpr int kRasterPixels = kRasterSize * kRasterSize;

struct Raster {
  std::array<std::uint8_t, kRasterPixels> px{};

  std::uint8_t& at(int x, int y) { return px[y * kRasterSize + x]; }
  std::uint8_t at(int x, int y) const { return px[y * kRasterSize + x]; }

  bool operator==(const Raster& o) const { return px == o.px; }
};

// ---------------------------------------------------------------------------
// Rendering. Geometry arrives in normalized [0,1] coordinates; pixel (x, y)
// covers the normalized square centered at ((x+0.5)/64, (y+0.5)/64).
// Primitives accumulate coverage with max-combine so strokes stay crisp where
// they overlap the occluder.
// ---------------------------------------------------------------------------

inline constexpr double kStrokeRadius = 0.011;  // bone half-width, normalized
inline constexpr double kJointRadius = 0.015;
inline constexpr double kAaWidth = 1.0 / kRasterSize;

class Canvas {
 public:
  Canvas() { value_.fill(0.0f); }

  void stroke_segment(double ax, double ay, double bx, double by,
                      double radius, double intensity) {
    const double pad = radius + kAaWidth;
    const int x0 = clamp_px(std::min(ax, bx) - pad);
    const int x1 = clamp_px(std::max(ax, bx) + pad);
    const int y0 = clamp_px(std::min(ay, by) - pad);
    const int y1 = clamp_px(std::max(ay, by) + pad);
    const double dx = bx - ax;
    const double dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double px = (x + 0.5) / kRasterSize;
        const double py = (y + 0.5) / kRasterSize;
        double t = 0.0;
        if (len2 > 0.0) {
          t = std::clamp(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0);
        }
        const double qx = ax + t * dx - px;
        const double qy = ay + t * dy - py;
        deposit(x, y, std::sqrt(qx * qx + qy * qy), radius, intensity);
      }
    }
  }

  void fill_disk(double cx, double cy, double radius, double intensity) {
    const double pad = radius + kAaWidth;
    const int x0 = clamp_px(cx - pad);
    const int x1 = clamp_px(cx + pad);
    const int y0 = clamp_px(cy - pad);
    const int y1 = clamp_px(cy + pad);
    for (int y = y0; y <= y1; ++y) {
      for (int x = x0; x <= x1; ++x) {
        const double px = (x + 0.5) / kRasterSize - cx;
        const double py = (y + 0.5) / kRasterSize - cy;
        deposit(x, y, std::sqrt(px * px + py * py), radius, intensity);
      }
    }
  }

  Raster quantize() const {
    Raster r;
    for (int i = 0; i < kRasterPixels; ++i) {
      const double v = std::clamp(static_cast<double>(value_[i]), 0.0, 1.0);
      r.px[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    return r;
  }

 private:
  static int clamp_px(double v) {
    return std::clamp(static_cast<int>(std::floor(v * kRasterSize)), 0,
                      kRasterSize - 1);
  }

  // Ink accumulates: overlapping strokes (fused fingers, collapsed chains,
  // a fingertip folded back over its own bone) render denser, the way
  // overlapping anatomy shades in schematic drawings. quantize() clamps.
  void deposit(int x, int y, double dist, double radius, double intensity) {
    const double cov = std::clamp((radius + kAaWidth - dist) / kAaWidth, 0.0, 1.0);
    value_[y * kRasterSize + x] += static_cast<float>(cov * intensity);
  }

  std::array<float, kRasterPixels> value_;
};

// ---------------------------------------------------------------------------
// Texture-level operators (raster only; keypoints are never touched).
// ---------------------------------------------------------------------------

inline Raster gaussian_blur(const Raster& in, double sigma_px) {
  if (sigma_px <= 1e-6) return in;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_px)));
  std::vector<double> kernel(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double w = std::exp(-0.5 * (i * i) / (sigma_px * sigma_px));
    kernel[i + radius] = w;
    sum += w;
  }
  for (double& w : kernel) w /= sum;

  const auto clampi = [](int v) { return std::clamp(v, 0, kRasterSize - 1); };
  std::array<double, kRasterPixels> tmp{};
  for (int y = 0; y < kRasterSize; ++y) {
    for (int x = 0; x < kRasterSize; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[i + radius] * in.at(clampi(x + i), y);
      }
      tmp[y * kRasterSize + x] = acc;
    }
  }
  Raster out;
  for (int y = 0; y < kRasterSize; ++y) {
    for (int x = 0; x < kRasterSize; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) {
        acc += kernel[i + radius] * tmp[clampi(y + i) * kRasterSize + x];
      }
      out.at(x, y) =
          static_cast<std::uint8_t>(std::clamp(std::lround(acc), 0L, 255L));
    }
  }
  return out;
}

// Replaces a `density` fraction of pixels with uniform noise. Two draws are
// consumed per pixel regardless of density so the stream position (and with
// it byte-level determinism) does not depend on the magnitude.
inline void add_speckle(Raster& r, double density, RngStream& rng) {
  for (int i = 0; i < kRasterPixels; ++i) {
    const double u = rng.uniform();
    const auto v = static_cast<std::uint8_t>(rng.uniform_int(256));
    if (u < density) r.px[i] = v;
  }
}

// Additive horizontal banding, a cheap stand-in for the periodic artifacts
// diffusion models leave in flat regions.
inline void add_banding(Raster& r, double amplitude, double cycles,
                        double phase) {
  if (amplitude <= 0.0) return;
  for (int y = 0; y < kRasterSize; ++y) {
    const double band =
        amplitude * std::sin(2.0 * kPi * cycles * y / kRasterSize + phase);
    const long delta = std::lround(band);
    for (int x = 0; x < kRasterSize; ++x) {
      r.at(x, y) = static_cast<std::uint8_t>(
          std::clamp(static_cast<long>(r.at(x, y)) + delta, 0L, 255L));
    }
  }
}

// ---------------------------------------------------------------------------
// Binary PGM (P5), 64x64, maxval 255.
// ---------------------------------------------------------------------------

inline std::string to_pgm(const Raster& r) {
  std::string out = "P5\n64 64\n255\n";
  out.append(reinterpret_cast<const char*>(r.px.data()), kRasterPixels);
  return out;
}

inline Raster raster_from_pgm(const std::string& bytes,
                              const std::string& origin) {
  const std::string header = "P5\n64 64\n255\n";
  if (bytes.size() != header.size() + kRasterPixels ||
      bytes.compare(0, header.size(), header) != 0) {
    throw DataError(origin + ": not a 64x64 binary PGM with maxval 255");
  }
  Raster r;
  std::memcpy(r.px.data(), bytes.data() + header.size(), kRasterPixels);
  return r;
}

inline void write_pgm(const std::filesystem::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError(path.string() + ": cannot open for writing");
  const std::string bytes = to_pgm(r);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError(path.string() + ": write failed");
}

inline Raster read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string() + ": cannot open");
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return raster_from_pgm(bytes, path.string());
}

}  // namespace handqa
