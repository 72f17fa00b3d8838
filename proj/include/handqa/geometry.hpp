#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>

namespace handqa {

// ---------------------------------------------------------------------------
// Canonical 21-joint hand skeleton in the standard landmark order:
//   0 wrist; 1-4 thumb (CMC, MCP, IP, TIP); 5-8 index, 9-12 middle,
//   13-16 ring, 17-20 pinky (each MCP, PIP, DIP, TIP).
// Coordinates are normalized image coordinates: x, y nominally in [0, 1]
// (degradations may push joints slightly out of frame), z is relative depth.
// ---------------------------------------------------------------------------

inline constexpr int kJointCount = 21;
inline constexpr int kFingerCount = 5;
inline constexpr int kWrist = 0;
inline constexpr int kIndexMcp = 5;
inline constexpr int kPinkyMcp = 17;

// Bones shorter than this (normalized units) have no usable direction.
inline constexpr double kDegenerateLength = 1e-9;

struct Vec3 {
  double x{0.0}, y{0.0}, z{0.0};

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) {
    x += o.x;
    y += o.y;
    z += o.z;
    return *this;
  }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline double dot(const Vec3& a, const Vec3& b) {
  return a.x * b.x + a.y * b.y + a.z * b.z;
}

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z,
          a.x * b.y - a.y * b.x};
}

inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

inline Vec3 normalized(const Vec3& v) {
  const double n = norm(v);
  if (n < kDegenerateLength) {
    throw std::domain_error("cannot normalize near-zero vector");
  }
  return v * (1.0 / n);
}

inline Vec3 lerp(const Vec3& a, const Vec3& b, double t) {
  return a + (b - a) * t;
}

inline constexpr double kPiOver180 = 3.14159265358979323846 / 180.0;
inline constexpr double k180OverPi = 180.0 / 3.14159265358979323846;

// Rodrigues rotation of v about unit axis k by angle given in degrees.
inline Vec3 rotate_about(const Vec3& v, const Vec3& k, double angle_deg) {
  const double a = angle_deg * kPiOver180;
  const double c = std::cos(a);
  const double s = std::sin(a);
  return v * c + cross(k, v) * s + k * (dot(k, v) * (1.0 - c));
}

enum class Handedness : std::uint8_t { left, right };

struct HandSkeleton {
  std::array<Vec3, kJointCount> joints{};
  Handedness handedness{Handedness::right};
};

// Checks the HandSkeleton invariants: finite coordinates, x and y within
// [-0.5, 1.5]. Throws std::invalid_argument naming the offending joint.
inline void validate_skeleton(const HandSkeleton& s) {
  for (int i = 0; i < kJointCount; ++i) {
    const Vec3& j = s.joints[i];
    if (!std::isfinite(j.x) || !std::isfinite(j.y) || !std::isfinite(j.z)) {
      throw std::invalid_argument("skeleton joint " + std::to_string(i) +
                                  " has non-finite coordinates");
    }
    if (j.x < -0.5 || j.x > 1.5 || j.y < -0.5 || j.y > 1.5) {
      throw std::invalid_argument("skeleton joint " + std::to_string(i) +
                                  " outside the [-0.5, 1.5] frame band");
    }
  }
}

// Fixed bone tree over the 21 joints plus the per-finger chains and the
// (prev, pivot, next) triples used for flexion measurement. The triple for a
// non-thumb finger is (MCP, PIP, DIP); the thumb uses (2, 3, 4), i.e. the
// angle at its interphalangeal joint.
struct HandTopology {
  std::array<std::pair<int, int>, 20> edges;
  std::array<std::array<int, 4>, kFingerCount> finger_chains;
  std::array<std::array<int, 3>, kFingerCount> pip_triples;

  static const HandTopology& standard() {
    static const HandTopology t = [] {
      HandTopology topo;
      int e = 0;
      for (int f = 0; f < kFingerCount; ++f) {
        const int base = 1 + 4 * f;
        topo.edges[e++] = {0, base};
        topo.edges[e++] = {base, base + 1};
        topo.edges[e++] = {base + 1, base + 2};
        topo.edges[e++] = {base + 2, base + 3};
        topo.finger_chains[f] = {base, base + 1, base + 2, base + 3};
      }
      topo.pip_triples = {{{2, 3, 4},
                           {5, 6, 7},
                           {9, 10, 11},
                           {13, 14, 15},
                           {17, 18, 19}}};
      return topo;
    }();
    return t;
  }
};

inline const std::array<const char*, kFingerCount> kFingerNames = {
    "thumb", "index", "middle", "ring", "pinky"};

// Angle between two vectors in degrees, in [0, 180].
// Throws std::domain_error if either vector is degenerate.
inline double angle_between_deg(const Vec3& u, const Vec3& v) {
  const double nu = norm(u);
  const double nv = norm(v);
  if (nu < kDegenerateLength || nv < kDegenerateLength) {
    throw std::domain_error("angle undefined for zero-length segment");
  }
  const double c = std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
  return std::acos(c) * k180OverPi;
}

// Per-finger PIP flexion angles in degrees (thumb, index, middle, ring,
// pinky). A straight chain measures 180. Fingers whose defining bones are
// degenerate (e.g. collapsed by a structural-missing defect) report nullopt.
using FingerAngles = std::array<std::optional<double>, kFingerCount>;

inline FingerAngles pip_flexion_angles(const HandSkeleton& s,
                                       const HandTopology& topo) {
  FingerAngles out{};
  for (int f = 0; f < kFingerCount; ++f) {
    const auto& [prev, pivot, next] = topo.pip_triples[f];
    const Vec3 u = s.joints[prev] - s.joints[pivot];
    const Vec3 v = s.joints[next] - s.joints[pivot];
    if (norm(u) < kDegenerateLength || norm(v) < kDegenerateLength) {
      out[f] = std::nullopt;
    } else {
      out[f] = angle_between_deg(u, v);
    }
  }
  return out;
}

// Angle between the palm normal (wrist->indexMCP x wrist->pinkyMCP) and the
// image Z axis, in [0, 180]. Throws std::domain_error when the three
// defining joints are collinear.
inline double palm_orientation(const HandSkeleton& s) {
  const Vec3 a = s.joints[kIndexMcp] - s.joints[kWrist];
  const Vec3 b = s.joints[kPinkyMcp] - s.joints[kWrist];
  const Vec3 n = cross(a, b);
  if (norm(n) < 1e-12) {
    throw std::domain_error(
        "palm normal undefined: wrist/index-MCP/pinky-MCP are collinear");
  }
  return angle_between_deg(n, Vec3{0.0, 0.0, 1.0});
}

struct FlexionReport {
  std::array<double, kFingerCount> pip_deg{};
  double palm_deg{0.0};
};

// All five flexion angles plus palm orientation; throws std::domain_error if
// any finger is degenerate. Valid clean-sample skeletons always succeed.
inline FlexionReport flexion_report(const HandSkeleton& s,
                                    const HandTopology& topo) {
  FlexionReport r;
  const FingerAngles angles = pip_flexion_angles(s, topo);
  for (int f = 0; f < kFingerCount; ++f) {
    if (!angles[f]) {
      throw std::domain_error(std::string("flexion undefined for finger ") +
                              kFingerNames[f]);
    }
    r.pip_deg[f] = *angles[f];
  }
  r.palm_deg = palm_orientation(s);
  return r;
}

// ---------------------------------------------------------------------------
// Pixel bounding boxes.
// ---------------------------------------------------------------------------

struct BBox {
  int x0{0}, y0{0}, x1{0}, y1{0};
  int frame_w{0}, frame_h{0};

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

inline void validate_bbox(const BBox& b) {
  if (!(0 <= b.x0 && b.x0 < b.x1 && b.x1 <= b.frame_w && 0 <= b.y0 &&
        b.y0 < b.y1 && b.y1 <= b.frame_h)) {
    throw std::invalid_argument("invalid bounding box");
  }
}

// Same center, width and height scaled by `factor`, rounded to integers and
// clamped to the frame.
inline BBox expand_and_clamp_bbox(const BBox& b, double factor) {
  validate_bbox(b);
  if (factor < 1.0) {
    throw std::invalid_argument("expansion factor must be >= 1");
  }
  const double cx = 0.5 * (b.x0 + b.x1);
  const double cy = 0.5 * (b.y0 + b.y1);
  const double hw = 0.5 * b.width() * factor;
  const double hh = 0.5 * b.height() * factor;
  BBox out = b;
  out.x0 = std::max(0, static_cast<int>(std::llround(cx - hw)));
  out.y0 = std::max(0, static_cast<int>(std::llround(cy - hh)));
  out.x1 = std::min(b.frame_w, static_cast<int>(std::llround(cx + hw)));
  out.y1 = std::min(b.frame_h, static_cast<int>(std::llround(cy + hh)));
  return out;
}

inline constexpr int kMinHandSidePx = 80;

inline bool passes_size_filter(const BBox& b) {
  validate_bbox(b);
  return b.width() >= kMinHandSidePx && b.height() >= kMinHandSidePx;
}

}  // namespace handqa
