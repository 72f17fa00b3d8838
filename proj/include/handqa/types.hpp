#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "handqa/errors.hpp"
#include "handqa/geometry.hpp"
#include "handqa/raster.hpp"

namespace handqa {

enum class Label : std::uint8_t { good, bad };

inline const char* label_name(Label l) {
  return l == Label::good ? "good" : "bad";
}

inline Label label_from_name(const std::string& s, const std::string& origin) {
  if (s == "good") return Label::good;
  if (s == "bad") return Label::bad;
  throw DataError(origin + ": unknown label '" + s + "'");
}

// The six defect categories of degraded hand images.
enum class Defect : std::uint8_t {
  missing,       // fingers collapsed into the palm / anatomy absent
  redundancy,    // extra finger rendered (keypoint report stays 21)
  proportional,  // one finger's bones scaled far out of proportion
  deformation,   // unnatural PIP bend, optionally out of the finger plane
  fusion,        // adjacent fingers pulled together until they merge
  texture,       // raster-level blur / speckle / banding
};

inline constexpr int kDefectCount = 6;

inline const std::array<const char*, kDefectCount> kDefectNames = {
    "missing", "redundancy", "proportional", "deformation", "fusion",
    "texture"};

inline const char* defect_name(Defect d) {
  return kDefectNames[static_cast<int>(d)];
}

inline Defect defect_from_name(const std::string& s,
                               const std::string& origin) {
  for (int i = 0; i < kDefectCount; ++i) {
    if (s == kDefectNames[i]) return static_cast<Defect>(i);
  }
  throw DataError(origin + ": unknown defect '" + s + "'");
}

// Object held by the hand in interaction scenes, composited into the raster
// of both records of a pair. Generation-time metadata; not persisted.
struct Occluder {
  double cx{0.0}, cy{0.0};
  double radius{0.0};
  double gray{0.0};  // intensity in [0, 1]
};

// Sensor-style grain shared by both rasters of a pair: source photos are not
// noise free, and a pristine clean plate would hand the scorer a shortcut
// that no real crop offers. Generation-time metadata; not persisted.
struct Grain {
  double blur_sigma_px{0.0};
  double speckle_density{0.0};
  std::uint64_t speckle_seed{0};
};

struct HandRecord {
  HandSkeleton keypoints;
  Raster raster;
  Label label{Label::good};
  std::optional<Occluder> occluder;  // present only on freshly forged records
  std::optional<Grain> grain;
};

// One clean + one degraded record sharing pose, background and severity tier.
struct PairedSample {
  std::string id;
  HandRecord clean;
  HandRecord degraded;
  double severity{0.0};  // one of 0.4, 0.55, 0.7
  std::vector<Defect> defects;
  bool object_interaction{false};
};

inline bool has_defect(const std::vector<Defect>& v, Defect d) {
  return std::find(v.begin(), v.end(), d) != v.end();
}

}  // namespace handqa
