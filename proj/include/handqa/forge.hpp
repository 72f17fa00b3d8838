#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "handqa/geometry.hpp"
#include "handqa/raster.hpp"
#include "handqa/rng.hpp"
#include "handqa/types.hpp"

namespace handqa {

// ===========================================================================
// Synthetic HandPair forge.
//
// Clean hands are sampled from a parametric 21-joint template: per-bone
// length jitter up to 10%, uniform global orientation, per-finger PIP flexion
// drawn inside anatomical ranges (non-thumb >= 60 deg, thumb >= 80 deg,
// biased toward extension when the hand holds an object). Degraded partners
// are produced by categorized operators at three severity tiers mirroring
// control strengths 0.4 / 0.55 / 0.7: 0.4 is structure-dominant, 0.7 is
// texture-dominant, 0.55 sits in between.
//
// Every sample derives its own RNG stream from (seed, pair index), so
// generation is order-independent and byte-deterministic.
// ===========================================================================

inline constexpr std::array<double, 3> kSeverityTiers = {0.4, 0.55, 0.7};

inline int severity_tier_index(double severity) {
  for (int i = 0; i < 3; ++i) {
    if (severity == kSeverityTiers[i]) return i;
  }
  throw std::invalid_argument("severity must be one of 0.4, 0.55, 0.7");
}

// ---------------------------------------------------------------------------
// Clean-hand sampling.
// ---------------------------------------------------------------------------

namespace detail {

struct FingerTemplate {
  Vec3 base;                      // MCP (thumb: CMC) position, palm units
  Vec3 dir;                       // proximal bone direction, unnormalized
  std::array<double, 3> seg_len;  // three distal segment lengths
};

// Right-hand template, wrist at the origin, fingers toward +y, palm facing
// -z. Left hands mirror x.
inline const std::array<FingerTemplate, kFingerCount>& finger_templates() {
  static const std::array<FingerTemplate, kFingerCount> t = {{
      {{-0.35, 0.22, 0.00}, {-0.80, 0.60, 0.05}, {0.34, 0.30, 0.24}},  // thumb
      {{-0.22, 1.00, 0.00}, {-0.08, 1.00, 0.00}, {0.42, 0.24, 0.18}},  // index
      {{0.00, 1.04, 0.00}, {0.00, 1.00, 0.00}, {0.46, 0.28, 0.20}},    // middle
      {{0.20, 0.99, 0.00}, {0.09, 1.00, 0.00}, {0.42, 0.26, 0.19}},    // ring
      {{0.38, 0.88, 0.00}, {0.20, 1.00, 0.00}, {0.32, 0.20, 0.16}},    // pinky
  }};
  return t;
}

inline Vec3 mirror_x(const Vec3& v, bool mirror) {
  return mirror ? Vec3{-v.x, v.y, v.z} : v;
}

// Unit axis perpendicular to d, lying in the plane spanned by d and the palm
// normal; rotating about it by a positive angle curls the finger toward the
// palm.
inline Vec3 curl_axis(const Vec3& d, const Vec3& palm_normal) {
  return normalized(cross(d, palm_normal));
}

// Uniform rotation from a random unit quaternion.
struct Rotation {
  std::array<std::array<double, 3>, 3> m;

  Vec3 apply(const Vec3& v) const {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
  }
};

inline Rotation random_rotation(RngStream& rng) {
  double w = rng.normal(), x = rng.normal(), y = rng.normal(),
         z = rng.normal();
  const double n = std::sqrt(w * w + x * x + y * y + z * z);
  w /= n;
  x /= n;
  y /= n;
  z /= n;
  Rotation r;
  r.m = {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
          {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
          {2 * (x * z - w * y), 2 * (y * z + w * x),
           1 - 2 * (x * x + y * y)}}};
  return r;
}

}  // namespace detail

struct CleanDraw {
  HandSkeleton skeleton;
  std::optional<Occluder> occluder;
  Grain grain;
};

// Draws the skeleton for one clean hand. Flexion for non-thumb fingers is
// sampled in [60, 180] degrees and the thumb in [80, 180]; object-holding
// hands bias per-finger flexion into [150, 180] with probability 0.75, since
// grasping extends the fingers in typical interaction scenes.
inline CleanDraw sample_clean_draw(RngStream& rng, bool object_interaction) {
  const bool left = rng.bernoulli(0.5);
  const auto& tpls = detail::finger_templates();

  // Palm normal of the (possibly mirrored) template MCP layout.
  const Vec3 idx_mcp = detail::mirror_x(tpls[1].base, left);
  const Vec3 pky_mcp = detail::mirror_x(tpls[4].base, left);
  const Vec3 palm_n = normalized(cross(idx_mcp, pky_mcp));

  std::array<Vec3, kJointCount> j{};
  j[kWrist] = {0.0, 0.0, 0.0};

  for (int f = 0; f < kFingerCount; ++f) {
    const auto& tpl = tpls[f];
    const double mcp_scale = rng.uniform(0.9, 1.1);
    std::array<double, 3> len{};
    for (int i = 0; i < 3; ++i) {
      len[i] = tpl.seg_len[i] * rng.uniform(0.9, 1.1);
    }
    const double lo = (f == 0) ? 80.0 : 60.0;
    double theta;
    if (object_interaction) {
      theta = rng.bernoulli(0.75) ? rng.uniform(150.0, 180.0)
                                  : rng.uniform(lo, 180.0);
    } else {
      theta = rng.uniform(lo, 180.0);
    }
    const double base_bend = rng.uniform(0.0, (f == 0) ? 30.0 : 35.0);
    const double abduct = rng.uniform(-6.0, 6.0);
    const double dip_ratio = rng.uniform(0.4, 0.8);

    const Vec3 base = detail::mirror_x(tpl.base, left) * mcp_scale;
    Vec3 dir = normalized(detail::mirror_x(tpl.dir, left));
    dir = rotate_about(dir, palm_n, abduct);
    const Vec3 axis0 = detail::curl_axis(dir, palm_n);
    const Vec3 d1 = rotate_about(dir, axis0, base_bend);
    const Vec3 axis1 = detail::curl_axis(d1, palm_n);
    const double beta = 180.0 - theta;  // bend magnitude at the measured joint
    // The flexion angle is measured at chain[1] for non-thumb fingers and at
    // chain[2] for the thumb, so the sampled bend lands on that joint and the
    // other distal joint follows at dip_ratio of it.
    const double bend12 = (f == 0) ? dip_ratio * beta : beta;
    const double bend23 = (f == 0) ? beta : dip_ratio * beta;
    const Vec3 d2 = rotate_about(d1, axis1, bend12);
    const Vec3 d3 = rotate_about(d2, axis1, bend23);

    const int b = 1 + 4 * f;
    j[b] = base;
    j[b + 1] = j[b] + d1 * len[0];
    j[b + 2] = j[b + 1] + d2 * len[1];
    j[b + 3] = j[b + 2] + d3 * len[2];
  }

  const detail::Rotation rot = detail::random_rotation(rng);
  for (auto& p : j) p = rot.apply(p);

  const double scale = rng.uniform(0.22, 0.30);
  const Vec3 center{0.5 + rng.uniform(-0.04, 0.04),
                    0.5 + rng.uniform(-0.04, 0.04), 0.0};
  Vec3 centroid{};
  for (const auto& p : j) centroid += p * (1.0 / kJointCount);
  for (auto& p : j) p = center + (p - centroid) * scale;

  CleanDraw draw;
  draw.skeleton.joints = j;
  draw.skeleton.handedness = left ? Handedness::left : Handedness::right;

  if (object_interaction) {
    Vec3 tips{};
    for (int f = 0; f < kFingerCount; ++f) {
      tips += draw.skeleton.joints[4 + 4 * f] * (1.0 / kFingerCount);
    }
    Occluder occ;
    occ.cx = tips.x + rng.uniform(-0.02, 0.02);
    occ.cy = tips.y + rng.uniform(-0.02, 0.02);
    occ.radius = rng.uniform(0.06, 0.11);
    occ.gray = rng.uniform(0.5, 0.8);
    draw.occluder = occ;
  }
  draw.grain.blur_sigma_px = rng.uniform(0.0, 1.1);
  draw.grain.speckle_density = rng.uniform(0.0, 0.05);
  draw.grain.speckle_seed = rng.bits();
  return draw;
}

inline Raster apply_grain(Raster r, const Grain& g) {
  r = gaussian_blur(r, g.blur_sigma_px);
  RngStream sp(g.speckle_seed);
  add_speckle(r, g.speckle_density, sp);
  return r;
}

// Ink levels leave headroom under the clamp so overlapping geometry reads
// as denser tissue.
inline constexpr double kBoneInk = 0.50;
inline constexpr double kJointInk = 0.35;

// Ghost finger overlay used by the structural-redundancy defect: the chain is
// duplicated in the image plane, rotated about its MCP. Keypoints stay 21.
struct GhostFinger {
  int finger{0};
  double angle_deg{0.0};
};

inline Raster render_hand(const HandSkeleton& skel,
                          const std::optional<Occluder>& occluder,
                          const std::optional<GhostFinger>& ghost = {}) {
  Canvas canvas;
  if (occluder) {
    canvas.fill_disk(occluder->cx, occluder->cy, occluder->radius,
                     occluder->gray);
  }
  const auto& topo = HandTopology::standard();
  for (const auto& [a, b] : topo.edges) {
    canvas.stroke_segment(skel.joints[a].x, skel.joints[a].y, skel.joints[b].x,
                          skel.joints[b].y, kStrokeRadius, kBoneInk);
  }
  for (const auto& p : skel.joints) {
    canvas.fill_disk(p.x, p.y, kJointRadius, kJointInk);
  }
  if (ghost) {
    const auto& chain = topo.finger_chains[ghost->finger];
    const Vec3 mcp = skel.joints[chain[0]];
    const double a = ghost->angle_deg * kPiOver180;
    const double ca = std::cos(a), sa = std::sin(a);
    std::array<Vec3, 4> pts{};
    for (int i = 0; i < 4; ++i) {
      const Vec3 d = skel.joints[chain[i]] - mcp;
      pts[i] = {mcp.x + ca * d.x - sa * d.y, mcp.y + sa * d.x + ca * d.y, 0.0};
    }
    for (int i = 0; i + 1 < 4; ++i) {
      canvas.stroke_segment(pts[i].x, pts[i].y, pts[i + 1].x, pts[i + 1].y,
                            kStrokeRadius, kBoneInk);
      canvas.fill_disk(pts[i + 1].x, pts[i + 1].y, kJointRadius, kJointInk);
    }
  }
  return canvas.quantize();
}

inline HandRecord sample_clean_hand(RngStream& rng, bool object_interaction) {
  const CleanDraw draw = sample_clean_draw(rng, object_interaction);
  HandRecord rec;
  rec.keypoints = draw.skeleton;
  rec.occluder = draw.occluder;
  rec.grain = draw.grain;
  rec.raster = apply_grain(render_hand(draw.skeleton, draw.occluder), draw.grain);
  rec.label = Label::good;
  return rec;
}

// ---------------------------------------------------------------------------
// Degradation operators.
//
// A DegradationPlan freezes every sampled parameter, so re-applying the same
// plan is deterministic and the continuous operators (proportional,
// deformation, fusion, texture) can be re-applied at any magnitude
// m in [0, 1], with m = 0 the identity and m = 1 the full defect. That
// magnitude axis is what quality-guided improvement descends along.
// ---------------------------------------------------------------------------

struct MissingParams {
  int finger{0};
  std::uint64_t jitter_seed{0};
};

struct RedundancyParams {
  int finger{0};
  double angle_deg{0.0};
};

struct ProportionalParams {
  int finger{0};
  double scale{1.0};  // full-magnitude bone-length factor
};

struct DeformationParams {
  int finger{0};
  double target_pip_deg{20.0};   // full-magnitude PIP angle, always < 30
  double follow_ratio{0.6};      // distal joint continues the curl
  double out_of_plane_deg{0.0};  // extra DIP-level bend out of the plane
};

// Adjacent non-thumb pairs: 0 index-middle, 1 middle-ring, 2 ring-pinky.
struct FusionParams {
  int pair{0};
};

struct TextureParams {
  double blur_sigma_px{0.0};
  double speckle_density{0.0};
  double band_amplitude{0.0};
  double band_cycles{3.0};
  double band_phase{0.0};
  std::uint64_t speckle_seed{0};
};

struct DegradationPlan {
  double severity{0.55};
  std::optional<MissingParams> missing;
  std::optional<RedundancyParams> redundancy;
  std::optional<ProportionalParams> proportional;
  std::optional<DeformationParams> deformation;
  std::optional<FusionParams> fusion;
  std::optional<TextureParams> texture;

  std::vector<Defect> defects() const {
    std::vector<Defect> v;
    if (missing) v.push_back(Defect::missing);
    if (redundancy) v.push_back(Defect::redundancy);
    if (proportional) v.push_back(Defect::proportional);
    if (deformation) v.push_back(Defect::deformation);
    if (fusion) v.push_back(Defect::fusion);
    if (texture) v.push_back(Defect::texture);
    return v;
  }

  // True when every active operator admits a continuous magnitude.
  bool continuous() const { return !missing && !redundancy; }

  int continuous_op_count() const {
    return (proportional ? 1 : 0) + (deformation ? 1 : 0) + (fusion ? 1 : 0) +
           (texture ? 1 : 0);
  }
};

namespace detail {

// Separation two fused joints are pulled down to at full magnitude;
// comfortably below the 0.015 postcondition bound.
inline constexpr double kFusionTargetSep = 0.010;
inline constexpr double kMissingJitterRadius = 0.008;

inline std::array<int, 2> fusion_pair_fingers(int pair) {
  return {pair + 1, pair + 2};
}

inline void apply_missing(HandSkeleton& s, const HandSkeleton& clean,
                          const HandTopology& topo, const MissingParams& p,
                          double m) {
  const auto& chain = topo.finger_chains[p.finger];
  RngStream jr(p.jitter_seed);
  const Vec3 anchor = s.joints[chain[0]];
  for (int i = 1; i < 4; ++i) {
    Vec3 dir{jr.normal(), jr.normal(), jr.normal()};
    const double r = kMissingJitterRadius * std::cbrt(jr.uniform());
    const double n = norm(dir);
    const Vec3 offset = (n > 1e-12) ? dir * (r / n) : Vec3{};
    s.joints[chain[i]] = lerp(clean.joints[chain[i]], anchor + offset, m);
  }
}

inline void apply_proportional(HandSkeleton& s, const HandTopology& topo,
                               const ProportionalParams& p, double m) {
  const auto& chain = topo.finger_chains[p.finger];
  const double factor = std::exp(m * std::log(p.scale));
  std::array<Vec3, 3> segs{};
  for (int i = 1; i < 4; ++i) {
    segs[i - 1] = s.joints[chain[i]] - s.joints[chain[i - 1]];
  }
  Vec3 cursor = s.joints[chain[0]];
  for (int i = 1; i < 4; ++i) {
    cursor += segs[i - 1] * factor;
    s.joints[chain[i]] = cursor;
  }
}

inline void apply_deformation(HandSkeleton& s, const HandTopology& topo,
                              const DeformationParams& p, double m) {
  const auto& chain = topo.finger_chains[p.finger];
  const int pv = (p.finger == 0) ? 2 : 1;  // measured joint within the chain
  const Vec3 pivot = s.joints[chain[pv]];
  const Vec3 u = s.joints[chain[pv - 1]] - pivot;
  const Vec3 v = s.joints[chain[pv + 1]] - pivot;
  if (norm(u) < kDegenerateLength || norm(v) < kDegenerateLength) return;

  const double theta0 = angle_between_deg(u, v);
  const double theta_m = theta0 + m * (p.target_pip_deg - theta0);
  const Vec3 uh = normalized(u);
  Vec3 w = v - uh * dot(v, uh);
  if (norm(w) < 1e-9) {
    const Vec3 e = (std::abs(uh.x) < 0.9) ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
    w = cross(uh, e);
  }
  const Vec3 wh = normalized(w);
  const Vec3 nh = cross(uh, wh);  // rotating about nh increases angle(u, .)
  const double delta = theta_m - theta0;
  for (int i = pv + 1; i < 4; ++i) {
    s.joints[chain[i]] = pivot + rotate_about(s.joints[chain[i]] - pivot, nh, delta);
  }
  // The joint past the pivot keeps curling in the same plane, so at full
  // magnitude the distal chain wraps back over the proximal bone.
  if (pv + 2 < 4 && p.follow_ratio != 0.0) {
    const Vec3 dip0 = s.joints[chain[pv + 1]];
    const double follow = p.follow_ratio * delta;
    for (int i = pv + 2; i < 4; ++i) {
      s.joints[chain[i]] = dip0 + rotate_about(s.joints[chain[i]] - dip0, nh, follow);
    }
  }

  if (p.out_of_plane_deg != 0.0 && pv + 2 < 4) {
    const Vec3 dip = s.joints[chain[pv + 1]];
    const Vec3 bone = dip - pivot;
    if (norm(bone) > kDegenerateLength) {
      const Vec3 axis = normalized(cross(nh, normalized(bone)));
      const double phi = m * p.out_of_plane_deg;
      for (int i = pv + 2; i < 4; ++i) {
        s.joints[chain[i]] = dip + rotate_about(s.joints[chain[i]] - dip, axis, phi);
      }
    }
  }
}

inline void apply_fusion(HandSkeleton& s, const HandTopology& topo,
                         const FusionParams& p, double m) {
  const auto [fa, fb] = fusion_pair_fingers(p.pair);
  const auto& ca = topo.finger_chains[fa];
  const auto& cb = topo.finger_chains[fb];
  for (int k = 0; k < 4; ++k) {
    const Vec3 a = s.joints[ca[k]];
    const Vec3 b = s.joints[cb[k]];
    const double d0 = norm(a - b);
    if (d0 < 1e-12) continue;
    const double pull = std::clamp(1.0 - kFusionTargetSep / d0, 0.0, 1.0);
    const Vec3 mid = (a + b) * 0.5;
    s.joints[ca[k]] = lerp(a, mid, m * pull);
    s.joints[cb[k]] = lerp(b, mid, m * pull);
  }
}

}  // namespace detail

inline HandSkeleton apply_structural(const HandSkeleton& clean,
                                     const HandTopology& topo,
                                     const DegradationPlan& plan,
                                     double magnitude) {
  HandSkeleton s = clean;
  if (plan.missing) {
    detail::apply_missing(s, clean, topo, *plan.missing, magnitude);
  }
  if (plan.proportional) {
    detail::apply_proportional(s, topo, *plan.proportional, magnitude);
  }
  if (plan.deformation) {
    detail::apply_deformation(s, topo, *plan.deformation, magnitude);
  }
  if (plan.fusion) {
    detail::apply_fusion(s, topo, *plan.fusion, magnitude);
  }
  return s;
}

inline HandRecord apply_degradation(const HandRecord& clean,
                                    const HandTopology& topo,
                                    const DegradationPlan& plan,
                                    double magnitude = 1.0) {
  HandRecord out;
  out.label = Label::bad;
  out.occluder = clean.occluder;
  out.grain = clean.grain;
  out.keypoints = apply_structural(clean.keypoints, topo, plan, magnitude);

  std::optional<GhostFinger> ghost;
  if (plan.redundancy && magnitude > 0.0) {
    ghost = GhostFinger{plan.redundancy->finger, plan.redundancy->angle_deg};
  }
  out.raster = render_hand(out.keypoints, clean.occluder, ghost);
  if (clean.grain) out.raster = apply_grain(out.raster, *clean.grain);

  if (plan.texture) {
    const auto& t = *plan.texture;
    out.raster = gaussian_blur(out.raster, magnitude * t.blur_sigma_px);
    RngStream sp(t.speckle_seed);
    add_speckle(out.raster, magnitude * t.speckle_density, sp);
    add_banding(out.raster, magnitude * t.band_amplitude, t.band_cycles,
                t.band_phase);
  }
  return out;
}

// Samples operator parameters for the requested defect set at the given
// severity tier. Structural operators are assigned disjoint fingers (the
// fusion pair is reserved first) so each operator's postcondition remains
// independently checkable on the degraded skeleton.
inline DegradationPlan make_degradation_plan(std::span<const Defect> defects,
                                             double severity, RngStream& rng) {
  const int tier = severity_tier_index(severity);
  if (defects.empty()) {
    throw std::invalid_argument("degradation requires a nonempty defect set");
  }
  bool want[kDefectCount] = {};
  for (Defect d : defects) {
    if (want[static_cast<int>(d)]) {
      throw std::invalid_argument("duplicate defect in set");
    }
    want[static_cast<int>(d)] = true;
  }
  const int structural = (want[0] ? 1 : 0) + (want[1] ? 1 : 0) +
                         (want[2] ? 1 : 0) + (want[3] ? 1 : 0) +
                         (want[4] ? 1 : 0);
  const int max_structural = (tier == 2) ? 1 : 3;
  if (structural > max_structural) {
    throw std::invalid_argument(
        "defect set inconsistent with severity policy: too many structural "
        "operators for this tier");
  }

  DegradationPlan plan;
  plan.severity = severity;

  std::vector<int> pool = {0, 1, 2, 3, 4};
  if (want[static_cast<int>(Defect::fusion)]) {
    const int pair = static_cast<int>(rng.uniform_int(3));
    plan.fusion = FusionParams{pair};
    const auto [fa, fb] = detail::fusion_pair_fingers(pair);
    std::erase(pool, fa);
    std::erase(pool, fb);
  }
  rng.shuffle(pool);
  std::size_t next = 0;
  const auto take_finger = [&]() { return pool.at(next++); };

  if (want[static_cast<int>(Defect::missing)]) {
    plan.missing = MissingParams{take_finger(), rng.bits()};
  }
  if (want[static_cast<int>(Defect::redundancy)]) {
    static constexpr double lo[3] = {18.0, 14.0, 10.0};
    static constexpr double hi[3] = {25.0, 20.0, 16.0};
    const double mag = rng.uniform(lo[tier], hi[tier]);
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    plan.redundancy = RedundancyParams{take_finger(), sign * mag};
  }
  if (want[static_cast<int>(Defect::proportional)]) {
    static constexpr double shrink_lo[3] = {0.40, 0.45, 0.55};
    static constexpr double shrink_hi[3] = {0.50, 0.60, 0.70};
    static constexpr double grow_lo[3] = {1.90, 1.60, 1.50};
    static constexpr double grow_hi[3] = {2.20, 2.00, 1.70};
    const bool shrink = rng.bernoulli(0.5);
    const double scale = shrink ? rng.uniform(shrink_lo[tier], shrink_hi[tier])
                                : rng.uniform(grow_lo[tier], grow_hi[tier]);
    plan.proportional = ProportionalParams{take_finger(), scale};
  }
  if (want[static_cast<int>(Defect::deformation)]) {
    static constexpr double tgt_lo[3] = {4.0, 12.0, 20.0};
    static constexpr double tgt_hi[3] = {12.0, 24.0, 28.0};
    static constexpr double oop_prob[3] = {0.0, 0.4, 0.3};
    static constexpr double oop_lo[3] = {40.0, 30.0, 30.0};
    static constexpr double oop_hi[3] = {60.0, 50.0, 40.0};
    DeformationParams d;
    d.finger = take_finger();
    d.target_pip_deg = rng.uniform(tgt_lo[tier], tgt_hi[tier]);
    d.follow_ratio = rng.uniform(0.5, 0.8);
    d.out_of_plane_deg =
        rng.bernoulli(oop_prob[tier]) ? rng.uniform(oop_lo[tier], oop_hi[tier])
                                      : 0.0;
    plan.deformation = d;
  }
  if (want[static_cast<int>(Defect::texture)]) {
    static constexpr double sig_lo[3] = {1.0, 1.2, 1.8};
    static constexpr double sig_hi[3] = {1.4, 1.9, 2.5};
    static constexpr double den_lo[3] = {0.05, 0.08, 0.12};
    static constexpr double den_hi[3] = {0.08, 0.14, 0.20};
    static constexpr double amp_lo[3] = {8.0, 10.0, 16.0};
    static constexpr double amp_hi[3] = {14.0, 20.0, 30.0};
    TextureParams t;
    t.blur_sigma_px = rng.uniform(sig_lo[tier], sig_hi[tier]);
    t.speckle_density = rng.uniform(den_lo[tier], den_hi[tier]);
    t.band_amplitude = rng.uniform(amp_lo[tier], amp_hi[tier]);
    t.band_cycles = rng.uniform(2.0, 5.0);
    t.band_phase = rng.uniform(0.0, 2.0 * kPi);
    t.speckle_seed = rng.bits();
    plan.texture = t;
  }
  return plan;
}

inline HandRecord degrade(const HandRecord& clean, double severity,
                          std::span<const Defect> defects, RngStream& rng) {
  if (clean.label != Label::good) {
    throw std::invalid_argument("degrade expects a clean (good) record");
  }
  const DegradationPlan plan = make_degradation_plan(defects, severity, rng);
  return apply_degradation(clean, HandTopology::standard(), plan, 1.0);
}

// ---------------------------------------------------------------------------
// Dataset assembly.
// ---------------------------------------------------------------------------

struct ForgeConfig {
  std::uint64_t pair_count{1000};
  std::uint64_t seed{0};
  double object_prob{0.6514};
};

// Severity-tier mix. Weighted toward the structure-dominant tiers so the six
// defect categories come out with comparable prevalence (texture would
// otherwise dwarf the rest, since every 0.7-tier sample carries it).
inline constexpr std::array<double, 3> kTierWeights = {0.5, 0.3, 0.2};
// Probability that texture accompanies the structural operators, per tier.
inline constexpr std::array<double, 3> kTierTextureProb = {0.3, 0.6, 1.0};
// Expected distinct structural operators per tier (1..3, 1..2, 0.6).
inline constexpr std::array<double, 3> kTierStructuralMean = {2.0, 1.5, 0.6};

inline int sample_tier(RngStream& rng) {
  const double u = rng.uniform();
  if (u < kTierWeights[0]) return 0;
  if (u < kTierWeights[0] + kTierWeights[1]) return 1;
  return 2;
}

// Defect-set policy per severity tier:
//   0.4  -> 1..3 structural operators (uniform), texture w.p. 0.3 (light)
//   0.55 -> 1..2 structural operators, texture w.p. 0.6 (moderate)
//   0.7  -> texture always (heavy), one mild structural operator w.p. 0.6
// Tiers are drawn uniformly. The expected per-category frequencies implied by
// this policy are the configured targets dataset statistics are checked
// against.
inline std::vector<Defect> sample_defect_set(int tier, RngStream& rng) {
  int structural_k = 0;
  switch (tier) {
    case 0:
      structural_k = 1 + static_cast<int>(rng.uniform_int(3));
      break;
    case 1:
      structural_k = 1 + static_cast<int>(rng.uniform_int(2));
      break;
    default:
      structural_k = rng.bernoulli(0.6) ? 1 : 0;
      break;
  }
  const bool texture = rng.bernoulli(kTierTextureProb[tier]);
  std::vector<int> cats = {0, 1, 2, 3, 4};
  rng.shuffle(cats);
  std::vector<Defect> out;
  for (int i = 0; i < structural_k; ++i) {
    out.push_back(static_cast<Defect>(cats[i]));
  }
  if (texture) out.push_back(Defect::texture);
  std::sort(out.begin(), out.end());
  return out;
}

// Expected frequency of each defect category among degraded records, implied
// by the tier mix and per-tier policy above.
inline std::array<double, kDefectCount> defect_frequency_targets() {
  double structural = 0.0;
  double texture = 0.0;
  for (int t = 0; t < 3; ++t) {
    structural += kTierWeights[t] * kTierStructuralMean[t] / 5.0;
    texture += kTierWeights[t] * kTierTextureProb[t];
  }
  return {structural, structural, structural, structural, structural, texture};
}

inline PairedSample generate_pair(const ForgeConfig& cfg, std::uint64_t index) {
  RngStream rng = derive_stream(cfg.seed, "forge.pair", index);
  const bool object = rng.bernoulli(cfg.object_prob);
  const int tier = sample_tier(rng);
  const double severity = kSeverityTiers[tier];
  const std::vector<Defect> defects = sample_defect_set(tier, rng);

  PairedSample sample;
  char idbuf[16];
  std::snprintf(idbuf, sizeof(idbuf), "p%07llu",
                static_cast<unsigned long long>(index));
  sample.id = idbuf;
  sample.severity = severity;
  sample.defects = defects;
  sample.object_interaction = object;
  sample.clean = sample_clean_hand(rng, object);

  const DegradationPlan plan = make_degradation_plan(defects, severity, rng);
  sample.degraded =
      apply_degradation(sample.clean, HandTopology::standard(), plan, 1.0);
  return sample;
}

inline std::vector<PairedSample> generate_samples(const ForgeConfig& cfg) {
  if (cfg.pair_count < 1) {
    throw std::invalid_argument("pair_count must be >= 1");
  }
  std::vector<PairedSample> out;
  out.reserve(cfg.pair_count);
  for (std::uint64_t i = 0; i < cfg.pair_count; ++i) {
    out.push_back(generate_pair(cfg, i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset statistics (flexion and palm-orientation histograms over clean
// records, defect proportions over degraded ones).
// ---------------------------------------------------------------------------

inline constexpr int kAngleBins = 12;  // 15-degree bins over [0, 180]

inline int angle_bin(double deg) {
  return std::clamp(static_cast<int>(deg / 15.0), 0, kAngleBins - 1);
}

struct DatasetStatistics {
  std::size_t pair_count{0};
  std::array<std::array<std::uint64_t, kAngleBins>, kFingerCount>
      flexion_hist{};
  std::array<std::uint64_t, kFingerCount> flexion_undefined{};
  std::array<std::uint64_t, kAngleBins> palm_hist{};
  std::uint64_t palm_undefined{0};
  std::array<std::uint64_t, kDefectCount> defect_counts{};
  std::uint64_t object_count{0};

  double object_fraction() const {
    return pair_count ? static_cast<double>(object_count) / pair_count : 0.0;
  }
  std::array<double, kDefectCount> defect_proportions() const {
    std::array<double, kDefectCount> p{};
    for (int i = 0; i < kDefectCount; ++i) {
      p[i] = pair_count ? static_cast<double>(defect_counts[i]) / pair_count
                        : 0.0;
    }
    return p;
  }
};

inline DatasetStatistics dataset_statistics(
    std::span<const PairedSample> samples) {
  if (samples.empty()) {
    throw std::invalid_argument("dataset statistics require samples");
  }
  const auto& topo = HandTopology::standard();
  DatasetStatistics st;
  st.pair_count = samples.size();
  for (const auto& s : samples) {
    const FingerAngles angles = pip_flexion_angles(s.clean.keypoints, topo);
    for (int f = 0; f < kFingerCount; ++f) {
      if (angles[f]) {
        ++st.flexion_hist[f][angle_bin(*angles[f])];
      } else {
        ++st.flexion_undefined[f];
      }
    }
    try {
      ++st.palm_hist[angle_bin(palm_orientation(s.clean.keypoints))];
    } catch (const std::domain_error&) {
      ++st.palm_undefined;
    }
    for (Defect d : s.defects) ++st.defect_counts[static_cast<int>(d)];
    if (s.object_interaction) ++st.object_count;
  }
  return st;
}

}  // namespace handqa
