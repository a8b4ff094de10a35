#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <vector>

#include "dsni/affine.hpp"
#include "dsni/errors.hpp"
#include "dsni/rng.hpp"
#include "dsni/volume.hpp"

namespace dsni {

// Synthetic three-phase abdomen: a soft-tissue body ellipsoid containing two
// kidneys (cortex shell, medulla core, central collecting system) and
// spherical lesions. It supplies exact ground truth (aligned phases, masks,
// inverse misalignment transforms) for every downstream test.

enum class Tissue { Air, Body, Cortex, Medulla, Collecting, Cyst, Mass };

// HU per tissue for (non-contrast, nephrographic, excretory).
using AttenuationTable = std::map<Tissue, std::array<double, 3>>;

inline AttenuationTable default_attenuation_table() {
  return {
      {Tissue::Air, {-1000.0, -1000.0, -1000.0}},
      {Tissue::Body, {-50.0, -45.0, -45.0}},
      {Tissue::Cortex, {30.0, 180.0, 140.0}},
      {Tissue::Medulla, {30.0, 100.0, 140.0}},
      {Tissue::Collecting, {10.0, 80.0, 400.0}},
      {Tissue::Cyst, {62.0, 62.0, 62.0}},
      {Tissue::Mass, {49.0, 122.0, 90.0}},
  };
}

enum class LesionKind { Cyst, Mass };

struct LesionSpec {
  Vec3 center{0, 0, 0};  // voxel coordinates
  double radius = 2.5;   // voxels
  LesionKind kind = LesionKind::Cyst;
};

struct KidneySpec {
  Vec3 center{0, 0, 0};
  Vec3 semi_axes{5, 6, 5};     // voxels
  double medulla_frac = 0.62;  // medulla ellipsoid scale
  double collecting_frac = 0.28;
};

struct PhantomSpec {
  std::array<std::int64_t, 3> dims{32, 32, 16};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<KidneySpec> kidneys;  // empty -> two defaults scaled to dims
  std::vector<LesionSpec> lesions;  // empty -> cyst left, mass right
  AttenuationTable attenuation = default_attenuation_table();
  double noise_sigma_hu = 5.0;
  // Injected misalignment per phase (aligned -> acquired coordinates).
  std::array<AffineTransform, 3> misalignment{};
  int supersample = 2;  // sub-samples per axis for partial-volume edges
  std::uint64_t seed = 0;

  // Defaults derived from dims when kidneys/lesions are not given.
  void fill_defaults() {
    if (kidneys.empty()) {
      const double nx = static_cast<double>(dims[0]);
      const double ny = static_cast<double>(dims[1]);
      const double nz = static_cast<double>(dims[2]);
      const Vec3 axes{0.17 * nx, 0.21 * ny, 0.28 * nz};
      kidneys.push_back({{0.30 * nx, 0.50 * ny, 0.50 * nz}, axes, 0.62, 0.28});
      kidneys.push_back({{0.70 * nx, 0.50 * ny, 0.50 * nz}, axes, 0.62, 0.28});
    }
    if (lesions.empty() && kidneys.size() >= 2) {
      const double r = 0.45 * std::min(kidneys[0].semi_axes[0],
                                       kidneys[0].semi_axes[2]);
      Vec3 c0 = kidneys[0].center;
      c0[1] += 0.35 * kidneys[0].semi_axes[1];
      lesions.push_back({c0, r, LesionKind::Cyst});
      Vec3 c1 = kidneys[1].center;
      c1[1] -= 0.35 * kidneys[1].semi_axes[1];
      lesions.push_back({c1, r, LesionKind::Mass});
    }
  }
};

struct PhantomTruth {
  PhaseTriple aligned;     // HU, perfectly registered
  PhaseTriple misaligned;  // HU, resampled through the injected affines
  CtVolume kidney_mask;    // union of both kidneys (all interior tissues)
  std::vector<CtVolume> lesion_masks;  // interior voxels only, one per lesion
  std::vector<LesionSpec> lesions;
  std::array<AffineTransform, 3> true_affines;  // exact inverses of injection
  AttenuationTable attenuation;
};

namespace detail {

inline double ellipsoid_r2(const Vec3& p, const Vec3& center,
                           const Vec3& axes, double scale = 1.0) {
  const double dx = (p[0] - center[0]) / (axes[0] * scale);
  const double dy = (p[1] - center[1]) / (axes[1] * scale);
  const double dz = (p[2] - center[2]) / (axes[2] * scale);
  return dx * dx + dy * dy + dz * dz;
}

inline Tissue classify(const Vec3& p, const PhantomSpec& spec,
                       const Vec3& body_center, const Vec3& body_axes) {
  for (const LesionSpec& les : spec.lesions) {
    const double dx = p[0] - les.center[0];
    const double dy = p[1] - les.center[1];
    const double dz = p[2] - les.center[2];
    if (dx * dx + dy * dy + dz * dz <= les.radius * les.radius)
      return les.kind == LesionKind::Cyst ? Tissue::Cyst : Tissue::Mass;
  }
  for (const KidneySpec& k : spec.kidneys) {
    const double r2 = ellipsoid_r2(p, k.center, k.semi_axes);
    if (r2 > 1.0) continue;
    if (ellipsoid_r2(p, k.center, k.semi_axes, k.collecting_frac) <= 1.0)
      return Tissue::Collecting;
    if (ellipsoid_r2(p, k.center, k.semi_axes, k.medulla_frac) <= 1.0)
      return Tissue::Medulla;
    return Tissue::Cortex;
  }
  if (ellipsoid_r2(p, body_center, body_axes) <= 1.0) return Tissue::Body;
  return Tissue::Air;
}

}  // namespace detail

inline PhantomTruth generate_phantom(PhantomSpec spec) {
  spec.fill_defaults();
  if (spec.dims[0] <= 0 || spec.dims[1] <= 0 || spec.dims[2] <= 0)
    throw SpecError("phantom dims must be positive");
  if (spec.supersample < 1) throw SpecError("supersample must be >= 1");
  for (Tissue t : {Tissue::Air, Tissue::Body, Tissue::Cortex, Tissue::Medulla,
                   Tissue::Collecting, Tissue::Cyst, Tissue::Mass})
    if (!spec.attenuation.count(t))
      throw SpecError("attenuation table misses a tissue entry");

  // Every lesion must sit strictly inside one kidney.
  for (const LesionSpec& les : spec.lesions) {
    bool inside = false;
    for (const KidneySpec& k : spec.kidneys) {
      const double min_axis =
          std::min({k.semi_axes[0], k.semi_axes[1], k.semi_axes[2]});
      const double r = std::sqrt(detail::ellipsoid_r2(les.center, k.center,
                                                      k.semi_axes));
      if (r + les.radius / min_axis <= 1.0) {
        inside = true;
        break;
      }
    }
    if (!inside) throw SpecError("lesion does not fit inside a kidney");
  }

  const double nx = static_cast<double>(spec.dims[0]);
  const double ny = static_cast<double>(spec.dims[1]);
  const double nz = static_cast<double>(spec.dims[2]);
  const Vec3 body_center{0.5 * nx, 0.5 * ny, 0.5 * nz};
  const Vec3 body_axes{0.47 * nx, 0.47 * ny, 0.60 * nz};

  PhantomTruth truth;
  truth.lesions = spec.lesions;
  truth.attenuation = spec.attenuation;

  CtVolume proto = CtVolume::make(spec.dims, VoxelDomain::HU);
  proto.spacing = spec.spacing;

  // Tissue-mean volumes with partial-volume edges from supersampling.
  std::array<CtVolume, 3> mean;
  for (int ph = 0; ph < 3; ++ph) mean[ph] = proto;

  const int ss = spec.supersample;
  const double step = 1.0 / static_cast<double>(ss);
  const double off = 0.5 * step - 0.5;
  std::size_t i = 0;
  for (std::int64_t z = 0; z < spec.dims[2]; ++z)
    for (std::int64_t y = 0; y < spec.dims[1]; ++y)
      for (std::int64_t x = 0; x < spec.dims[0]; ++x, ++i) {
        std::array<double, 3> acc{0, 0, 0};
        for (int sz = 0; sz < ss; ++sz)
          for (int sy = 0; sy < ss; ++sy)
            for (int sx = 0; sx < ss; ++sx) {
              const Vec3 p{static_cast<double>(x) + off + sx * step,
                           static_cast<double>(y) + off + sy * step,
                           static_cast<double>(z) + off + sz * step};
              const Tissue t =
                  detail::classify(p, spec, body_center, body_axes);
              const auto& hu = spec.attenuation.at(t);
              for (int ph = 0; ph < 3; ++ph) acc[ph] += hu[ph];
            }
        const double inv = 1.0 / static_cast<double>(ss * ss * ss);
        for (int ph = 0; ph < 3; ++ph) mean[ph].voxels[i] = acc[ph] * inv;
      }

  // Independent noise field per phase, fixed scan order.
  Rng rng(Rng::mix(spec.seed, 0xA11D5EEDULL));
  for (int ph = 0; ph < 3; ++ph)
    if (spec.noise_sigma_hu > 0)
      for (double& v : mean[ph].voxels) v += spec.noise_sigma_hu * rng.normal();

  truth.aligned.noncontrast = std::move(mean[0]);
  truth.aligned.nephrographic = std::move(mean[1]);
  truth.aligned.excretory = std::move(mean[2]);
  truth.aligned.noncontrast.phase = Phase::NC;
  truth.aligned.nephrographic.phase = Phase::NEPH;
  truth.aligned.excretory.phase = Phase::EXC;

  // Kidney mask: voxel centers inside any kidney ellipsoid.
  truth.kidney_mask = proto;
  truth.kidney_mask.domain = VoxelDomain::Mask;
  i = 0;
  for (std::int64_t z = 0; z < spec.dims[2]; ++z)
    for (std::int64_t y = 0; y < spec.dims[1]; ++y)
      for (std::int64_t x = 0; x < spec.dims[0]; ++x, ++i) {
        const Vec3 p{static_cast<double>(x), static_cast<double>(y),
                     static_cast<double>(z)};
        bool in = false;
        for (const KidneySpec& k : spec.kidneys)
          if (detail::ellipsoid_r2(p, k.center, k.semi_axes) <= 1.0) in = true;
        truth.kidney_mask.voxels[i] = in ? 1.0 : 0.0;
      }

  // Lesion ROI masks keep a half-voxel-diagonal margin so every ROI voxel is
  // pure lesion tissue (no partial-volume contamination of ROI means).
  const double margin = 0.5 * std::sqrt(3.0);
  for (const LesionSpec& les : spec.lesions) {
    CtVolume m = proto;
    m.domain = VoxelDomain::Mask;
    const double r = std::max(0.0, les.radius - margin);
    i = 0;
    for (std::int64_t z = 0; z < spec.dims[2]; ++z)
      for (std::int64_t y = 0; y < spec.dims[1]; ++y)
        for (std::int64_t x = 0; x < spec.dims[0]; ++x, ++i) {
          const double dx = static_cast<double>(x) - les.center[0];
          const double dy = static_cast<double>(y) - les.center[1];
          const double dz = static_cast<double>(z) - les.center[2];
          m.voxels[i] = (dx * dx + dy * dy + dz * dz <= r * r) ? 1.0 : 0.0;
        }
    truth.lesion_masks.push_back(std::move(m));
  }

  // Acquired (misaligned) copies and the exact inverse transforms.
  for (int ph = 0; ph < 3; ++ph) {
    const AffineTransform& inject = spec.misalignment[ph];
    const Phase phase = kAllPhases[ph];
    truth.misaligned.get(phase) = resample(truth.aligned.get(phase), inject);
    truth.true_affines[ph] = inverse(inject);
  }
  return truth;
}

}  // namespace dsni
