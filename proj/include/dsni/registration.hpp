#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "dsni/affine.hpp"
#include "dsni/errors.hpp"
#include "dsni/quality.hpp"
#include "dsni/volume.hpp"

namespace dsni {

enum class RegObjective { MSE, NCC };

struct RegistrationConfig {
  int pyramid_levels = 3;        // downsample x2 per level
  int max_iterations = 200;      // per level
  double matrix_step = 1.0;      // relative step scale, matrix entries
  double translation_step = 10.0;  // relative step scale, translation
  double tolerance = 1e-6;       // relative-improvement stop
  RegObjective objective = RegObjective::MSE;

  void validate() const {
    if (pyramid_levels < 1) throw ConfigError("pyramid levels must be >= 1");
    if (tolerance <= 0) throw ConfigError("tolerance must be positive");
    if (max_iterations < 1) throw ConfigError("max iterations must be >= 1");
  }
};

struct RegistrationResult {
  AffineTransform transform;  // moving -> fixed, voxel units
  double final_objective = 0.0;
  std::vector<int> iterations_per_level;
  bool converged = false;
};

namespace detail {

// 2x box-average downsample (antialiasing); odd trailing voxels average over
// the voxels that exist.
inline CtVolume downsample2(const CtVolume& v) {
  CtVolume out;
  out.dims = {(v.dims[0] + 1) / 2, (v.dims[1] + 1) / 2, (v.dims[2] + 1) / 2};
  out.spacing = {v.spacing[0] * 2, v.spacing[1] * 2, v.spacing[2] * 2};
  out.origin = v.origin;
  out.domain = v.domain;
  out.phase = v.phase;
  out.voxels.resize(static_cast<std::size_t>(out.count()));
  std::size_t i = 0;
  for (std::int64_t z = 0; z < out.dims[2]; ++z)
    for (std::int64_t y = 0; y < out.dims[1]; ++y)
      for (std::int64_t x = 0; x < out.dims[0]; ++x, ++i) {
        double acc = 0.0;
        int n = 0;
        for (std::int64_t dz = 0; dz < 2; ++dz)
          for (std::int64_t dy = 0; dy < 2; ++dy)
            for (std::int64_t dx = 0; dx < 2; ++dx) {
              const std::int64_t sx = 2 * x + dx, sy = 2 * y + dy,
                                 sz = 2 * z + dz;
              if (!v.in_bounds(sx, sy, sz)) continue;
              acc += v.at(sx, sy, sz);
              ++n;
            }
        out.voxels[i] = acc / static_cast<double>(n);
      }
  return out;
}

// Internal pull-map parameterization around the grid centers:
//   q = B * (p - center_fixed) + center_moving + c
struct PullMap {
  Mat3 B{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 c{0, 0, 0};
};

struct ObjectiveEval {
  double value = 0.0;
  Mat3 grad_B{};
  Vec3 grad_c{};
};

inline ObjectiveEval evaluate_objective(const CtVolume& fixed,
                                        const CtVolume& moving,
                                        const PullMap& map,
                                        RegObjective objective,
                                        bool want_grad) {
  const Vec3 cf{(fixed.dims[0] - 1) * 0.5, (fixed.dims[1] - 1) * 0.5,
                (fixed.dims[2] - 1) * 0.5};
  const Vec3 cm{(moving.dims[0] - 1) * 0.5, (moving.dims[1] - 1) * 0.5,
                (moving.dims[2] - 1) * 0.5};
  const double bg = background_value(moving.domain);
  const std::int64_t n = fixed.count();
  const double inv_n = 1.0 / static_cast<double>(n);

  ObjectiveEval ev;
  if (objective == RegObjective::MSE) {
    std::size_t i = 0;
    double acc = 0.0;
    for (std::int64_t z = 0; z < fixed.dims[2]; ++z)
      for (std::int64_t y = 0; y < fixed.dims[1]; ++y)
        for (std::int64_t x = 0; x < fixed.dims[0]; ++x, ++i) {
          const Vec3 pc{x - cf[0], y - cf[1], z - cf[2]};
          const Vec3 q{map.B[0][0] * pc[0] + map.B[0][1] * pc[1] +
                           map.B[0][2] * pc[2] + cm[0] + map.c[0],
                       map.B[1][0] * pc[0] + map.B[1][1] * pc[1] +
                           map.B[1][2] * pc[2] + cm[1] + map.c[1],
                       map.B[2][0] * pc[0] + map.B[2][1] * pc[1] +
                           map.B[2][2] * pc[2] + cm[2] + map.c[2]};
          if (want_grad) {
            Vec3 g;
            const double m = trilerp_grad(moving, q, bg, g);
            const double r = m - fixed.voxels[i];
            acc += r * r;
            const double w = 2.0 * inv_n * r;
            for (int a = 0; a < 3; ++a) {
              ev.grad_c[a] += w * g[a];
              for (int b = 0; b < 3; ++b) ev.grad_B[a][b] += w * g[a] * pc[b];
            }
          } else {
            const double r = trilerp(moving, q, bg) - fixed.voxels[i];
            acc += r * r;
          }
        }
    ev.value = acc * inv_n;
    return ev;
  }

  // NCC: objective = 1 - corr(moving(q), fixed). Two passes; the second
  // chains the correlation derivative through the trilinear gradient.
  std::vector<double> mv(static_cast<std::size_t>(n));
  double sum_m = 0.0, sum_f = 0.0;
  {
    std::size_t i = 0;
    for (std::int64_t z = 0; z < fixed.dims[2]; ++z)
      for (std::int64_t y = 0; y < fixed.dims[1]; ++y)
        for (std::int64_t x = 0; x < fixed.dims[0]; ++x, ++i) {
          const Vec3 pc{x - cf[0], y - cf[1], z - cf[2]};
          const Vec3 q{map.B[0][0] * pc[0] + map.B[0][1] * pc[1] +
                           map.B[0][2] * pc[2] + cm[0] + map.c[0],
                       map.B[1][0] * pc[0] + map.B[1][1] * pc[1] +
                           map.B[1][2] * pc[2] + cm[1] + map.c[1],
                       map.B[2][0] * pc[0] + map.B[2][1] * pc[1] +
                           map.B[2][2] * pc[2] + cm[2] + map.c[2]};
          mv[i] = trilerp(moving, q, bg);
          sum_m += mv[i];
          sum_f += fixed.voxels[i];
        }
  }
  const double mean_m = sum_m * inv_n, mean_f = sum_f * inv_n;
  double s_mm = 0.0, s_ff = 0.0, s_mf = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double dm = mv[i] - mean_m;
    const double df = fixed.voxels[i] - mean_f;
    s_mm += dm * dm;
    s_ff += df * df;
    s_mf += dm * df;
  }
  const double denom = std::sqrt(std::max(s_mm * s_ff, 1e-30));
  const double corr = s_mf / denom;
  ev.value = 1.0 - corr;
  if (!want_grad) return ev;

  std::size_t i = 0;
  for (std::int64_t z = 0; z < fixed.dims[2]; ++z)
    for (std::int64_t y = 0; y < fixed.dims[1]; ++y)
      for (std::int64_t x = 0; x < fixed.dims[0]; ++x, ++i) {
        const Vec3 pc{x - cf[0], y - cf[1], z - cf[2]};
        const Vec3 q{map.B[0][0] * pc[0] + map.B[0][1] * pc[1] +
                         map.B[0][2] * pc[2] + cm[0] + map.c[0],
                     map.B[1][0] * pc[0] + map.B[1][1] * pc[1] +
                         map.B[1][2] * pc[2] + cm[1] + map.c[1],
                     map.B[2][0] * pc[0] + map.B[2][1] * pc[1] +
                         map.B[2][2] * pc[2] + cm[2] + map.c[2]};
        Vec3 g;
        (void)trilerp_grad(moving, q, bg, g);
        const double dm = mv[i] - mean_m;
        const double df = fixed.voxels[i] - mean_f;
        // d(1 - corr)/dm_i
        const double dobj = -(df / denom - corr * dm / std::max(s_mm, 1e-30));
        for (int a = 0; a < 3; ++a) {
          ev.grad_c[a] += dobj * g[a];
          for (int b = 0; b < 3; ++b) ev.grad_B[a][b] += dobj * g[a] * pc[b];
        }
      }
  return ev;
}

}  // namespace detail

// Coarse-to-fine intensity-based affine registration with analytic gradients
// of the trilinear sampling. Deterministic for fixed inputs and config; the
// objective never increases across accepted steps.
inline RegistrationResult register_affine(const CtVolume& fixed,
                                          const CtVolume& moving,
                                          const RegistrationConfig& cfg = {}) {
  cfg.validate();
  if (fixed.domain != VoxelDomain::Norm255 ||
      moving.domain != VoxelDomain::Norm255)
    throw DomainError("register_affine expects Norm255 volumes");
  if (fixed.dims != moving.dims)
    throw ShapeError("register_affine expects equal dims");

  // Build the pyramid, keeping the coarsest level at >= 8 voxels per axis.
  std::vector<CtVolume> fpyr{fixed}, mpyr{moving};
  for (int l = 1; l < cfg.pyramid_levels; ++l) {
    const CtVolume& prev = fpyr.back();
    if (std::min({prev.dims[0], prev.dims[1], prev.dims[2]}) < 16) break;
    fpyr.push_back(detail::downsample2(fpyr.back()));
    mpyr.push_back(detail::downsample2(mpyr.back()));
  }

  detail::PullMap map;
  RegistrationResult result;
  result.converged = true;
  double final_obj = 0.0;

  for (int level = static_cast<int>(fpyr.size()) - 1; level >= 0; --level) {
    const CtVolume& f = fpyr[static_cast<std::size_t>(level)];
    const CtVolume& m = mpyr[static_cast<std::size_t>(level)];
    // Centered coordinates scale by 2 between levels: B carries over, c does
    // not need rescaling because it is expressed relative to grid centers --
    // but it is in voxels of the coarser grid, so double it.
    if (level != static_cast<int>(fpyr.size()) - 1)
      for (int a = 0; a < 3; ++a) map.c[a] *= 2.0;

    const double half_extent =
        std::max(1.0, ((f.dims[0] - 1) + (f.dims[1] - 1) + (f.dims[2] - 1)) /
                          6.0);
    const double mat_scale = cfg.matrix_step / (half_extent * half_extent);

    detail::ObjectiveEval ev =
        detail::evaluate_objective(f, m, map, cfg.objective, true);
    if (!std::isfinite(ev.value))
      throw NumericalError("non-finite registration objective");

    double step = 1.0;
    int iters = 0;
    bool level_converged = false;
    for (; iters < cfg.max_iterations; ++iters) {
      // Preconditioned steepest-descent direction.
      detail::PullMap dir;
      double gnorm2 = 0.0;
      for (int a = 0; a < 3; ++a) {
        dir.c[a] = -cfg.translation_step * ev.grad_c[a];
        gnorm2 += ev.grad_c[a] * ev.grad_c[a];
        for (int b = 0; b < 3; ++b) {
          dir.B[a][b] = -mat_scale * ev.grad_B[a][b];
          gnorm2 += ev.grad_B[a][b] * ev.grad_B[a][b];
        }
      }
      if (gnorm2 == 0.0) {
        level_converged = true;
        break;
      }

      bool accepted = false;
      for (int halvings = 0; halvings < 40; ++halvings) {
        detail::PullMap trial = map;
        for (int a = 0; a < 3; ++a) {
          trial.c[a] += step * dir.c[a];
          for (int b = 0; b < 3; ++b) trial.B[a][b] += step * dir.B[a][b];
        }
        detail::ObjectiveEval trial_ev =
            detail::evaluate_objective(f, m, trial, cfg.objective, true);
        if (!std::isfinite(trial_ev.value))
          throw NumericalError("non-finite registration objective");
        if (trial_ev.value < ev.value) {
          const double improvement =
              (ev.value - trial_ev.value) / std::max(ev.value, 1e-30);
          map = trial;
          ev = trial_ev;
          accepted = true;
          step = std::min(step * 2.0, 1.0e6);
          if (improvement < cfg.tolerance) level_converged = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted) {
        level_converged = true;  // no descent direction improves further
        break;
      }
      if (level_converged) break;
    }
    result.iterations_per_level.push_back(iters);
    result.converged = result.converged && level_converged;
    final_obj = ev.value;
  }

  // Convert the pull map back to the spec convention (moving -> fixed).
  const Vec3 cf{(fixed.dims[0] - 1) * 0.5, (fixed.dims[1] - 1) * 0.5,
                (fixed.dims[2] - 1) * 0.5};
  const Vec3 cm{(moving.dims[0] - 1) * 0.5, (moving.dims[1] - 1) * 0.5,
                (moving.dims[2] - 1) * 0.5};
  AffineTransform pull;
  pull.A = map.B;
  for (int a = 0; a < 3; ++a)
    pull.t[a] = cm[a] + map.c[a] - (map.B[a][0] * cf[0] + map.B[a][1] * cf[1] +
                                    map.B[a][2] * cf[2]);
  result.transform = inverse(pull);
  result.final_objective = final_obj;
  return result;
}

// --- Two-stage pipeline -------------------------------------------------------

using MaskSource = std::function<CtVolume(const CtVolume&)>;

// Default kidney masker: denormalize back to HU, then threshold + keep the two
// largest components. Stands in for the out-of-scope learned segmenter.
inline MaskSource make_threshold_masker(WindowSpec window, double hu_lo = -15.0,
                                        double hu_hi = 300.0,
                                        std::int64_t min_component = 20) {
  return [=](const CtVolume& norm) {
    const CtVolume hu =
        norm.domain == VoxelDomain::HU ? norm : denormalize(norm, window);
    return threshold_mask(hu, hu_lo, hu_hi, min_component);
  };
}

struct TwoStageResult {
  PhaseTriple registered;  // cropped, fully registered triple
  CropBox crop;
  AffineTransform stage1_exc, stage1_neph;  // moving -> fixed, full grids
  AffineTransform stage2_exc, stage2_neph;  // moving -> fixed, cropped grids
  TripleSsim ssim_input;   // same crop applied to the unregistered phases
  TripleSsim ssim_stage1;  // after global registration + crop
  TripleSsim ssim_stage2;  // final
};

// Global registration of excretory and nephrographic onto non-contrast, a
// kidney-mask crop, then a second registration of the cropped volumes. The
// second stage resamples the stage-1 outputs (one extra interpolation) rather
// than composing transforms.
inline TwoStageResult two_stage_register(const PhaseTriple& phases,
                                         const MaskSource& mask_source,
                                         std::array<std::int64_t, 2> crop_xy,
                                         const RegistrationConfig& cfg = {}) {
  const CtVolume& nc = phases.noncontrast;
  if (phases.nephrographic.dims != nc.dims ||
      phases.excretory.dims != nc.dims)
    throw ShapeError("two_stage_register expects extent-matched phases");

  TwoStageResult out;

  // Stage 1: full-volume alignment onto the non-contrast frame.
  RegistrationResult r1e = register_affine(nc, phases.excretory, cfg);
  RegistrationResult r1n = register_affine(nc, phases.nephrographic, cfg);
  out.stage1_exc = r1e.transform;
  out.stage1_neph = r1n.transform;
  CtVolume exc1 = resample(phases.excretory, r1e.transform, nc.dims);
  CtVolume neph1 = resample(phases.nephrographic, r1n.transform, nc.dims);

  // Kidney mask on the registered non-contrast image (the fixed image).
  const CtVolume mask = mask_source(nc);
  out.crop = compute_crop_box(mask, crop_xy);

  CtVolume nc_c = apply_crop(nc, out.crop);
  CtVolume exc_c = apply_crop(exc1, out.crop);
  CtVolume neph_c = apply_crop(neph1, out.crop);

  {
    PhaseTriple raw;
    raw.noncontrast = nc_c;
    raw.excretory = apply_crop(phases.excretory, out.crop);
    raw.nephrographic = apply_crop(phases.nephrographic, out.crop);
    out.ssim_input = triple_ssim(raw);
  }
  {
    PhaseTriple s1;
    s1.noncontrast = nc_c;
    s1.excretory = exc_c;
    s1.nephrographic = neph_c;
    out.ssim_stage1 = triple_ssim(s1);
  }

  // Stage 2: re-register the cropped volumes for kidney-specific alignment.
  RegistrationResult r2e = register_affine(nc_c, exc_c, cfg);
  RegistrationResult r2n = register_affine(nc_c, neph_c, cfg);
  out.stage2_exc = r2e.transform;
  out.stage2_neph = r2n.transform;

  out.registered.noncontrast = std::move(nc_c);
  out.registered.excretory = resample(exc_c, r2e.transform, exc_c.dims);
  out.registered.nephrographic = resample(neph_c, r2n.transform, neph_c.dims);
  out.ssim_stage2 = triple_ssim(out.registered);
  return out;
}

}  // namespace dsni
