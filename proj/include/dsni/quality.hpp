#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include <json.hpp>

#include "dsni/errors.hpp"
#include "dsni/volume.hpp"

namespace dsni {

// 3D SSIM over a uniform (box) window; valid window positions only, so small
// crops carry no border bias.
struct SsimConfig {
  std::array<std::int64_t, 3> window{7, 7, 7};
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 255.0;

  void validate() const {
    for (std::int64_t w : window)
      if (w <= 0 || w % 2 == 0) throw ConfigError("SSIM window must be odd");
    if (k1 <= 0 || k2 <= 0) throw ConfigError("SSIM K1/K2 must be positive");
  }
};

inline double ssim3d(const CtVolume& a, const CtVolume& b,
                     const SsimConfig& cfg = {}) {
  cfg.validate();
  if (a.dims != b.dims) throw ShapeError("ssim3d requires equal dims");
  for (int i = 0; i < 3; ++i)
    if (a.dims[i] < cfg.window[i])
      throw ShapeError("ssim3d volume smaller than the window");

  const double c1 = (cfg.k1 * cfg.dynamic_range) * (cfg.k1 * cfg.dynamic_range);
  const double c2 = (cfg.k2 * cfg.dynamic_range) * (cfg.k2 * cfg.dynamic_range);
  const std::int64_t wx = cfg.window[0], wy = cfg.window[1], wz = cfg.window[2];
  const double n = static_cast<double>(wx * wy * wz);

  double total = 0.0;
  std::int64_t count = 0;
  for (std::int64_t z0 = 0; z0 + wz <= a.dims[2]; ++z0)
    for (std::int64_t y0 = 0; y0 + wy <= a.dims[1]; ++y0)
      for (std::int64_t x0 = 0; x0 + wx <= a.dims[0]; ++x0) {
        double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::int64_t z = z0; z < z0 + wz; ++z)
          for (std::int64_t y = y0; y < y0 + wy; ++y) {
            const double* pa = &a.voxels[a.index(x0, y, z)];
            const double* pb = &b.voxels[b.index(x0, y, z)];
            for (std::int64_t x = 0; x < wx; ++x) {
              const double va = pa[x], vb = pb[x];
              sa += va;
              sb += vb;
              saa += va * va;
              sbb += vb * vb;
              sab += va * vb;
            }
          }
        const double mu_a = sa / n, mu_b = sb / n;
        const double var_a = saa / n - mu_a * mu_a;
        const double var_b = sbb / n - mu_b * mu_b;
        const double cov = sab / n - mu_a * mu_b;
        const double num = (2 * mu_a * mu_b + c1) * (2 * cov + c2);
        const double den =
            (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
        total += num / den;
        ++count;
      }
  return total / static_cast<double>(count);
}

// Weighted combination of the three pairwise SSIMs and the acceptance gate.
struct GateConfig {
  double w_nn = 0.2;  // non-contrast vs nephrographic
  double w_nu = 0.1;  // non-contrast vs urographic (excretory)
  double w_un = 0.7;  // urographic vs nephrographic
  double threshold = 0.65;

  void validate() const {
    if (std::abs(w_nn + w_nu + w_un - 1.0) > 1e-12)
      throw ConfigError("gate weights must sum to 1");
  }
};

inline double combine_ssim(double s_nn, double s_nu, double s_un,
                           const GateConfig& g = {}) {
  g.validate();
  return g.w_nn * s_nn + g.w_nu * s_nu + g.w_un * s_un;
}

// Strict inequality: a case passes only when score > threshold.
inline bool gate(double score, const GateConfig& g = {}) {
  return score > g.threshold;
}

struct GateReportRow {
  std::string case_id;
  double ssim_nn = 0, ssim_nu = 0, ssim_un = 0, ssim_select = 0;
  bool accepted = false;

  nlohmann::json to_json() const {
    return {{"case_id", case_id},   {"ssim_nn", ssim_nn},
            {"ssim_nu", ssim_nu},   {"ssim_un", ssim_un},
            {"ssim_select", ssim_select}, {"accepted", accepted}};
  }
};

// Convenience: the three pairwise SSIMs plus the combined score for a triple.
struct TripleSsim {
  double nn = 0, nu = 0, un = 0, select = 0;
};

inline TripleSsim triple_ssim(const PhaseTriple& t, const SsimConfig& scfg = {},
                              const GateConfig& gcfg = {}) {
  TripleSsim s;
  s.nn = ssim3d(t.noncontrast, t.nephrographic, scfg);
  s.nu = ssim3d(t.noncontrast, t.excretory, scfg);
  s.un = ssim3d(t.excretory, t.nephrographic, scfg);
  s.select = combine_ssim(s.nn, s.nu, s.un, gcfg);
  return s;
}

}  // namespace dsni
