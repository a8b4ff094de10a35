#pragma once

#include <array>
#include <cmath>
#include <cstdint>

#include <json.hpp>

#include "dsni/errors.hpp"
#include "dsni/volume.hpp"

namespace dsni {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

// Affine map in voxel units: p_fixed = A * p_moving + t. Resampling a moving
// volume onto the fixed grid therefore pulls samples through the inverse.
struct AffineTransform {
  Mat3 A{{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}};
  Vec3 t{0, 0, 0};

  Vec3 apply(const Vec3& p) const {
    return {A[0][0] * p[0] + A[0][1] * p[1] + A[0][2] * p[2] + t[0],
            A[1][0] * p[0] + A[1][1] * p[1] + A[1][2] * p[2] + t[1],
            A[2][0] * p[0] + A[2][1] * p[1] + A[2][2] * p[2] + t[2]};
  }

  double det() const {
    return A[0][0] * (A[1][1] * A[2][2] - A[1][2] * A[2][1]) -
           A[0][1] * (A[1][0] * A[2][2] - A[1][2] * A[2][0]) +
           A[0][2] * (A[1][0] * A[2][1] - A[1][1] * A[2][0]);
  }

  static AffineTransform identity() { return {}; }

  static AffineTransform translation(const Vec3& t) {
    AffineTransform xf;
    xf.t = t;
    return xf;
  }

  // In-plane (x-y) rotation by `radians` about `center`, in voxel units.
  static AffineTransform rotation_xy(double radians, const Vec3& center) {
    AffineTransform xf;
    const double c = std::cos(radians), s = std::sin(radians);
    xf.A = {{{c, -s, 0}, {s, c, 0}, {0, 0, 1}}};
    xf.t = {center[0] - (c * center[0] - s * center[1]),
            center[1] - (s * center[0] + c * center[1]), 0.0};
    return xf;
  }
};

inline AffineTransform inverse(const AffineTransform& xf) {
  const double d = xf.det();
  if (std::abs(d) < 1e-12) throw TransformError("singular affine matrix");
  const Mat3& m = xf.A;
  Mat3 inv;
  inv[0][0] = (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / d;
  inv[0][1] = (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / d;
  inv[0][2] = (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / d;
  inv[1][0] = (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / d;
  inv[1][1] = (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / d;
  inv[1][2] = (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / d;
  inv[2][0] = (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / d;
  inv[2][1] = (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / d;
  inv[2][2] = (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / d;
  AffineTransform out;
  out.A = inv;
  const Vec3& t = xf.t;
  out.t = {-(inv[0][0] * t[0] + inv[0][1] * t[1] + inv[0][2] * t[2]),
           -(inv[1][0] * t[0] + inv[1][1] * t[1] + inv[1][2] * t[2]),
           -(inv[2][0] * t[0] + inv[2][1] * t[1] + inv[2][2] * t[2])};
  return out;
}

// compose(a, b): the map p -> a(b(p)).
inline AffineTransform compose(const AffineTransform& a,
                               const AffineTransform& b) {
  AffineTransform out;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      out.A[i][j] = 0;
      for (int k = 0; k < 3; ++k) out.A[i][j] += a.A[i][k] * b.A[k][j];
    }
  out.t = a.apply(b.t);
  return out;
}

inline nlohmann::json to_json(const AffineTransform& xf) {
  return {{"A",
           {{xf.A[0][0], xf.A[0][1], xf.A[0][2]},
            {xf.A[1][0], xf.A[1][1], xf.A[1][2]},
            {xf.A[2][0], xf.A[2][1], xf.A[2][2]}}},
          {"t", {xf.t[0], xf.t[1], xf.t[2]}},
          {"units", "voxel"}};
}

inline AffineTransform affine_from_json(const nlohmann::json& j) {
  AffineTransform xf;
  try {
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) xf.A[i][k] = j.at("A").at(i).at(k).get<double>();
      xf.t[i] = j.at("t").at(i).get<double>();
    }
    if (j.contains("units") && j.at("units").get<std::string>() != "voxel")
      throw IoError("affine transforms are stored in voxel units");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed affine JSON: ") + e.what());
  }
  return xf;
}

inline double background_value(VoxelDomain d) {
  switch (d) {
    case VoxelDomain::HU: return -1000.0;  // air
    case VoxelDomain::Norm255: return 0.0;
    case VoxelDomain::Mask: return 0.0;
  }
  return 0.0;
}

namespace detail {

// Trilinear sample at continuous voxel coordinate q; out-of-bounds corners
// contribute the background value. Corners with exactly zero weight are never
// fetched, so lattice-aligned sampling reproduces voxel values bit-exactly.
inline double trilerp(const CtVolume& vol, const Vec3& q, double background) {
  const double fx = std::floor(q[0]);
  const double fy = std::floor(q[1]);
  const double fz = std::floor(q[2]);
  const std::int64_t x0 = static_cast<std::int64_t>(fx);
  const std::int64_t y0 = static_cast<std::int64_t>(fy);
  const std::int64_t z0 = static_cast<std::int64_t>(fz);
  const double dx = q[0] - fx, dy = q[1] - fy, dz = q[2] - fz;

  double acc = 0.0;
  for (int cz = 0; cz < 2; ++cz) {
    const double wz = cz ? dz : 1.0 - dz;
    if (wz == 0.0) continue;
    for (int cy = 0; cy < 2; ++cy) {
      const double wy = cy ? dy : 1.0 - dy;
      if (wy == 0.0) continue;
      for (int cx = 0; cx < 2; ++cx) {
        const double wx = cx ? dx : 1.0 - dx;
        if (wx == 0.0) continue;
        const std::int64_t x = x0 + cx, y = y0 + cy, z = z0 + cz;
        const double v =
            vol.in_bounds(x, y, z) ? vol.at(x, y, z) : background;
        acc += wx * wy * wz * v;
      }
    }
  }
  return acc;
}

// Trilinear sample plus its gradient with respect to q.
inline double trilerp_grad(const CtVolume& vol, const Vec3& q,
                           double background, Vec3& grad) {
  const double fx = std::floor(q[0]);
  const double fy = std::floor(q[1]);
  const double fz = std::floor(q[2]);
  const std::int64_t x0 = static_cast<std::int64_t>(fx);
  const std::int64_t y0 = static_cast<std::int64_t>(fy);
  const std::int64_t z0 = static_cast<std::int64_t>(fz);
  const double dx = q[0] - fx, dy = q[1] - fy, dz = q[2] - fz;

  double c[2][2][2];
  for (int cz = 0; cz < 2; ++cz)
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx) {
        const std::int64_t x = x0 + cx, y = y0 + cy, z = z0 + cz;
        c[cz][cy][cx] = vol.in_bounds(x, y, z) ? vol.at(x, y, z) : background;
      }

  const double wx[2] = {1.0 - dx, dx};
  const double wy[2] = {1.0 - dy, dy};
  const double wz[2] = {1.0 - dz, dz};
  double value = 0.0;
  grad = {0.0, 0.0, 0.0};
  for (int cz = 0; cz < 2; ++cz)
    for (int cy = 0; cy < 2; ++cy)
      for (int cx = 0; cx < 2; ++cx) {
        const double v = c[cz][cy][cx];
        value += wx[cx] * wy[cy] * wz[cz] * v;
        grad[0] += (cx ? 1.0 : -1.0) * wy[cy] * wz[cz] * v;
        grad[1] += (cy ? 1.0 : -1.0) * wx[cx] * wz[cz] * v;
        grad[2] += (cz ? 1.0 : -1.0) * wx[cx] * wy[cy] * v;
      }
  return value;
}

}  // namespace detail

// Resamples `moving` onto a grid of `out_dims`. `xf` maps moving-volume
// coordinates to output (fixed) coordinates, so samples are pulled through
// its inverse. Out-of-field samples take the domain background value.
inline CtVolume resample(const CtVolume& moving, const AffineTransform& xf,
                         std::array<std::int64_t, 3> out_dims) {
  moving.validate();
  if (out_dims[0] <= 0 || out_dims[1] <= 0 || out_dims[2] <= 0)
    throw ShapeError("resample output dims must be positive");
  const AffineTransform inv = inverse(xf);  // TransformError if singular
  const double bg = background_value(moving.domain);

  CtVolume out;
  out.dims = out_dims;
  out.spacing = moving.spacing;
  out.origin = moving.origin;
  out.domain = moving.domain;
  out.phase = moving.phase;
  out.voxels.resize(static_cast<std::size_t>(out.count()));

  std::size_t i = 0;
  for (std::int64_t z = 0; z < out_dims[2]; ++z)
    for (std::int64_t y = 0; y < out_dims[1]; ++y)
      for (std::int64_t x = 0; x < out_dims[0]; ++x, ++i) {
        const Vec3 q = inv.apply({static_cast<double>(x),
                                  static_cast<double>(y),
                                  static_cast<double>(z)});
        out.voxels[i] = detail::trilerp(moving, q, bg);
      }
  return out;
}

inline CtVolume resample(const CtVolume& moving, const AffineTransform& xf) {
  return resample(moving, xf, moving.dims);
}

}  // namespace dsni
