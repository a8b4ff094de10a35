#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <deque>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dsni/errors.hpp"

namespace dsni {

enum class VoxelDomain { HU, Norm255, Mask };
enum class Phase { NC, NEPH, EXC };

inline std::string to_string(VoxelDomain d) {
  switch (d) {
    case VoxelDomain::HU: return "HU";
    case VoxelDomain::Norm255: return "Norm255";
    case VoxelDomain::Mask: return "MASK";
  }
  return "HU";
}

inline VoxelDomain domain_from_string(const std::string& s) {
  if (s == "HU") return VoxelDomain::HU;
  if (s == "Norm255") return VoxelDomain::Norm255;
  if (s == "MASK") return VoxelDomain::Mask;
  throw IoError("unknown voxel domain: " + s);
}

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::NC: return "NC";
    case Phase::NEPH: return "NEPH";
    case Phase::EXC: return "EXC";
  }
  return "NC";
}

inline Phase phase_from_string(const std::string& s) {
  if (s == "NC") return Phase::NC;
  if (s == "NEPH") return Phase::NEPH;
  if (s == "EXC") return Phase::EXC;
  throw IoError("unknown phase: " + s);
}

// Dense 3D scalar grid with spacing/origin metadata. Voxels are stored
// x-fastest, then y, then z; that ordering is the one canonical layout for
// both the file format and all in-memory math.
struct CtVolume {
  std::array<std::int64_t, 3> dims{0, 0, 0};   // Nx, Ny, Nz
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel
  std::array<double, 3> origin{0.0, 0.0, 0.0};   // mm
  VoxelDomain domain = VoxelDomain::HU;
  Phase phase = Phase::NC;
  std::vector<double> voxels;

  std::int64_t count() const { return dims[0] * dims[1] * dims[2]; }

  std::int64_t index(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return (z * dims[1] + y) * dims[0] + x;
  }

  double at(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return voxels[index(x, y, z)];
  }
  double& at(std::int64_t x, std::int64_t y, std::int64_t z) {
    return voxels[index(x, y, z)];
  }

  bool in_bounds(std::int64_t x, std::int64_t y, std::int64_t z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < dims[0] && y < dims[1] &&
           z < dims[2];
  }

  // Axial position (mm) of slice k.
  double slice_position(std::int64_t k) const {
    return origin[2] + static_cast<double>(k) * spacing[2];
  }

  void validate() const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw ShapeError("volume dims must be positive");
    if (spacing[0] <= 0 || spacing[1] <= 0 || spacing[2] <= 0)
      throw ShapeError("volume spacing must be strictly positive");
    if (static_cast<std::int64_t>(voxels.size()) != count())
      throw ShapeError("voxel count does not match dims");
  }

  static CtVolume make(std::array<std::int64_t, 3> dims, VoxelDomain domain,
                       double fill = 0.0) {
    CtVolume v;
    v.dims = dims;
    v.domain = domain;
    v.voxels.assign(static_cast<std::size_t>(v.count()), fill);
    return v;
  }
};

// Display window: an HU interval of `width` centered at `level`.
struct WindowSpec {
  double width = 400.0;
  double level = 50.0;

  double low() const { return level - width / 2.0; }
  double high() const { return level + width / 2.0; }

  void validate() const {
    if (width <= 0) throw ConfigError("window width must be positive");
  }
};

struct PhaseTriple {
  CtVolume noncontrast;
  CtVolume nephrographic;
  CtVolume excretory;

  const CtVolume& get(Phase p) const {
    switch (p) {
      case Phase::NC: return noncontrast;
      case Phase::NEPH: return nephrographic;
      case Phase::EXC: return excretory;
    }
    return noncontrast;
  }
  CtVolume& get(Phase p) {
    switch (p) {
      case Phase::NC: return noncontrast;
      case Phase::NEPH: return nephrographic;
      case Phase::EXC: return excretory;
    }
    return noncontrast;
  }
};

inline constexpr std::array<Phase, 3> kAllPhases{Phase::NC, Phase::NEPH,
                                                 Phase::EXC};

// --- Windowing ------------------------------------------------------------

// Maps HU through the display window onto [0, 255]:
//   out = clamp((hu - low) / width, 0, 1) * 255.
// Values are kept as continuous floats; no quantization is applied.
inline CtVolume window_normalize(const CtVolume& vol, const WindowSpec& w) {
  w.validate();
  if (vol.domain != VoxelDomain::HU)
    throw DomainError("window_normalize expects an HU volume");
  CtVolume out = vol;
  out.domain = VoxelDomain::Norm255;
  const double lo = w.low();
  for (double& v : out.voxels) {
    double u = (v - lo) / w.width;
    u = std::clamp(u, 0.0, 1.0);
    v = u * 255.0;
  }
  return out;
}

// Exact inverse of window_normalize on [0, 255]:
//   hu = norm / 255 * width + low.
inline CtVolume denormalize(const CtVolume& vol, const WindowSpec& w) {
  w.validate();
  if (vol.domain != VoxelDomain::Norm255)
    throw DomainError("denormalize expects a Norm255 volume");
  CtVolume out = vol;
  out.domain = VoxelDomain::HU;
  const double lo = w.low();
  for (double& v : out.voxels) v = v / 255.0 * w.width + lo;
  return out;
}

// --- Slice-extent matching --------------------------------------------------

// The phase with the fewest slices defines the axial coverage; the other
// phases are trimmed to the nearest enclosing slice range so all three
// end up with the same slice count.
inline PhaseTriple match_slice_extent(const PhaseTriple& phases) {
  const CtVolume* vols[3] = {&phases.noncontrast, &phases.nephrographic,
                             &phases.excretory};
  for (const CtVolume* v : vols) v->validate();

  int ref = 0;
  for (int i = 1; i < 3; ++i)
    if (vols[i]->dims[2] < vols[ref]->dims[2]) ref = i;
  const std::int64_t ref_nz = vols[ref]->dims[2];
  const double bottom = vols[ref]->slice_position(0);
  const double top = vols[ref]->slice_position(ref_nz - 1);

  PhaseTriple out;
  CtVolume* outs[3] = {&out.noncontrast, &out.nephrographic, &out.excretory};
  for (int i = 0; i < 3; ++i) {
    const CtVolume& v = *vols[i];
    const double first = v.slice_position(0);
    const double last = v.slice_position(v.dims[2] - 1);
    const double eps = 1e-9 * std::max(1.0, std::abs(top));
    if (last < bottom - eps || first > top + eps)
      throw CoverageError("phase slice ranges do not overlap");

    // Largest slice index at or below the reference bottom.
    std::int64_t start = 0;
    while (start + 1 < v.dims[2] && v.slice_position(start + 1) <= bottom + eps)
      ++start;
    start = std::min(start, v.dims[2] - ref_nz);
    start = std::max<std::int64_t>(start, 0);

    CtVolume t = v;
    t.dims[2] = ref_nz;
    t.origin[2] = v.slice_position(start);
    const std::int64_t plane = v.dims[0] * v.dims[1];
    t.voxels.assign(v.voxels.begin() + start * plane,
                    v.voxels.begin() + (start + ref_nz) * plane);
    *outs[i] = std::move(t);
  }
  return out;
}

// --- Threshold masking ------------------------------------------------------

// Binary mask of voxels with value in [lo, hi], keeping at most the two
// largest 6-connected components with at least `min_component_voxels` voxels
// (two kidneys). Throws EmptyMaskError when nothing survives.
inline CtVolume threshold_mask(const CtVolume& vol, double lo, double hi,
                               std::int64_t min_component_voxels) {
  vol.validate();
  if (vol.domain == VoxelDomain::Norm255)
    throw DomainError("threshold_mask expects an HU (or mask) volume");

  const std::int64_t n = vol.count();
  std::vector<std::int32_t> label(static_cast<std::size_t>(n), -1);
  struct Component {
    std::int32_t id;
    std::int64_t size;
    std::int64_t first;
  };
  std::vector<Component> comps;

  std::deque<std::int64_t> queue;
  std::int32_t next = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    if (label[i] >= 0 || vol.voxels[i] < lo || vol.voxels[i] > hi) continue;
    const std::int32_t id = next++;
    std::int64_t size = 0;
    label[i] = id;
    queue.push_back(i);
    while (!queue.empty()) {
      const std::int64_t cur = queue.front();
      queue.pop_front();
      ++size;
      const std::int64_t x = cur % vol.dims[0];
      const std::int64_t y = (cur / vol.dims[0]) % vol.dims[1];
      const std::int64_t z = cur / (vol.dims[0] * vol.dims[1]);
      const std::int64_t nb[6][3] = {{x - 1, y, z}, {x + 1, y, z},
                                     {x, y - 1, z}, {x, y + 1, z},
                                     {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& q : nb) {
        if (!vol.in_bounds(q[0], q[1], q[2])) continue;
        const std::int64_t j = vol.index(q[0], q[1], q[2]);
        if (label[j] >= 0 || vol.voxels[j] < lo || vol.voxels[j] > hi)
          continue;
        label[j] = id;
        queue.push_back(j);
      }
    }
    comps.push_back({id, size, i});
  }

  std::sort(comps.begin(), comps.end(), [](const Component& a,
                                           const Component& b) {
    if (a.size != b.size) return a.size > b.size;
    return a.first < b.first;
  });

  std::vector<bool> keep(static_cast<std::size_t>(next), false);
  int kept = 0;
  for (const Component& c : comps) {
    if (kept >= 2) break;
    if (c.size < min_component_voxels) continue;
    keep[static_cast<std::size_t>(c.id)] = true;
    ++kept;
  }
  if (kept == 0) throw EmptyMaskError("threshold mask is empty");

  CtVolume mask = vol;
  mask.domain = VoxelDomain::Mask;
  for (std::int64_t i = 0; i < n; ++i)
    mask.voxels[i] =
        (label[i] >= 0 && keep[static_cast<std::size_t>(label[i])]) ? 1.0
                                                                    : 0.0;
  return mask;
}

// --- Mask-driven cropping -----------------------------------------------------

// In-plane crop window plus the list of kept slices; computed once from the
// non-contrast mask and applied identically to every phase.
struct CropBox {
  std::int64_t x0 = 0, y0 = 0;
  std::int64_t nx = 0, ny = 0;
  std::vector<std::int64_t> slices;  // kept z indices, ascending
};

inline CropBox compute_crop_box(const CtVolume& mask,
                                std::array<std::int64_t, 2> target_xy) {
  mask.validate();
  if (target_xy[0] > mask.dims[0] || target_xy[1] > mask.dims[1])
    throw ShapeError("crop target larger than volume");

  std::int64_t xmin = mask.dims[0], xmax = -1;
  std::int64_t ymin = mask.dims[1], ymax = -1;
  std::vector<std::int64_t> slices;
  for (std::int64_t z = 0; z < mask.dims[2]; ++z) {
    bool any = false;
    for (std::int64_t y = 0; y < mask.dims[1]; ++y)
      for (std::int64_t x = 0; x < mask.dims[0]; ++x)
        if (mask.at(x, y, z) != 0.0) {
          any = true;
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
        }
    if (any) slices.push_back(z);
  }
  if (slices.empty()) throw EmptyMaskError("crop mask is empty");

  CropBox box;
  box.nx = target_xy[0];
  box.ny = target_xy[1];
  const std::int64_t cx = (xmin + xmax) / 2;
  const std::int64_t cy = (ymin + ymax) / 2;
  box.x0 = std::clamp<std::int64_t>(cx - box.nx / 2, 0, mask.dims[0] - box.nx);
  box.y0 = std::clamp<std::int64_t>(cy - box.ny / 2, 0, mask.dims[1] - box.ny);
  box.slices = std::move(slices);
  return box;
}

inline CtVolume apply_crop(const CtVolume& vol, const CropBox& box) {
  vol.validate();
  if (box.x0 + box.nx > vol.dims[0] || box.y0 + box.ny > vol.dims[1])
    throw ShapeError("crop box exceeds volume bounds");
  CtVolume out;
  out.dims = {box.nx, box.ny, static_cast<std::int64_t>(box.slices.size())};
  out.spacing = vol.spacing;
  out.domain = vol.domain;
  out.phase = vol.phase;
  // Origin shifts by exactly (crop offset * spacing).
  out.origin = {vol.origin[0] + static_cast<double>(box.x0) * vol.spacing[0],
                vol.origin[1] + static_cast<double>(box.y0) * vol.spacing[1],
                vol.origin[2] + (box.slices.empty()
                                     ? 0.0
                                     : static_cast<double>(box.slices[0]) *
                                           vol.spacing[2])};
  out.voxels.resize(static_cast<std::size_t>(out.count()));
  for (std::size_t zi = 0; zi < box.slices.size(); ++zi) {
    const std::int64_t z = box.slices[zi];
    if (z < 0 || z >= vol.dims[2]) throw ShapeError("crop slice out of range");
    for (std::int64_t y = 0; y < box.ny; ++y) {
      const double* src = &vol.voxels[vol.index(box.x0, box.y0 + y, z)];
      double* dst =
          &out.voxels[(static_cast<std::int64_t>(zi) * box.ny + y) * box.nx];
      std::copy(src, src + box.nx, dst);
    }
  }
  return out;
}

// Crops to `target_xy` in-plane, centered on the mask bounding box, and drops
// slices with no mask voxels.
inline CtVolume crop_to_mask(const CtVolume& vol, const CtVolume& mask,
                             std::array<std::int64_t, 2> target_xy) {
  if (vol.dims != mask.dims) throw ShapeError("mask dims must match volume");
  return apply_crop(vol, compute_crop_box(mask, target_xy));
}

// --- Mask utilities -----------------------------------------------------------

inline double dice(const CtVolume& a, const CtVolume& b) {
  if (a.dims != b.dims) throw ShapeError("dice requires equal dims");
  std::int64_t inter = 0, sa = 0, sb = 0;
  for (std::int64_t i = 0; i < a.count(); ++i) {
    const bool va = a.voxels[i] != 0.0;
    const bool vb = b.voxels[i] != 0.0;
    inter += (va && vb) ? 1 : 0;
    sa += va ? 1 : 0;
    sb += vb ? 1 : 0;
  }
  if (sa + sb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sa + sb);
}

// --- File format ---------------------------------------------------------------
//
// `<base>.ctvol.json` header + `<base>.ctvol.raw` little-endian float32
// payload, x-fastest. Masks use domain "MASK" with values in {0, 1}.

namespace detail {

inline void atomic_write(const std::filesystem::path& path,
                         const void* data, std::size_t size) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + tmp.string());
    os.write(static_cast<const char*>(data),
             static_cast<std::streamsize>(size));
    if (!os) throw IoError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void atomic_write(const std::filesystem::path& path,
                         const std::string& text) {
  atomic_write(path, text.data(), text.size());
}

}  // namespace detail

inline void save_volume(const CtVolume& vol, const std::filesystem::path& base) {
  static_assert(std::endian::native == std::endian::little,
                "raw payload is little-endian");
  vol.validate();
  nlohmann::json header{
      {"dims", {vol.dims[0], vol.dims[1], vol.dims[2]}},
      {"spacing_mm", {vol.spacing[0], vol.spacing[1], vol.spacing[2]}},
      {"origin_mm", {vol.origin[0], vol.origin[1], vol.origin[2]}},
      {"domain", to_string(vol.domain)},
      {"phase", to_string(vol.phase)},
      {"order", "x-fastest"},
  };
  std::vector<float> payload(vol.voxels.begin(), vol.voxels.end());
  detail::atomic_write(base.string() + ".ctvol.json", header.dump(2) + "\n");
  detail::atomic_write(base.string() + ".ctvol.raw", payload.data(),
                       payload.size() * sizeof(float));
}

inline CtVolume load_volume(const std::filesystem::path& base) {
  std::string stem = base.string();
  // Accept either the bare base path or the .ctvol.json path.
  const std::string suffix = ".ctvol.json";
  if (stem.size() >= suffix.size() &&
      stem.compare(stem.size() - suffix.size(), suffix.size(), suffix) == 0)
    stem = stem.substr(0, stem.size() - suffix.size());

  std::ifstream is(stem + ".ctvol.json");
  if (!is) throw IoError("cannot open volume header: " + stem + ".ctvol.json");
  nlohmann::json header;
  try {
    is >> header;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed volume header: ") + e.what());
  }

  CtVolume vol;
  try {
    const auto dims = header.at("dims");
    const auto spacing = header.at("spacing_mm");
    const auto origin = header.at("origin_mm");
    for (int i = 0; i < 3; ++i) {
      vol.dims[i] = dims.at(i).get<std::int64_t>();
      vol.spacing[i] = spacing.at(i).get<double>();
      vol.origin[i] = origin.at(i).get<double>();
    }
    vol.domain = domain_from_string(header.at("domain").get<std::string>());
    vol.phase = phase_from_string(header.at("phase").get<std::string>());
    if (header.at("order").get<std::string>() != "x-fastest")
      throw IoError("unsupported voxel order");
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed volume header: ") + e.what());
  }

  std::ifstream raw(stem + ".ctvol.raw", std::ios::binary);
  if (!raw) throw IoError("cannot open volume payload: " + stem + ".ctvol.raw");
  std::vector<float> payload(static_cast<std::size_t>(vol.dims[0]) *
                             vol.dims[1] * vol.dims[2]);
  raw.read(reinterpret_cast<char*>(payload.data()),
           static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (raw.gcount() !=
      static_cast<std::streamsize>(payload.size() * sizeof(float)))
    throw IoError("volume payload truncated: " + stem + ".ctvol.raw");
  vol.voxels.assign(payload.begin(), payload.end());
  vol.validate();
  return vol;
}

}  // namespace dsni
