#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "dsni/errors.hpp"
#include "dsni/quality.hpp"
#include "dsni/rng.hpp"
#include "dsni/tensor.hpp"
#include "dsni/volume.hpp"

namespace dsni {

// --- PSNR / MAE ---------------------------------------------------------------

// 10 log10(L^2 / MSE); +inf for identical volumes.
inline double psnr(const CtVolume& a, const CtVolume& b, double L = 255.0) {
  if (a.dims != b.dims) throw ShapeError("psnr requires equal dims");
  double mse = 0.0;
  for (std::int64_t i = 0; i < a.count(); ++i) {
    const double d = a.voxels[i] - b.voxels[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.count());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(L * L / mse);
}

// Mean absolute error in Hounsfield units. Norm255 inputs are mapped back
// through the window first; HU inputs are compared directly.
inline double mae_hu(const CtVolume& a, const CtVolume& b,
                     const WindowSpec& w = {}) {
  if (a.dims != b.dims) throw ShapeError("mae_hu requires equal dims");
  if (a.domain != b.domain)
    throw DomainError("mae_hu requires matching domains");
  double scale = 1.0;
  if (a.domain == VoxelDomain::Norm255) {
    w.validate();
    scale = w.width / 255.0;  // the level offset cancels in the difference
  } else if (a.domain != VoxelDomain::HU) {
    throw DomainError("mae_hu expects HU or Norm255 volumes");
  }
  double acc = 0.0;
  for (std::int64_t i = 0; i < a.count(); ++i)
    acc += std::abs(a.voxels[i] - b.voxels[i]);
  return scale * acc / static_cast<double>(a.count());
}

// --- Frechet distance ------------------------------------------------------------

// Fixed-seed, untrained 3-layer strided conv network mapping any volume to a
// 64-dim feature vector. A documented substitute for the pretrained video
// network behind the paper-scale metric: absolute values are not comparable,
// only orderings are.
struct FeatureExtractor {
  std::uint64_t seed = 0;
  std::array<std::int64_t, 4> channels{1, 16, 32, 64};
  std::vector<ad::Tensor> kernels;  // [Cout, Cin, 3, 3, 3] per layer

  static FeatureExtractor make(std::uint64_t seed) {
    FeatureExtractor fx;
    fx.seed = seed;
    Rng rng(Rng::mix(seed, 0xFEA7ULL));
    for (int layer = 0; layer < 3; ++layer) {
      const std::int64_t cin = fx.channels[static_cast<std::size_t>(layer)];
      const std::int64_t cout =
          fx.channels[static_cast<std::size_t>(layer + 1)];
      // Orthogonal rows over the flattened fan-in; QR of a Gaussian matrix.
      const std::int64_t fan = cin * 27;
      Eigen::MatrixXd g(std::max(cout, fan), std::min(cout, fan));
      for (Eigen::Index i = 0; i < g.rows(); ++i)
        for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
      Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
      Eigen::MatrixXd q = qr.householderQ() *
                          Eigen::MatrixXd::Identity(g.rows(), g.cols());
      ad::Tensor k = ad::Tensor::zeros({cout, cin, 3, 3, 3});
      for (std::int64_t r = 0; r < cout; ++r)
        for (std::int64_t c = 0; c < fan; ++c)
          k.data[static_cast<std::size_t>(r * fan + c)] =
              cout <= fan ? q(c, r) : q(r, c);
      fx.kernels.push_back(std::move(k));
    }
    return fx;
  }

  // Volume -> 64-dim feature vector (strided convs, gelu, global mean pool).
  std::vector<double> features(const CtVolume& vol) const {
    ad::Tape tape;
    ad::Tensor x({1, vol.dims[2], vol.dims[1], vol.dims[0]}, vol.voxels);
    // normalize intensities to a stable range
    for (double& v : x.data) v = v / 255.0;
    ad::Var h = tape.constant(std::move(x));
    for (const ad::Tensor& k : kernels) {
      h = ad::conv3d(h, tape.constant(k), 2, 1);
      h = ad::gelu(h);
    }
    const ad::Shape& s = h.shape();
    const std::int64_t c = s[0];
    const std::int64_t inner = s[1] * s[2] * s[3];
    std::vector<double> out(static_cast<std::size_t>(c), 0.0);
    const auto& hv = h.value();
    for (std::int64_t i = 0; i < c; ++i) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < inner; ++j)
        acc += hv[static_cast<std::size_t>(i * inner + j)];
      out[static_cast<std::size_t>(i)] = acc / static_cast<double>(inner);
    }
    return out;
  }
};

// Frechet distance between two Gaussian fits:
//   ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^(1/2))
// The cross term uses the symmetric form (Sa^1/2 Sb Sa^1/2)^(1/2) via
// eigendecompositions; tiny negative eigenvalues are clipped to zero.
// Covariances of undersized sets get diagonal shrinkage.
inline double frechet_from_features(const std::vector<std::vector<double>>& fa,
                                    const std::vector<std::vector<double>>& fb) {
  if (fa.empty() || fb.empty())
    throw ShapeError("frechet distance needs non-empty feature sets");
  const std::int64_t d = static_cast<std::int64_t>(fa[0].size());
  for (const auto& f : fa)
    if (static_cast<std::int64_t>(f.size()) != d)
      throw ShapeError("inconsistent feature dims");
  for (const auto& f : fb)
    if (static_cast<std::int64_t>(f.size()) != d)
      throw ShapeError("inconsistent feature dims");

  const auto fit = [d](const std::vector<std::vector<double>>& fs,
                       Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
    const std::int64_t n = static_cast<std::int64_t>(fs.size());
    mu = Eigen::VectorXd::Zero(d);
    for (const auto& f : fs)
      for (std::int64_t i = 0; i < d; ++i) mu(i) += f[static_cast<std::size_t>(i)];
    mu /= static_cast<double>(n);
    cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : fs) {
      Eigen::VectorXd v(d);
      for (std::int64_t i = 0; i < d; ++i)
        v(i) = f[static_cast<std::size_t>(i)] - mu(i);
      cov.noalias() += v * v.transpose();
    }
    cov /= std::max<double>(1.0, static_cast<double>(n - 1));
    if (n < d + 1) {
      // shrinkage keeps the matrix square root well posed for small sets
      const double lam = 1e-3 * cov.trace() / static_cast<double>(d) + 1e-10;
      cov += lam * Eigen::MatrixXd::Identity(d, d);
    }
  };

  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd ca, cb;
  fit(fa, mu_a, ca);
  fit(fb, mu_b, cb);

  const auto psd_sqrt = [d](const Eigen::MatrixXd& m) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    if (es.info() != Eigen::Success)
      throw NumericalError("covariance eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    for (std::int64_t i = 0; i < d; ++i) {
      if (ev(i) < -1e-10 * std::max(1.0, std::abs(ev(d - 1))))
        throw NumericalError("covariance not positive semidefinite");
      ev(i) = std::sqrt(std::max(0.0, ev(i)));
    }
    return Eigen::MatrixXd(es.eigenvectors() * ev.asDiagonal() *
                           es.eigenvectors().transpose());
  };

  const Eigen::MatrixXd sa_half = psd_sqrt(ca);
  const Eigen::MatrixXd inner = sa_half * cb * sa_half;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(
      0.5 * (inner + inner.transpose()));
  if (es.info() != Eigen::Success)
    throw NumericalError("matrix square root failed");
  double tr_cross = 0.0;
  for (std::int64_t i = 0; i < d; ++i)
    tr_cross += std::sqrt(std::max(0.0, es.eigenvalues()(i)));

  const double mean_term = (mu_a - mu_b).squaredNorm();
  const double fd = mean_term + ca.trace() + cb.trace() - 2.0 * tr_cross;
  return std::max(0.0, fd);
}

inline double frechet_distance(const std::vector<CtVolume>& set_a,
                               const std::vector<CtVolume>& set_b,
                               const FeatureExtractor& fx) {
  std::vector<std::vector<double>> fa, fb;
  fa.reserve(set_a.size());
  fb.reserve(set_b.size());
  for (const CtVolume& v : set_a) fa.push_back(fx.features(v));
  for (const CtVolume& v : set_b) fb.push_back(fx.features(v));
  return frechet_from_features(fa, fb);
}

// --- ROI statistics ----------------------------------------------------------

struct RoiStats {
  double mean_hu = 0.0;
  std::vector<double> bin_edges;
  std::vector<std::int64_t> counts;
  std::int64_t voxel_count = 0;

  nlohmann::json to_json() const {
    return {{"mean_hu", mean_hu},
            {"bin_edges", bin_edges},
            {"counts", counts},
            {"voxel_count", voxel_count}};
  }
};

inline RoiStats roi_stats(const CtVolume& vol, const CtVolume& roi,
                          const std::vector<double>& bin_edges) {
  if (vol.dims != roi.dims) throw ShapeError("roi_stats requires equal dims");
  if (bin_edges.size() < 2) throw ConfigError("need at least two bin edges");
  for (std::size_t i = 1; i < bin_edges.size(); ++i)
    if (bin_edges[i] <= bin_edges[i - 1])
      throw ConfigError("bin edges must increase");

  RoiStats st;
  st.bin_edges = bin_edges;
  st.counts.assign(bin_edges.size() - 1, 0);
  double acc = 0.0;
  for (std::int64_t i = 0; i < vol.count(); ++i) {
    if (roi.voxels[i] == 0.0) continue;
    const double v = vol.voxels[i];
    acc += v;
    ++st.voxel_count;
    // values outside the histogram range land in the closest edge bin
    std::size_t bin = 0;
    while (bin + 2 < bin_edges.size() && v >= bin_edges[bin + 1]) ++bin;
    ++st.counts[bin];
  }
  if (st.voxel_count == 0) throw EmptyMaskError("roi_stats: empty ROI");
  st.mean_hu = acc / static_cast<double>(st.voxel_count);
  return st;
}

// --- report --------------------------------------------------------------------

struct CaseMetrics {
  std::string id;
  double psnr_db = 0.0;
  double ssim = 0.0;
  double mae_hu = 0.0;
};

struct MetricsReport {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double mae_hu = 0.0;
  double fvd = std::numeric_limits<double>::quiet_NaN();  // NaN = not computed
  std::vector<CaseMetrics> per_case;
  WindowSpec window;
  SsimConfig ssim_config;
  std::uint64_t extractor_seed = 0;
  nlohmann::json roi;  // optional ROI blocks

  nlohmann::json to_json() const {
    const auto num_or_string = [](double v) -> nlohmann::json {
      if (std::isnan(v)) return nullptr;
      if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
      return v;
    };
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : per_case)
      cases.push_back({{"id", c.id},
                       {"psnr_db", num_or_string(c.psnr_db)},
                       {"ssim", c.ssim},
                       {"mae_hu", c.mae_hu}});
    nlohmann::json j{
        {"psnr_db", num_or_string(psnr_db)},
        {"ssim", ssim},
        {"mae_hu", mae_hu},
        {"fvd", num_or_string(fvd)},
        {"per_case", cases},
        {"config",
         {{"window", {{"width", window.width}, {"level", window.level}}},
          {"ssim",
           {{"window", {ssim_config.window[0], ssim_config.window[1],
                        ssim_config.window[2]}},
            {"k1", ssim_config.k1},
            {"k2", ssim_config.k2},
            {"dynamic_range", ssim_config.dynamic_range}}},
          {"extractor_seed", extractor_seed}}},
    };
    if (!roi.is_null()) j["roi"] = roi;
    return j;
  }
};

}  // namespace dsni
