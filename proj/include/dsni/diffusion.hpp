#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "dsni/errors.hpp"
#include "dsni/rng.hpp"
#include "dsni/swin.hpp"
#include "dsni/tensor.hpp"
#include "dsni/volume.hpp"

namespace dsni {

// --- noise schedule -----------------------------------------------------------

// Linear beta schedule with the standard derived tables. Tables are
// 1-indexed through the accessors; alpha_bar(0) is defined as 1.
struct NoiseSchedule {
  std::int64_t T = 0;
  std::vector<double> beta;       // beta_t, t = 1..T
  std::vector<double> alpha;      // 1 - beta_t
  std::vector<double> alpha_bar;  // prod_{s<=t} alpha_s

  double beta_at(std::int64_t t) const { return beta[check(t)]; }
  double alpha_at(std::int64_t t) const { return alpha[check(t)]; }
  double alpha_bar_at(std::int64_t t) const {
    return t == 0 ? 1.0 : alpha_bar[check(t)];
  }
  // posterior variance beta~_t = beta_t * (1 - abar_{t-1}) / (1 - abar_t)
  double posterior_variance(std::int64_t t) const {
    return beta_at(t) * (1.0 - alpha_bar_at(t - 1)) /
           (1.0 - alpha_bar_at(t));
  }

 private:
  std::size_t check(std::int64_t t) const {
    if (t < 1 || t > T) throw ConfigError("diffusion step out of range");
    return static_cast<std::size_t>(t - 1);
  }
};

inline NoiseSchedule make_schedule(std::int64_t T, double beta1, double betaT) {
  if (T < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta1 > 0.0) || !(beta1 <= betaT) || !(betaT < 1.0))
    throw ConfigError("schedule requires 0 < beta1 <= betaT < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta.resize(static_cast<std::size_t>(T));
  s.alpha.resize(static_cast<std::size_t>(T));
  s.alpha_bar.resize(static_cast<std::size_t>(T));
  double prod = 1.0;
  for (std::int64_t t = 1; t <= T; ++t) {
    const double frac =
        T == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
    const double b = beta1 + frac * (betaT - beta1);
    const double a = 1.0 - b;
    prod *= a;
    s.beta[static_cast<std::size_t>(t - 1)] = b;
    s.alpha[static_cast<std::size_t>(t - 1)] = a;
    s.alpha_bar[static_cast<std::size_t>(t - 1)] = prod;
  }
  return s;
}

// Desk-scale default: rescale the classic (1e-4, 0.02, T=1000) endpoints so a
// shorter chain accumulates a comparable total corruption.
inline NoiseSchedule make_default_schedule(std::int64_t T) {
  const double scale = 1000.0 / static_cast<double>(T);
  return make_schedule(T, 1e-4 * scale, std::min(0.999, 0.02 * scale));
}

// --- forward corruption -----------------------------------------------------------

// Closed form of the iterated Markov corruption:
//   x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline ad::Tensor q_sample(const ad::Tensor& x0, std::int64_t t,
                           const ad::Tensor& eps, const NoiseSchedule& s) {
  if (x0.shape != eps.shape) throw ShapeError("q_sample: eps shape mismatch");
  const double ab = s.alpha_bar_at(t);
  const double c0 = std::sqrt(ab);
  const double ce = std::sqrt(1.0 - ab);
  ad::Tensor out = x0;
  for (std::size_t i = 0; i < out.data.size(); ++i)
    out.data[i] = c0 * out.data[i] + ce * eps.data[i];
  return out;
}

// --- reverse sampling -----------------------------------------------------------

struct SamplerConfig {
  enum class Variance { PosteriorBeta, Beta };
  Variance variance = Variance::PosteriorBeta;
  std::uint64_t seed = 0;

  double sigma2(const NoiseSchedule& s, std::int64_t t) const {
    switch (variance) {
      case Variance::PosteriorBeta: return s.posterior_variance(t);
      case Variance::Beta: return s.beta_at(t);
    }
    return s.posterior_variance(t);
  }
};

// One reverse step:
//   mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
//   x_{t-1} = mu + sigma_t * z, with z = 0 forced at t = 1.
inline ad::Tensor p_sample_step(const ad::Tensor& x_t, std::int64_t t,
                                const ad::Tensor& eps_hat,
                                const NoiseSchedule& s,
                                const SamplerConfig& cfg,
                                const ad::Tensor& z) {
  if (x_t.shape != eps_hat.shape)
    throw ShapeError("p_sample_step: eps shape mismatch");
  const double ab = s.alpha_bar_at(t);
  const double k = s.beta_at(t) / std::sqrt(1.0 - ab);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
  const double sigma = t > 1 ? std::sqrt(cfg.sigma2(s, t)) : 0.0;
  if (t > 1 && x_t.shape != z.shape)
    throw ShapeError("p_sample_step: z shape mismatch");

  ad::Tensor out = x_t;
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    const double mu = (out.data[i] - k * eps_hat.data[i]) * inv_sqrt_alpha;
    const double v = t > 1 ? mu + sigma * z.data[i] : mu;
    if (!std::isfinite(v))
      throw NumericalError("non-finite value in reverse diffusion step");
    out.data[i] = v;
  }
  return out;
}

// Conversion between Norm255 intensities and the model domain [-1, 1].
inline ad::Tensor to_model_domain(const ad::Tensor& norm255) {
  ad::Tensor out = norm255;
  for (double& v : out.data) v = v / 127.5 - 1.0;
  return out;
}
inline ad::Tensor from_model_domain(const ad::Tensor& model) {
  ad::Tensor out = model;
  for (double& v : out.data) v = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
  return out;
}

// Full reverse loop conditioned on (non-contrast, excretory). `cond` is
// [2, D, H, W] in model domain; the result is [1, D, H, W] in Norm255.
// Deterministic given the sampler seed.
inline ad::Tensor p_sample_loop(const ad::Tensor& cond,
                                const ParamStore& params,
                                const NoiseSchedule& schedule,
                                const SwinConfig& mcfg,
                                const SamplerConfig& scfg) {
  if (cond.shape.size() != 4 || cond.shape[0] != 2)
    throw ShapeError("p_sample_loop: cond must be [2, D, H, W]");
  const ad::Shape xshape{1, cond.shape[1], cond.shape[2], cond.shape[3]};
  Rng rng(Rng::mix(scfg.seed, 0x5A3D1EULL));

  ad::Tensor x = ad::Tensor::zeros(xshape);
  for (double& v : x.data) v = rng.normal();

  ad::Tensor z = ad::Tensor::zeros(xshape);
  for (std::int64_t t = schedule.T; t >= 1; --t) {
    const ad::Tensor eps_hat = denoise_eps(params, x, t, cond, mcfg);
    if (t > 1)
      for (double& v : z.data) v = rng.normal();
    x = p_sample_step(x, t, eps_hat, schedule, scfg, z);
  }
  return from_model_domain(x);
}

// --- training -----------------------------------------------------------------

struct TrainConfig {
  double learning_rate = 2e-5;
  std::int64_t batch = 4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.01;
  enum class LossTarget { Epsilon, X0 };
  LossTarget target = LossTarget::Epsilon;  // MAE applied to this target
  std::int64_t steps = 1000;
  std::uint64_t seed = 0;
  std::int64_t validate_every = 100;

  void validate() const {
    if (learning_rate <= 0) throw ConfigError("learning rate must be > 0");
    if (batch < 1) throw ConfigError("batch size must be >= 1");
    if (steps < 1) throw ConfigError("step count must be >= 1");
  }
};

// Decoupled-weight-decay Adam over a ParamStore; moments in parameter order.
struct AdamWState {
  std::vector<ad::Tensor> m, v;
  std::int64_t step = 0;

  static AdamWState init(const ParamStore& ps) {
    AdamWState st;
    st.m.reserve(ps.tensors.size());
    st.v.reserve(ps.tensors.size());
    for (const auto& t : ps.tensors) {
      st.m.push_back(ad::Tensor::zeros(t.shape));
      st.v.push_back(ad::Tensor::zeros(t.shape));
    }
    return st;
  }
};

inline void adamw_update(ParamStore& params,
                         const std::vector<ad::Tensor>& grads,
                         AdamWState& state, const TrainConfig& cfg) {
  if (grads.size() != params.tensors.size())
    throw ShapeError("adamw_update: gradient count mismatch");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.tensors.size(); ++p) {
    auto& w = params.tensors[p].data;
    auto& m = state.m[p].data;
    auto& v = state.v[p].data;
    const auto& g = grads[p].data;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg.learning_rate *
              (mhat / (std::sqrt(vhat) + cfg.adam_eps) +
               cfg.weight_decay * w[i]);
    }
  }
}

// One training item: clean target volume plus its condition pair, both in
// model domain [-1, 1].
struct TrainItem {
  ad::Tensor x0;    // [1, D, H, W]
  ad::Tensor cond;  // [2, D, H, W]
};

// Predictor indirection so tests can substitute an oracle for the network.
using Predictor = std::function<ad::Var(ad::Tape&, const BoundParams&,
                                        const ad::Tensor& x_t, std::int64_t t,
                                        const ad::Tensor& cond)>;

inline Predictor denoiser_predictor(const SwinConfig& cfg) {
  return [cfg](ad::Tape& tape, const BoundParams& P, const ad::Tensor& x_t,
               std::int64_t t, const ad::Tensor& cond) {
    ad::Var vx = tape.input(x_t, false);
    ad::Var vc = tape.input(cond, false);
    return denoise_eps_forward(tape, P, vx, t, vc, cfg);
  };
}

// Runs one optimizer step over a batch: per item draw t and eps, form x_t,
// compute the MAE loss against the configured target, accumulate gradients
// in item order, then apply AdamW. Returns the batch loss.
inline double train_step(const std::vector<const TrainItem*>& batch,
                         ParamStore& params, AdamWState& state,
                         const NoiseSchedule& schedule, const TrainConfig& cfg,
                         const Predictor& predict, Rng& rng) {
  if (batch.empty()) throw ConfigError("empty training batch");
  std::vector<ad::Tensor> grads;
  grads.reserve(params.tensors.size());
  for (const auto& t : params.tensors) grads.push_back(ad::Tensor::zeros(t.shape));

  const double item_weight = 1.0 / static_cast<double>(batch.size());
  double loss_acc = 0.0;
  for (const TrainItem* item : batch) {
    const std::int64_t t =
        1 + static_cast<std::int64_t>(rng.integer(
                static_cast<std::uint64_t>(schedule.T)));
    ad::Tensor eps = ad::Tensor::zeros(item->x0.shape);
    for (double& v : eps.data) v = rng.normal();
    const ad::Tensor x_t = q_sample(item->x0, t, eps, schedule);

    ad::Tape tape;
    BoundParams P = bind_params(tape, params, true);
    ad::Var pred = predict(tape, P, x_t, t, item->cond);
    const ad::Tensor& target =
        cfg.target == TrainConfig::LossTarget::Epsilon ? eps : item->x0;
    ad::Var loss =
        ad::mean_all(ad::abs_(ad::sub(pred, tape.constant(target))));
    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) throw NumericalError("non-finite training loss");
    loss_acc += lv * item_weight;
    tape.backward(loss);
    for (std::size_t p = 0; p < grads.size(); ++p) {
      const auto& g = tape.grad(P.vars[p]);
      if (g.empty()) continue;
      auto& acc = grads[p].data;
      for (std::size_t i = 0; i < acc.size(); ++i)
        acc[i] += item_weight * g[i];
    }
  }
  adamw_update(params, grads, state, cfg);
  return loss_acc;
}

// Validation loss with deterministic (t, eps) draws derived from `seed`.
inline double validation_loss(const std::vector<TrainItem>& items,
                              const ParamStore& params,
                              const NoiseSchedule& schedule,
                              const TrainConfig& cfg, const Predictor& predict,
                              std::uint64_t seed) {
  if (items.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    Rng rng(Rng::mix(seed, 0xBA11ULL + i));
    const std::int64_t t =
        1 + static_cast<std::int64_t>(
                rng.integer(static_cast<std::uint64_t>(schedule.T)));
    ad::Tensor eps = ad::Tensor::zeros(items[i].x0.shape);
    for (double& v : eps.data) v = rng.normal();
    const ad::Tensor x_t = q_sample(items[i].x0, t, eps, schedule);
    ad::Tape tape;
    BoundParams P = bind_params(tape, params, false);
    ad::Var pred = predict(tape, P, x_t, t, items[i].cond);
    const ad::Tensor& target =
        cfg.target == TrainConfig::LossTarget::Epsilon ? eps : items[i].x0;
    ad::Var loss =
        ad::mean_all(ad::abs_(ad::sub(pred, tape.constant(target))));
    acc += loss.value()[0];
  }
  return acc / static_cast<double>(items.size());
}

// --- augmentation -----------------------------------------------------------

struct AugmentConfig {
  std::int64_t window_slices = 32;
  std::int64_t stride = 8;
  std::vector<int> rotations{0, 1, 2, 3};  // in-plane multiples of 90 degrees
  bool flip_x = true;
  bool flip_y = false;
  bool flip_z = false;

  void validate() const {
    if (window_slices < 1 || stride < 1)
      throw ConfigError("augment window/stride must be positive");
    for (int r : rotations)
      if (r < 0 || r > 3) throw ConfigError("rotations are multiples of 90");
    if (rotations.empty()) throw ConfigError("at least one rotation needed");
  }
};

namespace detail {

inline CtVolume rotate90_xy(const CtVolume& v, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return v;
  CtVolume out = v;
  const std::int64_t nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
  if (k == 1 || k == 3) {
    out.dims = {ny, nx, nz};
    out.voxels.resize(v.voxels.size());
  }
  for (std::int64_t z = 0; z < nz; ++z)
    for (std::int64_t y = 0; y < ny; ++y)
      for (std::int64_t x = 0; x < nx; ++x) {
        std::int64_t ox, oy;
        switch (k) {
          case 1: ox = ny - 1 - y; oy = x; break;       // 90 degrees
          case 2: ox = nx - 1 - x; oy = ny - 1 - y; break;
          default: ox = y; oy = nx - 1 - x; break;      // 270 degrees
        }
        out.voxels[(z * out.dims[1] + oy) * out.dims[0] + ox] = v.at(x, y, z);
      }
  return out;
}

inline CtVolume flip_axis(const CtVolume& v, int axis) {
  CtVolume out = v;
  for (std::int64_t z = 0; z < v.dims[2]; ++z)
    for (std::int64_t y = 0; y < v.dims[1]; ++y)
      for (std::int64_t x = 0; x < v.dims[0]; ++x) {
        const std::int64_t sx = axis == 0 ? v.dims[0] - 1 - x : x;
        const std::int64_t sy = axis == 1 ? v.dims[1] - 1 - y : y;
        const std::int64_t sz = axis == 2 ? v.dims[2] - 1 - z : z;
        out.at(x, y, z) = v.at(sx, sy, sz);
      }
  return out;
}

inline CtVolume z_window(const CtVolume& v, std::int64_t z0, std::int64_t nz) {
  CtVolume out = v;
  out.dims[2] = nz;
  out.origin[2] = v.slice_position(z0);
  const std::int64_t plane = v.dims[0] * v.dims[1];
  out.voxels.assign(v.voxels.begin() + z0 * plane,
                    v.voxels.begin() + (z0 + nz) * plane);
  return out;
}

}  // namespace detail

// Sliding z-windows followed by the configured rotation/flip group; every
// transform is applied identically to the three phases, so voxelwise phase
// correspondence is preserved.
inline std::vector<PhaseTriple> augment(const PhaseTriple& triple,
                                        const AugmentConfig& cfg) {
  cfg.validate();
  const std::int64_t nz = triple.noncontrast.dims[2];
  if (triple.nephrographic.dims != triple.noncontrast.dims ||
      triple.excretory.dims != triple.noncontrast.dims)
    throw ShapeError("augment expects equal-dims phases");
  if (cfg.window_slices > nz)
    throw ConfigError("augment window exceeds volume slices");

  std::vector<int> flips;  // -1 = none, else axis
  flips.push_back(-1);
  if (cfg.flip_x) flips.push_back(0);
  if (cfg.flip_y) flips.push_back(1);
  if (cfg.flip_z) flips.push_back(2);

  std::vector<PhaseTriple> out;
  for (std::int64_t z0 = 0; z0 + cfg.window_slices <= nz; z0 += cfg.stride) {
    PhaseTriple win;
    for (Phase p : kAllPhases)
      win.get(p) = detail::z_window(triple.get(p), z0, cfg.window_slices);
    for (int rot : cfg.rotations)
      for (int flip : flips) {
        PhaseTriple t;
        for (Phase p : kAllPhases) {
          CtVolume v = detail::rotate90_xy(win.get(p), rot);
          if (flip >= 0) v = detail::flip_axis(v, flip);
          t.get(p) = std::move(v);
        }
        out.push_back(std::move(t));
      }
  }
  return out;
}

}  // namespace dsni
