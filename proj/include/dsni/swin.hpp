#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dsni/errors.hpp"
#include "dsni/rng.hpp"
#include "dsni/tensor.hpp"

// The epsilon-prediction network: 3D patch embedding, two encoder stages of
// shifted-window attention blocks around one patch-merge downsample, an
// upsample with skip connection, residual conv blocks with time-embedding
// injection, and a zero-initialized output head. Channel-first volumes
// [C, D, H, W]; token grids are [gd, gh, gw, C] flattened to [N, C].

namespace dsni {

struct SwinConfig {
  std::int64_t in_channels = 3;  // noisy nephrographic + NC + EXC
  std::array<std::int64_t, 3> patch{2, 2, 2};    // (d, h, w)
  std::array<std::int64_t, 3> window{4, 4, 4};
  std::array<std::int64_t, 3> shift{2, 2, 2};    // half-window default
  std::int64_t embed_dim = 48;
  std::array<std::int64_t, 2> heads{3, 6};
  std::array<std::int64_t, 2> depths{2, 2};
  std::int64_t time_dim = 48;
  std::int64_t decoder_resblocks = 2;
  double mlp_ratio = 4.0;

  std::int64_t stage_dim(int stage) const {
    return stage == 0 ? embed_dim : embed_dim * 2;
  }

  void validate() const {
    for (int s = 0; s < 2; ++s)
      if (stage_dim(s) % heads[static_cast<std::size_t>(s)] != 0)
        throw ConfigError("embed dim must be divisible by head count");
    for (int a = 0; a < 3; ++a) {
      if (patch[a] < 1 || window[a] < 1)
        throw ConfigError("patch and window must be positive");
      if (shift[a] < 0 || shift[a] >= window[a])
        throw ConfigError("shift must be smaller than the window");
    }
    if (time_dim <= 0 || time_dim % 2 != 0)
      throw ConfigError("time embedding dim must be positive and even");
    if (embed_dim < 2) throw ConfigError("embed dim too small");
    if (decoder_resblocks < 1)
      throw ConfigError("at least one decoder resblock");
    if (mlp_ratio <= 0) throw ConfigError("mlp ratio must be positive");
  }
};

// Ordered, named parameter set; insertion order defines the checkpoint
// manifest order and never changes across versions.
struct ParamStore {
  std::vector<std::string> names;
  std::vector<ad::Tensor> tensors;
  std::map<std::string, std::size_t> index;

  ad::Tensor& add(const std::string& name, ad::Tensor t) {
    if (index.count(name)) throw ConfigError("duplicate parameter: " + name);
    index[name] = tensors.size();
    names.push_back(name);
    tensors.push_back(std::move(t));
    return tensors.back();
  }
  bool has(const std::string& name) const { return index.count(name) != 0; }
  const ad::Tensor& get(const std::string& name) const {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter: " + name);
    return tensors[it->second];
  }
  ad::Tensor& get(const std::string& name) {
    auto it = index.find(name);
    if (it == index.end()) throw ConfigError("unknown parameter: " + name);
    return tensors[it->second];
  }
  std::size_t count() const { return tensors.size(); }
  std::int64_t total_values() const {
    std::int64_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }
};

// Tape-bound view of a ParamStore.
struct BoundParams {
  const ParamStore* store = nullptr;
  std::vector<ad::Var> vars;

  ad::Var operator[](const std::string& name) const {
    auto it = store->index.find(name);
    if (it == store->index.end())
      throw ConfigError("unknown parameter: " + name);
    return vars[it->second];
  }
};

inline BoundParams bind_params(ad::Tape& tape, const ParamStore& ps,
                               bool requires_grad) {
  BoundParams bp;
  bp.store = &ps;
  bp.vars.reserve(ps.tensors.size());
  for (const auto& t : ps.tensors) bp.vars.push_back(tape.input(t, requires_grad));
  return bp;
}

// --- time embedding ----------------------------------------------------------

// Interleaved sin/cos of the step index at geometrically spaced frequencies;
// e[2i] = sin(t * w_i), e[2i+1] = cos(t * w_i), w_i = 10000^(-i/(dim/2)).
inline ad::Tensor sinusoidal_time_embed(std::int64_t t, std::int64_t dim) {
  if (t < 0) throw ConfigError("time step must be non-negative");
  if (dim <= 0 || dim % 2 != 0)
    throw ConfigError("time embedding dim must be even");
  ad::Tensor out = ad::Tensor::zeros({dim});
  const std::int64_t half = dim / 2;
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) *
                                 static_cast<double>(i) /
                                 static_cast<double>(half));
    const double arg = static_cast<double>(t) * freq;
    out.data[static_cast<std::size_t>(2 * i)] = std::sin(arg);
    out.data[static_cast<std::size_t>(2 * i + 1)] = std::cos(arg);
  }
  return out;
}

// --- window partition / reverse ------------------------------------------------

namespace swin_detail {

// [gd, gh, gw, C] -> [nw, window_volume, C]; dims must divide.
inline ad::Var partition_grid(ad::Var grid,
                              const std::array<std::int64_t, 3>& win) {
  const ad::Shape& s = grid.shape();
  const std::int64_t gd = s[0], gh = s[1], gw = s[2], c = s[3];
  if (gd % win[0] || gh % win[1] || gw % win[2])
    throw ShapeError("window_partition: dims not divisible by window");
  const std::int64_t nd = gd / win[0], nh = gh / win[1], nw = gw / win[2];
  ad::Var x = ad::reshape(grid, {nd, win[0], nh, win[1], nw, win[2], c});
  x = ad::permute(x, {0, 2, 4, 1, 3, 5, 6});
  return ad::reshape(x, {nd * nh * nw, win[0] * win[1] * win[2], c});
}

inline ad::Var reverse_grid(ad::Var wins, const std::array<std::int64_t, 3>& win,
                            std::int64_t gd, std::int64_t gh, std::int64_t gw) {
  const ad::Shape& s = wins.shape();
  const std::int64_t c = s[2];
  const std::int64_t nd = gd / win[0], nh = gh / win[1], nw = gw / win[2];
  if (s[0] != nd * nh * nw || s[1] != win[0] * win[1] * win[2])
    throw ShapeError("window_reverse: window count mismatch");
  ad::Var x = ad::reshape(wins, {nd, nh, nw, win[0], win[1], win[2], c});
  x = ad::permute(x, {0, 3, 1, 4, 2, 5, 6});
  return ad::reshape(x, {gd, gh, gw, c});
}

}  // namespace swin_detail

// Spec surface: x[C, D, H, W] -> [num_windows, window_volume, C]. Bijective
// with window_reverse below.
inline ad::Var window_partition(ad::Var x,
                                const std::array<std::int64_t, 3>& win) {
  const ad::Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("window_partition: expects [C,D,H,W]");
  ad::Var grid = ad::permute(x, {1, 2, 3, 0});  // -> [D, H, W, C]
  return swin_detail::partition_grid(grid, win);
}

inline ad::Var window_reverse(ad::Var wins,
                              const std::array<std::int64_t, 3>& win,
                              const ad::Shape& cdhw) {
  if (cdhw.size() != 4) throw ShapeError("window_reverse: expects [C,D,H,W]");
  ad::Var grid =
      swin_detail::reverse_grid(wins, win, cdhw[1], cdhw[2], cdhw[3]);
  return ad::permute(grid, {3, 0, 1, 2});
}

// --- attention -----------------------------------------------------------------

struct AttentionParams {
  ad::Var qkv_w, qkv_b;    // [C, 3C], [3C]
  ad::Var proj_w, proj_b;  // [C, C], [C]
  ad::Var rel_bias;        // [(2wd-1)(2wh-1)(2ww-1), heads]
};

namespace swin_detail {

// Relative-position index per (query, key) pair inside one window.
inline std::vector<std::int64_t> relative_index(
    const std::array<std::int64_t, 3>& win) {
  const std::int64_t wv = win[0] * win[1] * win[2];
  std::vector<std::array<std::int64_t, 3>> coords;
  coords.reserve(static_cast<std::size_t>(wv));
  for (std::int64_t d = 0; d < win[0]; ++d)
    for (std::int64_t h = 0; h < win[1]; ++h)
      for (std::int64_t w = 0; w < win[2]; ++w)
        coords.push_back({d, h, w});
  std::vector<std::int64_t> idx(static_cast<std::size_t>(wv * wv));
  const std::int64_t sh = 2 * win[1] - 1, sw = 2 * win[2] - 1;
  for (std::int64_t a = 0; a < wv; ++a)
    for (std::int64_t b = 0; b < wv; ++b) {
      const std::int64_t dd = coords[a][0] - coords[b][0] + win[0] - 1;
      const std::int64_t dh = coords[a][1] - coords[b][1] + win[1] - 1;
      const std::int64_t dw = coords[a][2] - coords[b][2] + win[2] - 1;
      idx[static_cast<std::size_t>(a * wv + b)] = (dd * sh + dh) * sw + dw;
    }
  return idx;
}

// Additive attention mask for one (padded grid, window, shift) combination.
// Position ids follow the standard shifted-window scheme: the id of a grid
// position classifies the contiguous run of post-roll content that sits
// there, with one extra id for positions holding padded content. Pairs with
// different ids get -inf. Returns an empty tensor when nothing is masked.
inline ad::Tensor build_attention_mask(
    const std::array<std::int64_t, 3>& padded,
    const std::array<std::int64_t, 3>& orig,
    const std::array<std::int64_t, 3>& win,
    const std::array<std::int64_t, 3>& shift, std::int64_t heads) {
  const bool any_shift = shift[0] || shift[1] || shift[2];
  const bool any_pad = padded != orig;
  if (!any_shift && !any_pad) return {};

  auto axis_ids = [](std::int64_t g, std::int64_t o, std::int64_t w,
                     std::int64_t s) {
    std::vector<std::int8_t> ids(static_cast<std::size_t>(g));
    for (std::int64_t p = 0; p < g; ++p) {
      const std::int64_t content = (p + s) % g;
      if (content >= o) {
        ids[static_cast<std::size_t>(p)] = 3;  // padded content
      } else if (s == 0 || p < g - w) {
        ids[static_cast<std::size_t>(p)] = 0;
      } else if (p < g - s) {
        ids[static_cast<std::size_t>(p)] = 1;
      } else {
        ids[static_cast<std::size_t>(p)] = 2;
      }
    }
    return ids;
  };
  const auto idd = axis_ids(padded[0], orig[0], win[0], shift[0]);
  const auto idh = axis_ids(padded[1], orig[1], win[1], shift[1]);
  const auto idw = axis_ids(padded[2], orig[2], win[2], shift[2]);

  const std::int64_t nd = padded[0] / win[0], nh = padded[1] / win[1],
                     nw = padded[2] / win[2];
  const std::int64_t wv = win[0] * win[1] * win[2];
  const std::int64_t num_windows = nd * nh * nw;
  const double neg_inf = -std::numeric_limits<double>::infinity();

  ad::Tensor mask = ad::Tensor::zeros({num_windows, heads, wv, wv});
  std::vector<std::int16_t> wid(static_cast<std::size_t>(wv));
  std::int64_t widx = 0;
  for (std::int64_t bd = 0; bd < nd; ++bd)
    for (std::int64_t bh = 0; bh < nh; ++bh)
      for (std::int64_t bw = 0; bw < nw; ++bw, ++widx) {
        std::int64_t k = 0;
        for (std::int64_t d = 0; d < win[0]; ++d)
          for (std::int64_t h = 0; h < win[1]; ++h)
            for (std::int64_t w = 0; w < win[2]; ++w, ++k)
              wid[static_cast<std::size_t>(k)] = static_cast<std::int16_t>(
                  (idd[static_cast<std::size_t>(bd * win[0] + d)] * 4 +
                   idh[static_cast<std::size_t>(bh * win[1] + h)]) *
                      4 +
                  idw[static_cast<std::size_t>(bw * win[2] + w)]);
        bool any = false;
        for (std::int64_t a = 0; a < wv; ++a)
          for (std::int64_t b = 0; b < wv; ++b)
            if (wid[static_cast<std::size_t>(a)] !=
                wid[static_cast<std::size_t>(b)]) {
              any = true;
              for (std::int64_t hd = 0; hd < heads; ++hd)
                mask.data[static_cast<std::size_t>(
                    ((widx * heads + hd) * wv + a) * wv + b)] = neg_inf;
            }
        (void)any;
      }
  return mask;
}

}  // namespace swin_detail

// Cyclic-shift windowed multi-head self-attention with relative-position
// bias. `x` is a token grid [gd, gh, gw, C]. Axes whose (padded) extent
// equals the window size are not shifted. Pass `attn_out` to capture the
// post-softmax attention weights [nw, heads, wv, wv].
inline ad::Var shifted_window_attention(
    ad::Var x, const AttentionParams& p, std::int64_t heads,
    const std::array<std::int64_t, 3>& win,
    const std::array<std::int64_t, 3>& shift, ad::Var* attn_out = nullptr) {
  const ad::Shape s = x.shape();
  if (s.size() != 4) throw ShapeError("attention expects [gd, gh, gw, C]");
  const std::int64_t c = s[3];
  if (c % heads != 0) throw ShapeError("channels not divisible by heads");
  const std::int64_t dh = c / heads;
  const std::array<std::int64_t, 3> orig{s[0], s[1], s[2]};

  std::array<std::int64_t, 3> padded{};
  std::array<std::int64_t, 3> eff_shift{};
  for (int a = 0; a < 3; ++a) {
    padded[a] = (orig[a] + win[a] - 1) / win[a] * win[a];
    eff_shift[a] = (padded[a] == win[a]) ? 0 : shift[a];
  }

  ad::Var g = x;
  if (padded != orig)
    g = ad::pad(g, {0, 0, 0, 0},
                {padded[0] - orig[0], padded[1] - orig[1],
                 padded[2] - orig[2], 0});
  const bool any_shift = eff_shift[0] || eff_shift[1] || eff_shift[2];
  if (any_shift)
    g = ad::roll(g, {-eff_shift[0], -eff_shift[1], -eff_shift[2], 0});

  ad::Var wins = swin_detail::partition_grid(g, win);  // [nw, wv, C]
  const std::int64_t num_windows = wins.shape()[0];
  const std::int64_t wv = wins.shape()[1];

  ad::Var qkv = ad::reshape(wins, {num_windows * wv, c});
  qkv = ad::shift_channels_last(ad::matmul(qkv, p.qkv_w), p.qkv_b);
  qkv = ad::reshape(qkv, {num_windows, wv, 3, heads, dh});
  qkv = ad::permute(qkv, {2, 0, 3, 1, 4});  // [3, nw, heads, wv, dh]
  const std::int64_t nb = num_windows * heads;
  ad::Var q = ad::reshape(
      ad::slice(qkv, {0, 0, 0, 0, 0}, {1, num_windows, heads, wv, dh}),
      {nb, wv, dh});
  ad::Var k = ad::reshape(
      ad::slice(qkv, {1, 0, 0, 0, 0}, {2, num_windows, heads, wv, dh}),
      {nb, wv, dh});
  ad::Var v = ad::reshape(
      ad::slice(qkv, {2, 0, 0, 0, 0}, {3, num_windows, heads, wv, dh}),
      {nb, wv, dh});

  ad::Var scores = ad::bmm(q, ad::permute(k, {0, 2, 1}));
  scores = ad::scale(scores, 1.0 / std::sqrt(static_cast<double>(dh)));
  scores = ad::reshape(scores, {num_windows, heads, wv, wv});

  // learned relative-position bias, shared across windows
  ad::Var bias = ad::index_select(p.rel_bias, swin_detail::relative_index(win));
  bias = ad::permute(ad::reshape(bias, {wv, wv, heads}), {2, 0, 1});
  scores = ad::add_bias_batched(scores, bias);

  ad::Tensor mask = swin_detail::build_attention_mask(padded, orig, win,
                                                      eff_shift, heads);
  if (!mask.data.empty())
    scores = ad::add(scores, x.tape()->constant(std::move(mask)));

  ad::Var attn = ad::softmax(scores, 3);
  if (attn_out) *attn_out = attn;

  ad::Var ctx = ad::bmm(ad::reshape(attn, {nb, wv, wv}), v);  // [nb, wv, dh]
  ctx = ad::permute(ad::reshape(ctx, {num_windows, heads, wv, dh}),
                    {0, 2, 1, 3});
  ctx = ad::reshape(ctx, {num_windows * wv, c});
  ctx = ad::shift_channels_last(ad::matmul(ctx, p.proj_w), p.proj_b);
  ctx = ad::reshape(ctx, {num_windows, wv, c});

  ad::Var out =
      swin_detail::reverse_grid(ctx, win, padded[0], padded[1], padded[2]);
  if (any_shift)
    out = ad::roll(out, {eff_shift[0], eff_shift[1], eff_shift[2], 0});
  if (padded != orig)
    out = ad::slice(out, {0, 0, 0, 0}, {orig[0], orig[1], orig[2], c});
  return out;
}

// --- parameter initialization ------------------------------------------------

namespace swin_detail {

inline void add_norm(ParamStore& ps, const std::string& prefix,
                     std::int64_t c) {
  ps.add(prefix + ".g", ad::Tensor::full({c}, 1.0));
  ps.add(prefix + ".b", ad::Tensor::zeros({c}));
}

inline void add_linear(ParamStore& ps, const std::string& prefix,
                       std::int64_t in, std::int64_t out, Rng& rng,
                       double stddev = 0.02) {
  ps.add(prefix + ".w", ad::Tensor::randn({in, out}, rng, stddev));
  ps.add(prefix + ".b", ad::Tensor::zeros({out}));
}

inline void add_block(ParamStore& ps, const std::string& prefix,
                      std::int64_t c, std::int64_t heads,
                      const std::array<std::int64_t, 3>& win, double mlp_ratio,
                      Rng& rng) {
  const std::int64_t rel =
      (2 * win[0] - 1) * (2 * win[1] - 1) * (2 * win[2] - 1);
  add_norm(ps, prefix + ".norm1", c);
  add_linear(ps, prefix + ".attn.qkv", c, 3 * c, rng);
  add_linear(ps, prefix + ".attn.proj", c, c, rng);
  ps.add(prefix + ".attn.relbias", ad::Tensor::randn({rel, heads}, rng, 0.02));
  add_norm(ps, prefix + ".norm2", c);
  const std::int64_t hidden =
      std::max<std::int64_t>(1, static_cast<std::int64_t>(
                                    std::llround(mlp_ratio * static_cast<double>(c))));
  add_linear(ps, prefix + ".mlp.fc1", c, hidden, rng);
  add_linear(ps, prefix + ".mlp.fc2", hidden, c, rng);
}

}  // namespace swin_detail

inline ParamStore init_denoiser_params(const SwinConfig& cfg,
                                       std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::mix(seed, 0xD5F0517ULL));
  ParamStore ps;
  const std::int64_t c1 = cfg.stage_dim(0);
  const std::int64_t c2 = cfg.stage_dim(1);
  const std::int64_t pvol = cfg.patch[0] * cfg.patch[1] * cfg.patch[2];

  swin_detail::add_linear(ps, "patch_embed", cfg.in_channels * pvol, c1, rng);
  swin_detail::add_linear(ps, "time.fc", cfg.time_dim, cfg.time_dim, rng);

  for (std::int64_t i = 0; i < cfg.depths[0]; ++i)
    swin_detail::add_block(ps, "enc1.blk" + std::to_string(i), c1,
                           cfg.heads[0], cfg.window, cfg.mlp_ratio, rng);
  swin_detail::add_norm(ps, "merge.norm", 8 * c1);
  ps.add("merge.w", ad::Tensor::randn({8 * c1, c2}, rng, 0.02));
  for (std::int64_t i = 0; i < cfg.depths[1]; ++i)
    swin_detail::add_block(ps, "enc2.blk" + std::to_string(i), c2,
                           cfg.heads[1], cfg.window, cfg.mlp_ratio, rng);
  swin_detail::add_linear(ps, "up", c2, c1, rng);

  for (std::int64_t r = 0; r < cfg.decoder_resblocks; ++r) {
    const std::string p = "dec.res" + std::to_string(r);
    swin_detail::add_norm(ps, p + ".norm1", c1);
    ps.add(p + ".conv1.w", ad::Tensor::randn({c1, c1, 3, 3, 3}, rng, 0.02));
    ps.add(p + ".conv1.b", ad::Tensor::zeros({c1}));
    swin_detail::add_linear(ps, p + ".temb", cfg.time_dim, c1, rng);
    swin_detail::add_norm(ps, p + ".norm2", c1);
    // zero-initialized: the block is the identity at initialization
    ps.add(p + ".conv2.w", ad::Tensor::zeros({c1, c1, 3, 3, 3}));
    ps.add(p + ".conv2.b", ad::Tensor::zeros({c1}));
  }

  swin_detail::add_norm(ps, "head.norm", c1);
  // zero-initialized head: the fresh network predicts exactly zero noise
  ps.add("head.w", ad::Tensor::zeros({c1, pvol}));
  ps.add("head.b", ad::Tensor::zeros({pvol}));
  return ps;
}

// Parameter count is a pure function of the config.
inline std::int64_t denoiser_param_count(const SwinConfig& cfg) {
  return init_denoiser_params(cfg, 0).total_values();
}

// --- model forward -------------------------------------------------------------

namespace swin_detail {

inline ad::Var layer_norm_affine(ad::Var x, ad::Var g, ad::Var b,
                                 std::size_t axis) {
  return ad::shift_channels_last(
      ad::scale_channels_last(ad::layernorm(x, axis), g), b);
}

inline ad::Var swin_block(ad::Var tokens, const BoundParams& P,
                          const std::string& prefix,
                          const std::array<std::int64_t, 3>& grid,
                          std::int64_t heads, const SwinConfig& cfg,
                          bool shifted) {
  const std::int64_t n = tokens.shape()[0];
  const std::int64_t c = tokens.shape()[1];
  AttentionParams ap{P[prefix + ".attn.qkv.w"], P[prefix + ".attn.qkv.b"],
                     P[prefix + ".attn.proj.w"], P[prefix + ".attn.proj.b"],
                     P[prefix + ".attn.relbias"]};
  ad::Var h = layer_norm_affine(tokens, P[prefix + ".norm1.g"],
                                P[prefix + ".norm1.b"], 1);
  h = ad::reshape(h, {grid[0], grid[1], grid[2], c});
  const std::array<std::int64_t, 3> shift =
      shifted ? cfg.shift : std::array<std::int64_t, 3>{0, 0, 0};
  h = shifted_window_attention(h, ap, heads, cfg.window, shift);
  h = ad::reshape(h, {n, c});
  tokens = ad::add(tokens, h);

  ad::Var m = layer_norm_affine(tokens, P[prefix + ".norm2.g"],
                                P[prefix + ".norm2.b"], 1);
  m = ad::shift_channels_last(ad::matmul(m, P[prefix + ".mlp.fc1.w"]),
                              P[prefix + ".mlp.fc1.b"]);
  m = ad::gelu(m);
  m = ad::shift_channels_last(ad::matmul(m, P[prefix + ".mlp.fc2.w"]),
                              P[prefix + ".mlp.fc2.b"]);
  return ad::add(tokens, m);
}

}  // namespace swin_detail

// One residual conv block: x + ConvBlock(x, t); the final convolution is
// zero-initialized so a fresh block is the identity.
inline ad::Var resblock(ad::Var x, const BoundParams& P,
                        const std::string& prefix, ad::Var time_embed) {
  const ad::Shape& s = x.shape();
  if (s.size() != 4) throw ShapeError("resblock expects [C, D, H, W]");
  ad::Var h = ad::layernorm(x, 0);
  h = ad::shift_channels_first(
      ad::scale_channels_first(h, P[prefix + ".norm1.g"]),
      P[prefix + ".norm1.b"]);
  h = ad::gelu(h);
  h = ad::conv3d(h, P[prefix + ".conv1.w"], 1, 1);
  h = ad::shift_channels_first(h, P[prefix + ".conv1.b"]);
  ad::Var temb = ad::shift_channels_last(
      ad::matmul(time_embed, P[prefix + ".temb.w"]), P[prefix + ".temb.b"]);
  h = ad::shift_channels_first(h, ad::reshape(temb, {h.shape()[0]}));
  h = ad::layernorm(h, 0);
  h = ad::shift_channels_first(
      ad::scale_channels_first(h, P[prefix + ".norm2.g"]),
      P[prefix + ".norm2.b"]);
  h = ad::gelu(h);
  h = ad::conv3d(h, P[prefix + ".conv2.w"], 1, 1);
  h = ad::shift_channels_first(h, P[prefix + ".conv2.b"]);
  return ad::add(x, h);
}

namespace swin_detail {

// Nearest-neighbor 2x upsample of a token grid [gd, gh, gw, C].
inline ad::Var upsample2x(ad::Var grid) {
  const ad::Shape& s = grid.shape();
  const std::int64_t gd = s[0], gh = s[1], gw = s[2], c = s[3];
  ad::Var x = ad::reshape(grid, {gd, 1, gh, 1, gw, 1, c});
  x = ad::concat({x, x}, 1);
  x = ad::concat({x, x}, 3);
  x = ad::concat({x, x}, 5);
  return ad::reshape(x, {2 * gd, 2 * gh, 2 * gw, c});
}

}  // namespace swin_detail

// Full epsilon-prediction forward pass on an existing tape. x_t: [1, D, H, W]
// in the model domain [-1, 1]; cond: [2, D, H, W] (non-contrast, excretory);
// t: diffusion step index. Returns [1, D, H, W].
inline ad::Var denoise_eps_forward(ad::Tape& tape, const BoundParams& P,
                                   ad::Var x_t, std::int64_t t, ad::Var cond,
                                   const SwinConfig& cfg) {
  cfg.validate();
  const ad::Shape& sx = x_t.shape();
  const ad::Shape& sc = cond.shape();
  if (sx.size() != 4 || sc.size() != 4 || sx[0] != 1 ||
      sc[0] != cfg.in_channels - 1 || sx[1] != sc[1] || sx[2] != sc[2] ||
      sx[3] != sc[3])
    throw ShapeError("denoise_eps: x_t and cond must be [1|2, D, H, W]");

  const std::int64_t d0 = sx[1], h0 = sx[2], w0 = sx[3];
  ad::Var x = ad::concat({x_t, cond}, 0);  // [3, D, H, W]

  // pad spatial dims to patch multiples
  const std::int64_t dp = (d0 + cfg.patch[0] - 1) / cfg.patch[0] * cfg.patch[0];
  const std::int64_t hp = (h0 + cfg.patch[1] - 1) / cfg.patch[1] * cfg.patch[1];
  const std::int64_t wp = (w0 + cfg.patch[2] - 1) / cfg.patch[2] * cfg.patch[2];
  if (dp != d0 || hp != h0 || wp != w0)
    x = ad::pad(x, {0, 0, 0, 0}, {0, dp - d0, hp - h0, wp - w0});

  const std::array<std::int64_t, 3> grid1{dp / cfg.patch[0], hp / cfg.patch[1],
                                          wp / cfg.patch[2]};
  const std::int64_t n1 = grid1[0] * grid1[1] * grid1[2];
  const std::int64_t c1 = cfg.stage_dim(0);
  const std::int64_t c2 = cfg.stage_dim(1);
  const std::int64_t pvol = cfg.patch[0] * cfg.patch[1] * cfg.patch[2];

  // patch embedding as an exact reshape + linear (kernel = stride = patch)
  ad::Var tok = ad::reshape(x, {cfg.in_channels, grid1[0], cfg.patch[0],
                                grid1[1], cfg.patch[1], grid1[2], cfg.patch[2]});
  tok = ad::permute(tok, {1, 3, 5, 0, 2, 4, 6});
  tok = ad::reshape(tok, {n1, cfg.in_channels * pvol});
  tok = ad::shift_channels_last(ad::matmul(tok, P["patch_embed.w"]),
                                P["patch_embed.b"]);

  // time embedding trunk
  ad::Var temb = tape.constant(
      ad::Tensor({1, cfg.time_dim},
                 sinusoidal_time_embed(t, cfg.time_dim).data));
  temb = ad::gelu(ad::shift_channels_last(ad::matmul(temb, P["time.fc.w"]),
                                          P["time.fc.b"]));

  // encoder stage 1
  for (std::int64_t i = 0; i < cfg.depths[0]; ++i)
    tok = swin_detail::swin_block(tok, P, "enc1.blk" + std::to_string(i),
                                  grid1, cfg.heads[0], cfg, i % 2 == 1);
  ad::Var skip = tok;

  // patch merge (grid padded to even extents when necessary)
  std::array<std::int64_t, 3> gpad{};
  for (int a = 0; a < 3; ++a) gpad[a] = (grid1[a] + 1) / 2 * 2;
  ad::Var m = ad::reshape(tok, {grid1[0], grid1[1], grid1[2], c1});
  if (gpad != grid1)
    m = ad::pad(m, {0, 0, 0, 0},
                {gpad[0] - grid1[0], gpad[1] - grid1[1], gpad[2] - grid1[2],
                 0});
  const std::array<std::int64_t, 3> grid2{gpad[0] / 2, gpad[1] / 2,
                                          gpad[2] / 2};
  const std::int64_t n2 = grid2[0] * grid2[1] * grid2[2];
  m = ad::reshape(m, {grid2[0], 2, grid2[1], 2, grid2[2], 2, c1});
  m = ad::permute(m, {0, 2, 4, 1, 3, 5, 6});
  m = ad::reshape(m, {n2, 8 * c1});
  m = swin_detail::layer_norm_affine(m, P["merge.norm.g"], P["merge.norm.b"],
                                     1);
  ad::Var tok2 = ad::matmul(m, P["merge.w"]);

  // encoder stage 2
  for (std::int64_t i = 0; i < cfg.depths[1]; ++i)
    tok2 = swin_detail::swin_block(tok2, P, "enc2.blk" + std::to_string(i),
                                   grid2, cfg.heads[1], cfg, i % 2 == 1);

  // upsample + skip connection
  ad::Var up = ad::shift_channels_last(ad::matmul(tok2, P["up.w"]), P["up.b"]);
  up = ad::reshape(up, {grid2[0], grid2[1], grid2[2], c1});
  up = swin_detail::upsample2x(up);
  if (gpad != grid1)
    up = ad::slice(up, {0, 0, 0, 0}, {grid1[0], grid1[1], grid1[2], c1});
  ad::Var dec = ad::add(ad::reshape(up, {n1, c1}), skip);

  // decoder resblocks on the channel-first token grid
  ad::Var vol = ad::permute(
      ad::reshape(dec, {grid1[0], grid1[1], grid1[2], c1}), {3, 0, 1, 2});
  for (std::int64_t r = 0; r < cfg.decoder_resblocks; ++r)
    vol = resblock(vol, P, "dec.res" + std::to_string(r), temb);
  dec = ad::reshape(ad::permute(vol, {1, 2, 3, 0}), {n1, c1});

  // zero-initialized head + unpatchify
  ad::Var out = swin_detail::layer_norm_affine(dec, P["head.norm.g"],
                                               P["head.norm.b"], 1);
  out = ad::shift_channels_last(ad::matmul(out, P["head.w"]), P["head.b"]);
  out = ad::reshape(out, {grid1[0], grid1[1], grid1[2], cfg.patch[0],
                          cfg.patch[1], cfg.patch[2]});
  out = ad::permute(out, {0, 3, 1, 4, 2, 5});
  out = ad::reshape(out, {1, dp, hp, wp});
  if (dp != d0 || hp != h0 || wp != w0)
    out = ad::slice(out, {0, 0, 0, 0}, {1, d0, h0, w0});
  return out;
}

// Forward-only convenience on a private tape.
inline ad::Tensor denoise_eps(const ParamStore& params, const ad::Tensor& x_t,
                              std::int64_t t, const ad::Tensor& cond,
                              const SwinConfig& cfg) {
  ad::Tape tape;
  BoundParams P = bind_params(tape, params, false);
  ad::Var vx = tape.input(x_t, false);
  ad::Var vc = tape.input(cond, false);
  ad::Var out = denoise_eps_forward(tape, P, vx, t, vc, cfg);
  return tape.value_tensor(out);
}

}  // namespace dsni
