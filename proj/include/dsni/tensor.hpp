#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "dsni/errors.hpp"
#include "dsni/rng.hpp"

// Minimal dense-tensor engine with reverse-mode automatic differentiation.
// Values are 64-bit; there is no broadcasting beyond scalar-tensor and a few
// explicit bias/scale ops, every shape is explicit. Ops record backward
// closures on a Tape; backward runs them in reverse creation order (creation
// order is topological). All reductions use a fixed element order, so
// repeated runs are bitwise identical.

namespace dsni::ad {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel(const Shape& s) {
  std::int64_t n = 1;
  for (std::int64_t d : s) {
    if (d <= 0) throw ShapeError("non-positive tensor dimension");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i)
    out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size());
  std::int64_t acc = 1;
  for (std::size_t i = s.size(); i-- > 0;) {
    st[i] = acc;
    acc *= s[i];
  }
  return st;
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data does not match shape");
  }

  static Tensor zeros(Shape s) {
    const std::int64_t n = numel(s);
    return Tensor(std::move(s),
                  std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }
  static Tensor full(Shape s, double v) {
    const std::int64_t n = numel(s);
    return Tensor(std::move(s),
                  std::vector<double>(static_cast<std::size_t>(n), v));
  }
  static Tensor randn(Shape s, Rng& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(s));
    for (double& v : t.data) v = stddev * rng.normal();
    return t;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::int32_t id) : tape_(tape), id_(id) {}
  bool defined() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::int32_t id() const { return id_; }
  const Shape& shape() const;
  const std::vector<double>& value() const;

 private:
  Tape* tape_ = nullptr;
  std::int32_t id_ = -1;
};

class Tape {
 public:
  struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::function<void(Tape&, std::int32_t)> back;  // (tape, own id)
  };

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(const Tensor& t, bool requires_grad = true) {
    return emplace(t.shape, t.data, requires_grad, nullptr);
  }
  Var constant(Tensor t) {
    return emplace(std::move(t.shape), std::move(t.data), false, nullptr);
  }

  Var emplace(Shape shape, std::vector<double> val, bool requires_grad,
              std::function<void(Tape&, std::int32_t)> back) {
    Node node;
    node.shape = std::move(shape);
    node.val = std::move(val);
    node.requires_grad = requires_grad;
    node.back = std::move(back);
    nodes_.push_back(std::move(node));
    return Var(this, static_cast<std::int32_t>(nodes_.size() - 1));
  }

  Node& node(std::int32_t id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)];
  }

  bool rg(Var v) const { return node(v.id()).requires_grad; }

  std::vector<double>& ensure_grad(std::int32_t id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad.assign(n.val.size(), 0.0);
    return n.grad;
  }

  // Reverse-mode sweep from a scalar loss; each node is visited exactly once.
  void backward(Var loss) {
    Node& ln = node(loss.id());
    if (ln.val.size() != 1) throw ShapeError("backward needs a scalar loss");
    if (!std::isfinite(ln.val[0]))
      throw NumericalError("non-finite loss in backward");
    ensure_grad(loss.id())[0] = 1.0;
    for (std::int32_t i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || n.grad.empty() || !n.back) continue;
      n.back(*this, i);
    }
  }

  const std::vector<double>& grad(Var v) const {
    static const std::vector<double> kEmpty;
    const Node& n = node(v.id());
    return n.grad.empty() ? kEmpty : n.grad;
  }

  Tensor grad_tensor(Var v) const {
    const Node& n = node(v.id());
    if (n.grad.empty()) return Tensor::zeros(n.shape);
    return Tensor(n.shape, n.grad);
  }

  Tensor value_tensor(Var v) const {
    const Node& n = node(v.id());
    return Tensor(n.shape, n.val);
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

inline const Shape& Var::shape() const { return tape_->node(id_).shape; }
inline const std::vector<double>& Var::value() const {
  return tape_->node(id_).val;
}

namespace detail {

inline Tape& same_tape(Var a, Var b) {
  if (a.tape() != b.tape() || a.tape() == nullptr)
    throw ShapeError("vars live on different tapes");
  return *a.tape();
}

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using CMapMat = Eigen::Map<const EMat>;

template <typename Back>
inline Var make_op(Tape& t, Shape shape, std::vector<double> val, bool rg,
                   Back&& back) {
  if (!rg) return t.emplace(std::move(shape), std::move(val), false, nullptr);
  return t.emplace(std::move(shape), std::move(val), true,
                   std::function<void(Tape&, std::int32_t)>(
                       std::forward<Back>(back)));
}

}  // namespace dsni::ad::detail

// --- elementwise binary/unary --------------------------------------------------

inline Var add(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  const auto aid = a.id(), bid = b.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a) || t.rg(b),
      [aid, bid](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(aid).requires_grad) {
          auto& ga = tp.ensure_grad(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
      });
}

inline Var sub(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) throw ShapeError("sub: shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  const auto aid = a.id(), bid = b.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a) || t.rg(b),
      [aid, bid](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(aid).requires_grad) {
          auto& ga = tp.ensure_grad(aid);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
      });
}

inline Var mul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) throw ShapeError("mul: shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  const auto aid = a.id(), bid = b.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a) || t.rg(b),
      [aid, bid](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(aid).requires_grad) {
          auto& ga = tp.ensure_grad(aid);
          const auto& bv2 = tp.node(bid).val;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          const auto& av2 = tp.node(aid).val;
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
        }
      });
}

inline Var scale(Var a, double c) {
  Tape& t = *a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * c;
  const auto aid = a.id();
  return detail::make_op(t, a.shape(), std::move(out), t.rg(a),
                         [aid, c](Tape& tp, std::int32_t oid) {
                           const auto& g = tp.node(oid).grad;
                           auto& ga = tp.ensure_grad(aid);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i] * c;
                         });
}

inline Var add_scalar(Var a, double c) {
  Tape& t = *a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + c;
  const auto aid = a.id();
  return detail::make_op(t, a.shape(), std::move(out), t.rg(a),
                         [aid](Tape& tp, std::int32_t oid) {
                           const auto& g = tp.node(oid).grad;
                           auto& ga = tp.ensure_grad(aid);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i];
                         });
}

// |x| with subgradient 0 at x = 0.
inline Var abs_(Var a) {
  Tape& t = *a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = std::abs(av[i]);
  const auto aid = a.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a),
      [aid](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        const auto& av2 = tp.node(aid).val;
        auto& ga = tp.ensure_grad(aid);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double s = av2[i] > 0 ? 1.0 : (av2[i] < 0 ? -1.0 : 0.0);
          ga[i] += g[i] * s;
        }
      });
}

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// --- matrix products -------------------------------------------------------------

inline Var matmul(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " x " +
                     shape_str(sb));
  const std::int64_t m = sa[0], k = sa[1], n = sb[1];
  std::vector<double> out(static_cast<std::size_t>(m * n));
  detail::MapMat(out.data(), m, n).noalias() =
      detail::CMapMat(a.value().data(), m, k) *
      detail::CMapMat(b.value().data(), k, n);
  const auto aid = a.id(), bid = b.id();
  return detail::make_op(
      t, Shape{m, n}, std::move(out), t.rg(a) || t.rg(b),
      [aid, bid, m, k, n](Tape& tp, std::int32_t oid) {
        detail::CMapMat g(tp.node(oid).grad.data(), m, n);
        if (tp.node(aid).requires_grad) {
          detail::CMapMat bv(tp.node(bid).val.data(), k, n);
          detail::MapMat(tp.ensure_grad(aid).data(), m, k).noalias() +=
              g * bv.transpose();
        }
        if (tp.node(bid).requires_grad) {
          detail::CMapMat av(tp.node(aid).val.data(), m, k);
          detail::MapMat(tp.ensure_grad(bid).data(), k, n).noalias() +=
              av.transpose() * g;
        }
      });
}

// Batched matmul over the leading axis: [B,M,K] x [B,K,N] -> [B,M,N].
inline Var bmm(Var a, Var b) {
  Tape& t = detail::same_tape(a, b);
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw ShapeError("bmm: incompatible shapes " + shape_str(sa) + " x " +
                     shape_str(sb));
  const std::int64_t bsz = sa[0], m = sa[1], k = sa[2], n = sb[2];
  std::vector<double> out(static_cast<std::size_t>(bsz * m * n));
  for (std::int64_t i = 0; i < bsz; ++i)
    detail::MapMat(out.data() + i * m * n, m, n).noalias() =
        detail::CMapMat(a.value().data() + i * m * k, m, k) *
        detail::CMapMat(b.value().data() + i * k * n, k, n);
  const auto aid = a.id(), bid = b.id();
  return detail::make_op(
      t, Shape{bsz, m, n}, std::move(out), t.rg(a) || t.rg(b),
      [aid, bid, bsz, m, k, n](Tape& tp, std::int32_t oid) {
        const auto& gv = tp.node(oid).grad;
        if (tp.node(aid).requires_grad) {
          auto& ga = tp.ensure_grad(aid);
          for (std::int64_t i = 0; i < bsz; ++i)
            detail::MapMat(ga.data() + i * m * k, m, k).noalias() +=
                detail::CMapMat(gv.data() + i * m * n, m, n) *
                detail::CMapMat(tp.node(bid).val.data() + i * k * n, k, n)
                    .transpose();
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          for (std::int64_t i = 0; i < bsz; ++i)
            detail::MapMat(gb.data() + i * k * n, k, n).noalias() +=
                detail::CMapMat(tp.node(aid).val.data() + i * m * k, m, k)
                    .transpose() *
                detail::CMapMat(gv.data() + i * m * n, m, n);
        }
      });
}

// --- data movement ------------------------------------------------------------

inline Var reshape(Var a, Shape shape) {
  Tape& t = *a.tape();
  if (numel(shape) != numel(a.shape()))
    throw ShapeError("reshape: element count mismatch");
  const auto aid = a.id();
  return detail::make_op(t, std::move(shape), a.value(), t.rg(a),
                         [aid](Tape& tp, std::int32_t oid) {
                           const auto& g = tp.node(oid).grad;
                           auto& ga = tp.ensure_grad(aid);
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i];
                         });
}

namespace detail {

// out[idx] = in[permuted idx]; used forward (gather) and backward (scatter).
inline void permute_copy(const std::vector<double>& in, const Shape& in_shape,
                         const std::vector<int>& perm, std::vector<double>& out,
                         bool accumulate) {
  const std::size_t nd = in_shape.size();
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i)
    out_shape[i] = in_shape[static_cast<std::size_t>(perm[i])];
  const auto in_strides = strides_of(in_shape);
  const auto out_strides = strides_of(out_shape);
  std::vector<std::int64_t> src_stride(nd);
  for (std::size_t i = 0; i < nd; ++i)
    src_stride[i] = in_strides[static_cast<std::size_t>(perm[i])];

  const std::int64_t n = numel(in_shape);
  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t src = 0;
  for (std::int64_t lin = 0; lin < n; ++lin) {
    if (accumulate)
      out[static_cast<std::size_t>(lin)] += in[static_cast<std::size_t>(src)];
    else
      out[static_cast<std::size_t>(lin)] = in[static_cast<std::size_t>(src)];
    // increment multi-index over out_shape, updating src offset
    for (std::size_t d = nd; d-- > 0;) {
      idx[d]++;
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
}

}  // namespace dsni::ad::detail

inline Var permute(Var a, std::vector<int> perm) {
  Tape& t = *a.tape();
  const Shape& sa = a.shape();
  if (perm.size() != sa.size()) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= perm.size() ||
        seen[static_cast<std::size_t>(p)])
      throw ShapeError("permute: invalid permutation");
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape out_shape(sa.size());
  for (std::size_t i = 0; i < sa.size(); ++i)
    out_shape[i] = sa[static_cast<std::size_t>(perm[i])];
  std::vector<double> out(a.value().size());
  detail::permute_copy(a.value(), sa, perm, out, false);

  // Inverse permutation for the backward scatter.
  std::vector<int> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i)
    inv[static_cast<std::size_t>(perm[i])] = static_cast<int>(i);
  const auto aid = a.id();
  const Shape oshape = out_shape;
  return detail::make_op(
      t, std::move(out_shape), std::move(out), t.rg(a),
      [aid, inv, oshape](Tape& tp, std::int32_t oid) {
        std::vector<double> tmp(tp.node(oid).grad.size());
        detail::permute_copy(tp.node(oid).grad, oshape, inv, tmp, false);
        auto& ga = tp.ensure_grad(aid);
        for (std::size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
      });
}

namespace detail {

// src_is_big: gathers a box from the big grid `src` into dense `dst`;
// otherwise scatters dense `src` into a box of the big grid `dst`.
// `src_shape` is always the big grid's shape. The innermost axis is copied
// contiguously.
inline void copy_box(const std::vector<double>& src, const Shape& src_shape,
                     const std::vector<std::int64_t>& start, const Shape& box,
                     std::vector<double>& dst, bool src_is_big,
                     bool accumulate) {
  const std::size_t nd = box.size();
  const auto strides = strides_of(src_shape);
  const std::int64_t inner = box[nd - 1];
  std::int64_t outer = 1;
  for (std::size_t i = 0; i + 1 < nd; ++i) outer *= box[i];

  std::vector<std::int64_t> idx(nd, 0);
  std::int64_t big_off = 0;
  for (std::size_t d = 0; d < nd; ++d) big_off += start[d] * strides[d];

  for (std::int64_t o = 0; o < outer; ++o) {
    const std::size_t big_base = static_cast<std::size_t>(big_off);
    const std::size_t dense_base = static_cast<std::size_t>(o * inner);
    if (src_is_big) {
      if (accumulate)
        for (std::int64_t i = 0; i < inner; ++i)
          dst[dense_base + static_cast<std::size_t>(i)] +=
              src[big_base + static_cast<std::size_t>(i)];
      else
        for (std::int64_t i = 0; i < inner; ++i)
          dst[dense_base + static_cast<std::size_t>(i)] =
              src[big_base + static_cast<std::size_t>(i)];
    } else {
      if (accumulate)
        for (std::int64_t i = 0; i < inner; ++i)
          dst[big_base + static_cast<std::size_t>(i)] +=
              src[dense_base + static_cast<std::size_t>(i)];
      else
        for (std::int64_t i = 0; i < inner; ++i)
          dst[big_base + static_cast<std::size_t>(i)] =
              src[dense_base + static_cast<std::size_t>(i)];
    }
    // advance the outer multi-index (all but last axis)
    for (std::size_t d = nd - 1; d-- > 0;) {
      idx[d]++;
      big_off += strides[d];
      if (idx[d] < box[d]) break;
      big_off -= strides[d] * box[d];
      idx[d] = 0;
    }
  }
}

}  // namespace dsni::ad::detail

// Sub-box [start, stop) along every axis.
inline Var slice(Var a, const std::vector<std::int64_t>& start,
                 const std::vector<std::int64_t>& stop) {
  Tape& t = *a.tape();
  const Shape& sa = a.shape();
  if (start.size() != sa.size() || stop.size() != sa.size())
    throw ShapeError("slice: rank mismatch");
  Shape box(sa.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (start[i] < 0 || stop[i] > sa[i] || start[i] >= stop[i])
      throw ShapeError("slice: range out of bounds");
    box[i] = stop[i] - start[i];
  }
  std::vector<double> out(static_cast<std::size_t>(numel(box)));
  detail::copy_box(a.value(), sa, start, box, out, true, false);
  const auto aid = a.id();
  const Shape in_shape = sa;
  const std::vector<std::int64_t> st = start;
  const Shape boxc = box;
  return detail::make_op(
      t, std::move(box), std::move(out), t.rg(a),
      [aid, in_shape, st, boxc](Tape& tp, std::int32_t oid) {
        detail::copy_box(tp.node(oid).grad, in_shape, st, boxc,
                         tp.ensure_grad(aid), false, true);
      });
}

// Zero padding: lo/hi amounts per axis.
inline Var pad(Var a, const std::vector<std::int64_t>& lo,
               const std::vector<std::int64_t>& hi) {
  Tape& t = *a.tape();
  const Shape& sa = a.shape();
  if (lo.size() != sa.size() || hi.size() != sa.size())
    throw ShapeError("pad: rank mismatch");
  Shape out_shape(sa.size());
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (lo[i] < 0 || hi[i] < 0) throw ShapeError("pad: negative amount");
    out_shape[i] = sa[i] + lo[i] + hi[i];
  }
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)), 0.0);
  detail::copy_box(a.value(), out_shape, lo, sa, out, false, false);
  const auto aid = a.id();
  const Shape in_shape = sa;
  const Shape oshape = out_shape;
  const std::vector<std::int64_t> loc = lo;
  return detail::make_op(
      t, std::move(out_shape), std::move(out), t.rg(a),
      [aid, in_shape, oshape, loc](Tape& tp, std::int32_t oid) {
        detail::copy_box(tp.node(oid).grad, oshape, loc, in_shape,
                         tp.ensure_grad(aid), true, true);
      });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape& t = *parts[0].tape();
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: bad axis");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  bool rg = false;
  for (const Var& p : parts) {
    const Shape& sp = p.shape();
    if (sp.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != axis && sp[i] != s0[i])
        throw ShapeError("concat: shape mismatch off-axis");
    out_shape[axis] += sp[axis];
    rg = rg || t.rg(p);
  }
  std::vector<double> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<std::int64_t> start(s0.size(), 0);
  std::vector<std::int32_t> ids;
  std::vector<Shape> shapes;
  std::vector<std::int64_t> offsets;
  for (const Var& p : parts) {
    detail::copy_box(p.value(), out_shape, start, p.shape(), out, false,
                     false);
    ids.push_back(p.id());
    shapes.push_back(p.shape());
    offsets.push_back(start[axis]);
    start[axis] += p.shape()[axis];
  }
  const Shape oshape = out_shape;
  return detail::make_op(
      t, std::move(out_shape), std::move(out), rg,
      [ids, shapes, offsets, axis, oshape](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        std::vector<std::int64_t> st(oshape.size(), 0);
        for (std::size_t i = 0; i < ids.size(); ++i) {
          st[axis] = offsets[i];
          if (tp.node(ids[i]).requires_grad)
            detail::copy_box(g, oshape, st, shapes[i],
                             tp.ensure_grad(ids[i]), true, true);
        }
      });
}

// Cyclic shift along every axis (positive shifts move content to higher
// indices, wrapping around).
inline Var roll(Var a, const std::vector<std::int64_t>& shifts) {
  Tape& t = *a.tape();
  const Shape& sa = a.shape();
  if (shifts.size() != sa.size()) throw ShapeError("roll: rank mismatch");
  std::vector<std::int64_t> norm(shifts.size());
  for (std::size_t i = 0; i < shifts.size(); ++i) {
    const std::int64_t m = sa[i];
    norm[i] = ((shifts[i] % m) + m) % m;
  }
  const auto strides = strides_of(sa);
  const std::int64_t n = numel(sa);
  const auto roll_copy = [&](const std::vector<double>& in,
                             std::vector<double>& out, bool accumulate,
                             const std::vector<std::int64_t>& sh) {
    std::vector<std::int64_t> idx(sa.size(), 0);
    for (std::int64_t lin = 0; lin < n; ++lin) {
      std::int64_t dst = 0;
      for (std::size_t d = 0; d < sa.size(); ++d) {
        std::int64_t j = idx[d] + sh[d];
        if (j >= sa[d]) j -= sa[d];
        dst += j * strides[d];
      }
      if (accumulate)
        out[static_cast<std::size_t>(dst)] += in[static_cast<std::size_t>(lin)];
      else
        out[static_cast<std::size_t>(dst)] = in[static_cast<std::size_t>(lin)];
      for (std::size_t d = sa.size(); d-- > 0;) {
        if (++idx[d] < sa[d]) break;
        idx[d] = 0;
      }
    }
  };
  std::vector<double> out(a.value().size());
  roll_copy(a.value(), out, false, norm);
  const auto aid = a.id();
  const Shape shape = sa;
  std::vector<std::int64_t> inv(norm.size());
  for (std::size_t i = 0; i < norm.size(); ++i)
    inv[i] = (sa[i] - norm[i]) % sa[i];
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a),
      [aid, shape, inv](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        const auto strides2 = strides_of(shape);
        const std::int64_t n2 = numel(shape);
        auto& ga = tp.ensure_grad(aid);
        std::vector<std::int64_t> idx(shape.size(), 0);
        for (std::int64_t lin = 0; lin < n2; ++lin) {
          std::int64_t dst = 0;
          for (std::size_t d = 0; d < shape.size(); ++d) {
            std::int64_t j = idx[d] + inv[d];
            if (j >= shape[d]) j -= shape[d];
            dst += j * strides2[d];
          }
          ga[static_cast<std::size_t>(dst)] += g[static_cast<std::size_t>(lin)];
          for (std::size_t d = shape.size(); d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
          }
        }
      });
}

// Row gather: x[R, C] indexed by idx -> [K, C]; backward scatter-adds.
inline Var index_select(Var a, const std::vector<std::int64_t>& idx) {
  Tape& t = *a.tape();
  const Shape& sa = a.shape();
  if (sa.size() != 2) throw ShapeError("index_select: expects a 2-D table");
  const std::int64_t rows = sa[0], cols = sa[1];
  for (std::int64_t i : idx)
    if (i < 0 || i >= rows) throw ShapeError("index_select: index out of range");
  const std::int64_t k = static_cast<std::int64_t>(idx.size());
  std::vector<double> out(static_cast<std::size_t>(k * cols));
  for (std::int64_t r = 0; r < k; ++r)
    std::copy_n(a.value().begin() + idx[static_cast<std::size_t>(r)] * cols,
                cols, out.begin() + r * cols);
  const auto aid = a.id();
  const std::vector<std::int64_t> idxc = idx;
  return detail::make_op(
      t, Shape{k, cols}, std::move(out), t.rg(a),
      [aid, idxc, cols](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        auto& ga = tp.ensure_grad(aid);
        for (std::size_t r = 0; r < idxc.size(); ++r)
          for (std::int64_t c = 0; c < cols; ++c)
            ga[static_cast<std::size_t>(idxc[r] * cols + c)] +=
                g[r * static_cast<std::size_t>(cols) +
                  static_cast<std::size_t>(c)];
      });
}

// --- explicit broadcast helpers ---------------------------------------------------

// x[B, rest...] + b[rest...]; the only batch broadcast in the engine.
inline Var add_bias_batched(Var x, Var b) {
  Tape& t = detail::same_tape(x, b);
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sx.size() != sb.size() + 1 ||
      !std::equal(sb.begin(), sb.end(), sx.begin() + 1))
    throw ShapeError("add_bias_batched: bias must match trailing dims");
  const std::int64_t bsz = sx[0];
  const std::int64_t inner = numel(sb);
  const auto& xv = x.value();
  const auto& bv = b.value();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < bsz; ++i)
    for (std::int64_t j = 0; j < inner; ++j)
      out[static_cast<std::size_t>(i * inner + j)] =
          xv[static_cast<std::size_t>(i * inner + j)] +
          bv[static_cast<std::size_t>(j)];
  const auto xid = x.id(), bid = b.id();
  return detail::make_op(
      t, sx, std::move(out), t.rg(x) || t.rg(b),
      [xid, bid, bsz, inner](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(xid).requires_grad) {
          auto& gx = tp.ensure_grad(xid);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          for (std::int64_t i = 0; i < bsz; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
              gb[static_cast<std::size_t>(j)] +=
                  g[static_cast<std::size_t>(i * inner + j)];
        }
      });
}

// x[C, rest...] + b[C]: per-channel shift on channel-first layouts.
inline Var shift_channels_first(Var x, Var b) {
  Tape& t = detail::same_tape(x, b);
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sb.size() != 1 || sx.empty() || sx[0] != sb[0])
    throw ShapeError("shift_channels_first: channel mismatch");
  const std::int64_t c = sx[0];
  const std::int64_t inner = numel(sx) / c;
  const auto& xv = x.value();
  const auto& bv = b.value();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t j = 0; j < inner; ++j)
      out[static_cast<std::size_t>(i * inner + j)] =
          xv[static_cast<std::size_t>(i * inner + j)] +
          bv[static_cast<std::size_t>(i)];
  const auto xid = x.id(), bid = b.id();
  return detail::make_op(
      t, sx, std::move(out), t.rg(x) || t.rg(b),
      [xid, bid, c, inner](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(xid).requires_grad) {
          auto& gx = tp.ensure_grad(xid);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          for (std::int64_t i = 0; i < c; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
              gb[static_cast<std::size_t>(i)] +=
                  g[static_cast<std::size_t>(i * inner + j)];
        }
      });
}

// x[C, rest...] * g[C]: per-channel scale on channel-first layouts.
inline Var scale_channels_first(Var x, Var g) {
  Tape& t = detail::same_tape(x, g);
  const Shape& sx = x.shape();
  const Shape& sg = g.shape();
  if (sg.size() != 1 || sx.empty() || sx[0] != sg[0])
    throw ShapeError("scale_channels_first: channel mismatch");
  const std::int64_t c = sx[0];
  const std::int64_t inner = numel(sx) / c;
  const auto& xv = x.value();
  const auto& gv = g.value();
  std::vector<double> out(xv.size());
  for (std::int64_t i = 0; i < c; ++i)
    for (std::int64_t j = 0; j < inner; ++j)
      out[static_cast<std::size_t>(i * inner + j)] =
          xv[static_cast<std::size_t>(i * inner + j)] *
          gv[static_cast<std::size_t>(i)];
  const auto xid = x.id(), gid = g.id();
  return detail::make_op(
      t, sx, std::move(out), t.rg(x) || t.rg(g),
      [xid, gid, c, inner](Tape& tp, std::int32_t oid) {
        const auto& go = tp.node(oid).grad;
        if (tp.node(xid).requires_grad) {
          auto& gx = tp.ensure_grad(xid);
          const auto& gv2 = tp.node(gid).val;
          for (std::int64_t i = 0; i < c; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
              gx[static_cast<std::size_t>(i * inner + j)] +=
                  go[static_cast<std::size_t>(i * inner + j)] *
                  gv2[static_cast<std::size_t>(i)];
        }
        if (tp.node(gid).requires_grad) {
          auto& gg = tp.ensure_grad(gid);
          const auto& xv2 = tp.node(xid).val;
          for (std::int64_t i = 0; i < c; ++i)
            for (std::int64_t j = 0; j < inner; ++j)
              gg[static_cast<std::size_t>(i)] +=
                  go[static_cast<std::size_t>(i * inner + j)] *
                  xv2[static_cast<std::size_t>(i * inner + j)];
        }
      });
}

// x[..., C] scaled / shifted per channel along the last axis.
inline Var scale_channels_last(Var x, Var g) {
  Tape& t = detail::same_tape(x, g);
  const Shape& sx = x.shape();
  const Shape& sg = g.shape();
  if (sg.size() != 1 || sx.empty() || sx.back() != sg[0])
    throw ShapeError("scale_channels_last: channel mismatch");
  const std::int64_t c = sx.back();
  const std::int64_t rows = numel(sx) / c;
  const auto& xv = x.value();
  const auto& gv = g.value();
  std::vector<double> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(r * c + j)] =
          xv[static_cast<std::size_t>(r * c + j)] *
          gv[static_cast<std::size_t>(j)];
  const auto xid = x.id(), gid = g.id();
  return detail::make_op(
      t, sx, std::move(out), t.rg(x) || t.rg(g),
      [xid, gid, rows, c](Tape& tp, std::int32_t oid) {
        const auto& go = tp.node(oid).grad;
        if (tp.node(xid).requires_grad) {
          auto& gx = tp.ensure_grad(xid);
          const auto& gv2 = tp.node(gid).val;
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j)
              gx[static_cast<std::size_t>(r * c + j)] +=
                  go[static_cast<std::size_t>(r * c + j)] *
                  gv2[static_cast<std::size_t>(j)];
        }
        if (tp.node(gid).requires_grad) {
          auto& gg = tp.ensure_grad(gid);
          const auto& xv2 = tp.node(xid).val;
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j)
              gg[static_cast<std::size_t>(j)] +=
                  go[static_cast<std::size_t>(r * c + j)] *
                  xv2[static_cast<std::size_t>(r * c + j)];
        }
      });
}

inline Var shift_channels_last(Var x, Var b) {
  Tape& t = detail::same_tape(x, b);
  const Shape& sx = x.shape();
  const Shape& sb = b.shape();
  if (sb.size() != 1 || sx.empty() || sx.back() != sb[0])
    throw ShapeError("shift_channels_last: channel mismatch");
  const std::int64_t c = sx.back();
  const std::int64_t rows = numel(sx) / c;
  const auto& xv = x.value();
  const auto& bv = b.value();
  std::vector<double> out(xv.size());
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < c; ++j)
      out[static_cast<std::size_t>(r * c + j)] =
          xv[static_cast<std::size_t>(r * c + j)] +
          bv[static_cast<std::size_t>(j)];
  const auto xid = x.id(), bid = b.id();
  return detail::make_op(
      t, sx, std::move(out), t.rg(x) || t.rg(b),
      [xid, bid, rows, c](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(xid).requires_grad) {
          auto& gx = tp.ensure_grad(xid);
          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        }
        if (tp.node(bid).requires_grad) {
          auto& gb = tp.ensure_grad(bid);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < c; ++j)
              gb[static_cast<std::size_t>(j)] +=
                  g[static_cast<std::size_t>(r * c + j)];
        }
      });
}

// --- reductions --------------------------------------------------------------

inline Var sum_all(Var a) {
  Tape& t = *a.tape();
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  const auto aid = a.id();
  return detail::make_op(t, Shape{1}, std::vector<double>{acc}, t.rg(a),
                         [aid](Tape& tp, std::int32_t oid) {
                           const double g = tp.node(oid).grad[0];
                           auto& ga = tp.ensure_grad(aid);
                           for (double& v : ga) v += g;
                         });
}

inline Var mean_all(Var a) {
  Tape& t = *a.tape();
  const double n = static_cast<double>(a.value().size());
  double acc = 0.0;
  for (double v : a.value()) acc += v;
  const auto aid = a.id();
  return detail::make_op(t, Shape{1}, std::vector<double>{acc / n}, t.rg(a),
                         [aid, n](Tape& tp, std::int32_t oid) {
                           const double g = tp.node(oid).grad[0] / n;
                           auto& ga = tp.ensure_grad(aid);
                           for (double& v : ga) v += g;
                         });
}

// --- nonlinearities ------------------------------------------------------------

namespace detail {

struct AxisLanes {
  std::int64_t outer, n, inner;
};

inline AxisLanes lanes(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("bad reduction axis");
  AxisLanes l{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) l.inner *= s[i];
  return l;
}

}  // namespace dsni::ad::detail

inline Var softmax(Var a, std::size_t axis) {
  Tape& t = *a.tape();
  const auto L = detail::lanes(a.shape(), axis);
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::int64_t o = 0; o < L.outer; ++o)
    for (std::int64_t in = 0; in < L.inner; ++in) {
      const std::int64_t base = o * L.n * L.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::int64_t i = 0; i < L.n; ++i)
        mx = std::max(mx, av[static_cast<std::size_t>(base + i * L.inner)]);
      double denom = 0.0;
      for (std::int64_t i = 0; i < L.n; ++i) {
        const double e =
            std::exp(av[static_cast<std::size_t>(base + i * L.inner)] - mx);
        out[static_cast<std::size_t>(base + i * L.inner)] = e;
        denom += e;
      }
      const double inv = 1.0 / denom;
      for (std::int64_t i = 0; i < L.n; ++i)
        out[static_cast<std::size_t>(base + i * L.inner)] *= inv;
    }
  const auto aid = a.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a),
      [aid, L](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        const auto& y = tp.node(oid).val;
        auto& ga = tp.ensure_grad(aid);
        for (std::int64_t o = 0; o < L.outer; ++o)
          for (std::int64_t in = 0; in < L.inner; ++in) {
            const std::int64_t base = o * L.n * L.inner + in;
            double dot = 0.0;
            for (std::int64_t i = 0; i < L.n; ++i) {
              const std::size_t k =
                  static_cast<std::size_t>(base + i * L.inner);
              dot += g[k] * y[k];
            }
            for (std::int64_t i = 0; i < L.n; ++i) {
              const std::size_t k =
                  static_cast<std::size_t>(base + i * L.inner);
              ga[k] += y[k] * (g[k] - dot);
            }
          }
      });
}

// GELU, tanh approximation:
//   0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))
inline constexpr double kGeluC0 = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluC1 = 0.044715;

inline Var gelu(Var a) {
  Tape& t = *a.tape();
  const auto& av = a.value();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    out[i] = 0.5 * x * (1.0 + std::tanh(kGeluC0 * (x + kGeluC1 * x * x * x)));
  }
  const auto aid = a.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a),
      [aid](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        const auto& av2 = tp.node(aid).val;
        auto& ga = tp.ensure_grad(aid);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double x = av2[i];
          const double u = kGeluC0 * (x + kGeluC1 * x * x * x);
          const double th = std::tanh(u);
          const double sech2 = 1.0 - th * th;
          const double du = kGeluC0 * (1.0 + 3.0 * kGeluC1 * x * x);
          ga[i] += g[i] * (0.5 * (1.0 + th) + 0.5 * x * sech2 * du);
        }
      });
}

// Normalizes along `axis` to zero mean / unit variance (population variance,
// epsilon inside the square root). Affine scale/shift live outside as
// explicit ops.
inline Var layernorm(Var a, std::size_t axis, double eps = 1e-5) {
  Tape& t = *a.tape();
  const auto L = detail::lanes(a.shape(), axis);
  const auto& av = a.value();
  std::vector<double> out(av.size());
  std::vector<double> inv_std(
      static_cast<std::size_t>(L.outer * L.inner));
  for (std::int64_t o = 0; o < L.outer; ++o)
    for (std::int64_t in = 0; in < L.inner; ++in) {
      const std::int64_t base = o * L.n * L.inner + in;
      double mean = 0.0;
      for (std::int64_t i = 0; i < L.n; ++i)
        mean += av[static_cast<std::size_t>(base + i * L.inner)];
      mean /= static_cast<double>(L.n);
      double var = 0.0;
      for (std::int64_t i = 0; i < L.n; ++i) {
        const double d =
            av[static_cast<std::size_t>(base + i * L.inner)] - mean;
        var += d * d;
      }
      var /= static_cast<double>(L.n);
      const double s = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<std::size_t>(o * L.inner + in)] = s;
      for (std::int64_t i = 0; i < L.n; ++i) {
        const std::size_t k = static_cast<std::size_t>(base + i * L.inner);
        out[k] = (av[k] - mean) * s;
      }
    }
  const auto aid = a.id();
  return detail::make_op(
      t, a.shape(), std::move(out), t.rg(a),
      [aid, L, inv_std](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        const auto& y = tp.node(oid).val;  // normalized values
        auto& ga = tp.ensure_grad(aid);
        for (std::int64_t o = 0; o < L.outer; ++o)
          for (std::int64_t in = 0; in < L.inner; ++in) {
            const std::int64_t base = o * L.n * L.inner + in;
            const double s =
                inv_std[static_cast<std::size_t>(o * L.inner + in)];
            double mg = 0.0, mgy = 0.0;
            for (std::int64_t i = 0; i < L.n; ++i) {
              const std::size_t k =
                  static_cast<std::size_t>(base + i * L.inner);
              mg += g[k];
              mgy += g[k] * y[k];
            }
            mg /= static_cast<double>(L.n);
            mgy /= static_cast<double>(L.n);
            for (std::int64_t i = 0; i < L.n; ++i) {
              const std::size_t k =
                  static_cast<std::size_t>(base + i * L.inner);
              ga[k] += s * (g[k] - mg - y[k] * mgy);
            }
          }
      });
}

// --- convolution ---------------------------------------------------------------

namespace detail {

struct Conv3dDims {
  std::int64_t cin, d, h, w;
  std::int64_t cout, kd, kh, kw;
  std::int64_t od, oh, ow;
  std::int64_t stride, pad;
  std::int64_t k() const { return cin * kd * kh * kw; }
  std::int64_t m() const { return od * oh * ow; }
};

inline Conv3dDims conv3d_dims(const Shape& sx, const Shape& sw,
                              std::int64_t stride, std::int64_t pad) {
  if (sx.size() != 4 || sw.size() != 5)
    throw ShapeError("conv3d: expects x[C,D,H,W], w[Cout,Cin,kd,kh,kw]");
  if (sw[1] != sx[0]) throw ShapeError("conv3d: channel mismatch");
  if (stride < 1) throw ShapeError("conv3d: stride must be >= 1");
  if (pad < 0) throw ShapeError("conv3d: negative padding");
  Conv3dDims d{};
  d.cin = sx[0];
  d.d = sx[1];
  d.h = sx[2];
  d.w = sx[3];
  d.cout = sw[0];
  d.kd = sw[2];
  d.kh = sw[3];
  d.kw = sw[4];
  d.stride = stride;
  d.pad = pad;
  d.od = (d.d + 2 * pad - d.kd) / stride + 1;
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  if (d.d + 2 * pad < d.kd || d.h + 2 * pad < d.kh || d.w + 2 * pad < d.kw)
    throw ShapeError("conv3d: kernel larger than padded input");
  return d;
}

// cols[K, M] with K = Cin*kd*kh*kw rows and M = od*oh*ow columns.
inline void im2col(const std::vector<double>& x, const Conv3dDims& c,
                   std::vector<double>& cols) {
  cols.assign(static_cast<std::size_t>(c.k() * c.m()), 0.0);
  const std::int64_t plane = c.h * c.w;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < c.cin; ++ci)
    for (std::int64_t kz = 0; kz < c.kd; ++kz)
      for (std::int64_t ky = 0; ky < c.kh; ++ky)
        for (std::int64_t kx = 0; kx < c.kw; ++kx, ++row) {
          double* dst = cols.data() + row * c.m();
          std::int64_t col = 0;
          for (std::int64_t oz = 0; oz < c.od; ++oz) {
            const std::int64_t iz = oz * c.stride - c.pad + kz;
            for (std::int64_t oy = 0; oy < c.oh; ++oy) {
              const std::int64_t iy = oy * c.stride - c.pad + ky;
              if (iz < 0 || iz >= c.d || iy < 0 || iy >= c.h) {
                col += c.ow;
                continue;
              }
              const double* src = x.data() + ci * c.d * plane + iz * plane +
                                  iy * c.w;
              for (std::int64_t ox = 0; ox < c.ow; ++ox) {
                const std::int64_t ix = ox * c.stride - c.pad + kx;
                if (ix >= 0 && ix < c.w) dst[col + ox] = src[ix];
              }
              col += c.ow;
            }
          }
        }
}

inline void col2im_accumulate(const std::vector<double>& cols,
                              const Conv3dDims& c, std::vector<double>& gx) {
  const std::int64_t plane = c.h * c.w;
  std::int64_t row = 0;
  for (std::int64_t ci = 0; ci < c.cin; ++ci)
    for (std::int64_t kz = 0; kz < c.kd; ++kz)
      for (std::int64_t ky = 0; ky < c.kh; ++ky)
        for (std::int64_t kx = 0; kx < c.kw; ++kx, ++row) {
          const double* src = cols.data() + row * c.m();
          std::int64_t col = 0;
          for (std::int64_t oz = 0; oz < c.od; ++oz) {
            const std::int64_t iz = oz * c.stride - c.pad + kz;
            for (std::int64_t oy = 0; oy < c.oh; ++oy) {
              const std::int64_t iy = oy * c.stride - c.pad + ky;
              if (iz < 0 || iz >= c.d || iy < 0 || iy >= c.h) {
                col += c.ow;
                continue;
              }
              double* dst =
                  gx.data() + ci * c.d * plane + iz * plane + iy * c.w;
              for (std::int64_t ox = 0; ox < c.ow; ++ox) {
                const std::int64_t ix = ox * c.stride - c.pad + kx;
                if (ix >= 0 && ix < c.w) dst[ix] += src[col + ox];
              }
              col += c.ow;
            }
          }
        }
}

}  // namespace dsni::ad::detail

// Standard cross-correlation, zero padding; im2col + GEMM on both passes.
// The column matrix is rebuilt in backward instead of being stored.
inline Var conv3d(Var x, Var w, std::int64_t stride = 1, std::int64_t pad = 0) {
  Tape& t = detail::same_tape(x, w);
  const auto c = detail::conv3d_dims(x.shape(), w.shape(), stride, pad);
  std::vector<double> cols;
  detail::im2col(x.value(), c, cols);
  std::vector<double> out(static_cast<std::size_t>(c.cout * c.m()));
  detail::MapMat(out.data(), c.cout, c.m()).noalias() =
      detail::CMapMat(w.value().data(), c.cout, c.k()) *
      detail::CMapMat(cols.data(), c.k(), c.m());
  const auto xid = x.id(), wid = w.id();
  return detail::make_op(
      t, Shape{c.cout, c.od, c.oh, c.ow}, std::move(out),
      t.rg(x) || t.rg(w),
      [xid, wid, c](Tape& tp, std::int32_t oid) {
        const auto& g = tp.node(oid).grad;
        std::vector<double> cols2;
        detail::im2col(tp.node(xid).val, c, cols2);
        if (tp.node(wid).requires_grad) {
          detail::MapMat(tp.ensure_grad(wid).data(), c.cout, c.k())
              .noalias() += detail::CMapMat(g.data(), c.cout, c.m()) *
                            detail::CMapMat(cols2.data(), c.k(), c.m())
                                .transpose();
        }
        if (tp.node(xid).requires_grad) {
          std::vector<double> dcols(
              static_cast<std::size_t>(c.k() * c.m()));
          detail::MapMat(dcols.data(), c.k(), c.m()).noalias() =
              detail::CMapMat(tp.node(wid).val.data(), c.cout, c.k())
                  .transpose() *
              detail::CMapMat(g.data(), c.cout, c.m());
          detail::col2im_accumulate(dcols, c, tp.ensure_grad(xid));
        }
      });
}

// --- gradient checking -----------------------------------------------------------

// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
// for a scalar-valued tensor function f.
template <typename F>
inline double gradcheck(F&& f, const Tensor& x, double h = 1e-5) {
  Tensor analytic;
  {
    Tape tape;
    Var vx = tape.input(x, true);
    Var loss = f(tape, vx);
    if (numel(loss.shape()) != 1)
      throw ShapeError("gradcheck: f must be scalar-valued");
    tape.backward(loss);
    analytic = tape.grad_tensor(vx);
  }
  const auto eval = [&](const Tensor& point) {
    Tape tape;
    Var vx = tape.input(point, false);
    Var loss = f(tape, vx);
    const double v = loss.value()[0];
    if (!std::isfinite(v)) throw NumericalError("gradcheck: non-finite value");
    return v;
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = eval(probe);
    probe.data[i] = orig - h;
    const double fm = eval(probe);
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic.data[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1.0, std::abs(a)));
  }
  return worst;
}

}  // namespace dsni::ad
