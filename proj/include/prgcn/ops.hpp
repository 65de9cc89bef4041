#pragma once

// Differentiable primitives over prgcn::Tensor.
//
// Every primitive validates shapes, rejects non-finite results, and records
// its vector-Jacobian product on the active tape when any input requires a
// gradient. Backward closures accumulate additively so fan-out is handled by
// construction.

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cstdint>
#include <memory>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numbers>
#include <string>
#include <vector>

#include "prgcn/tensor.hpp"

namespace prgcn {

inline constexpr double kLayerNormEps = 1e-5;

namespace detail {

// NaN and +-Inf are exactly the values with an all-ones exponent field.
inline bool all_finite(const double* v, std::size_t n) {
  constexpr std::uint64_t kExp = 0x7ff0000000000000ULL;
  std::uint64_t bad = 0;
  for (std::size_t i = 0; i < n; ++i) bad |= static_cast<std::uint64_t>((std::bit_cast<std::uint64_t>(v[i]) & kExp) == kExp);
  return bad == 0;
}

inline void check_finite(const Buffer& v, const char* op) {
  if (!all_finite(v.data(), v.size())) throw NumericalError(std::string(op) + ": non-finite value produced");
}

inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline Tensor finish(const char* op, Shape shape, Buffer values,
                     std::initializer_list<const Tensor*> inputs) {
  check_finite(values, op);
  const bool grad = needs_grad(inputs);
  return Tensor(std::move(shape), std::move(values), grad);
}

inline void record(std::function<void()> fn) { Tape::active()->record(std::move(fn)); }

// Gradient buffer of an input, or nullptr when the input takes no gradient.
inline double* grad_of(const DataPtr& d) { return d->requires_grad ? d->grad_buffer() : nullptr; }

inline std::size_t normalize_axis(long axis, std::size_t rank, const char* op) {
  const long r = static_cast<long>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis);
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

inline std::vector<std::size_t> contiguous_strides(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

// Numpy-style broadcasting of two shapes; strides are zero on broadcast axes.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> sa, sb;
};

inline Broadcast broadcast_plan(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast p;
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  const auto sta = contiguous_strides(a);
  const auto stb = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size() - r;  // wraps when out of range
    const std::size_t ib = i + b.size() - r;
    const bool has_a = i + a.size() >= r;
    const bool has_b = i + b.size() >= r;
    const std::size_t ea = has_a ? a[ia] : 1;
    const std::size_t eb = has_b ? b[ib] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                           " are not broadcastable");
    }
    p.out[i] = std::max(ea, eb);
    p.sa[i] = (has_a && ea != 1) ? sta[ia] : 0;
    p.sb[i] = (has_b && eb != 1) ? stb[ib] : 0;
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element in order.
template <class F>
void broadcast_for_each(const Broadcast& p, F&& f) {
  const std::size_t r = p.out.size();
  const std::size_t total = shape_numel(p.out);
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t last = p.out[r - 1];
  const std::size_t la = p.sa[r - 1], lb = p.sb[r - 1];
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t o = 0; o < total; o += last) {
    // Constant inner strides let the common cases vectorize.
    if (la == 1 && lb == 1) {
      for (std::size_t k = 0; k < last; ++k) f(o + k, ia + k, ib + k);
    } else if (la == 1 && lb == 0) {
      for (std::size_t k = 0; k < last; ++k) f(o + k, ia + k, ib);
    } else if (la == 0 && lb == 1) {
      for (std::size_t k = 0; k < last; ++k) f(o + k, ia, ib + k);
    } else {
      for (std::size_t k = 0; k < last; ++k) f(o + k, ia + k * la, ib + k * lb);
    }
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += p.sa[d];
      ib += p.sb[d];
      if (idx[d] < p.out[d]) break;
      ia -= idx[d] * p.sa[d];
      ib -= idx[d] * p.sb[d];
      idx[d] = 0;
    }
  }
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMat = Eigen::Map<const RowMat>;
using MutMat = Eigen::Map<RowMat>;

template <class Fwd, class Dfdx>
Tensor unary(const char* op, const Tensor& x, Fwd fwd, Dfdx dfdx) {
  const auto& xv = x.impl()->value;
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  Tensor y = finish(op, x.shape(), std::move(out), {&x});
  if (y.requires_grad()) {
    record([xd = x.impl(), yd = y.impl(), dfdx] {
      double* gx = xd->grad_buffer();
      const auto& gy = yd->grad;
      if (gy.empty()) return;
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * dfdx(xd->value[i], yd->value[i]);
    });
  }
  return y;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with broadcasting.

inline Tensor add(const Tensor& a, const Tensor& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "add");
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  Buffer out(shape_numel(plan.out));
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
  Tensor y = detail::finish("add", plan.out, std::move(out), {&a, &b});
  if (y.requires_grad()) {
    detail::record([ad = a.impl(), bd = b.impl(), yd = y.impl(), plan] {
      if (yd->grad.empty()) return;
      double* ga = detail::grad_of(ad);
      double* gb = detail::grad_of(bd);
      const auto& gy = yd->grad;
      detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        if (ga) ga[i] += gy[o];
        if (gb) gb[j] += gy[o];
      });
    });
  }
  return y;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "sub");
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  Buffer out(shape_numel(plan.out));
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
  Tensor y = detail::finish("sub", plan.out, std::move(out), {&a, &b});
  if (y.requires_grad()) {
    detail::record([ad = a.impl(), bd = b.impl(), yd = y.impl(), plan] {
      if (yd->grad.empty()) return;
      double* ga = detail::grad_of(ad);
      double* gb = detail::grad_of(bd);
      const auto& gy = yd->grad;
      detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        if (ga) ga[i] += gy[o];
        if (gb) gb[j] -= gy[o];
      });
    });
  }
  return y;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  const auto plan = detail::broadcast_plan(a.shape(), b.shape(), "mul");
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  Buffer out(shape_numel(plan.out));
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
  Tensor y = detail::finish("mul", plan.out, std::move(out), {&a, &b});
  if (y.requires_grad()) {
    detail::record([ad = a.impl(), bd = b.impl(), yd = y.impl(), plan] {
      if (yd->grad.empty()) return;
      double* ga = detail::grad_of(ad);
      double* gb = detail::grad_of(bd);
      const auto& gy = yd->grad;
      const auto& av = ad->value;
      const auto& bv = bd->value;
      detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        if (ga) ga[i] += gy[o] * bv[j];
        if (gb) gb[j] += gy[o] * av[i];
      });
    });
  }
  return y;
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary("scale", x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  return detail::unary("add_scalar", x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

// c - x
inline Tensor rsub_scalar(double c, const Tensor& x) {
  return detail::unary("rsub_scalar", x, [c](double v) { return c - v; }, [](double, double) { return -1.0; });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }
inline Tensor operator*(const Tensor& x, double c) { return scale(x, c); }
inline Tensor operator+(const Tensor& x, double c) { return add_scalar(x, c); }
inline Tensor operator-(double c, const Tensor& x) { return rsub_scalar(c, x); }
inline Tensor operator-(const Tensor& x) { return scale(x, -1.0); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

inline Tensor exp(const Tensor& x) {
  return detail::unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

inline double softplus_value(double v) { return v > 30.0 ? v : std::log1p(std::exp(v)); }

inline Tensor softplus(const Tensor& x) {
  return detail::unary("softplus", x, softplus_value, [](double v, double) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

inline constexpr double kInvSqrt2 = 0.5 * std::numbers::sqrt2;

inline double gelu_value(double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); }

// Exact (erf-based) GELU. The forward keeps Phi(x) for the backward pass.
inline Tensor gelu(const Tensor& x) {
  const auto& xv = x.impl()->value;
  const bool grad = detail::needs_grad({&x});
  Buffer out(xv.size());
  auto cdf = grad ? std::make_shared<Buffer>(xv.size()) : nullptr;
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double c = 0.5 * (1.0 + std::erf(xv[i] * kInvSqrt2));
    out[i] = xv[i] * c;
    if (cdf) (*cdf)[i] = c;
  }
  Tensor y = detail::finish("gelu", x.shape(), std::move(out), {&x});
  if (grad) {
    detail::record([xd = x.impl(), yd = y.impl(), cdf] {
      if (yd->grad.empty()) return;
      constexpr double kPdfScale = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      double* gx = xd->grad_buffer();
      const auto& gy = yd->grad;
      const auto& xv = xd->value;
      Buffer pdf(xv.size());
      for (std::size_t i = 0; i < xv.size(); ++i) pdf[i] = -0.5 * xv[i] * xv[i];
      Eigen::Map<Eigen::ArrayXd> pm(pdf.data(), static_cast<Eigen::Index>(pdf.size()));
      pm = pm.exp() * kPdfScale;
      for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += gy[i] * ((*cdf)[i] + xv[i] * pdf[i]);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape manipulation.

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor y = detail::finish("reshape", std::move(shape), x.impl()->value, {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl()] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      for (std::size_t i = 0; i < yd->grad.size(); ++i) gx[i] += yd->grad[i];
    });
  }
  return y;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& s = x.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch for " + shape_str(s));
  std::vector<bool> seen(r, false);
  for (std::size_t p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation for " + shape_str(s));
    seen[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = s[perm[i]];
  const auto in_strides = detail::contiguous_strides(s);
  // Source strides expressed in output axis order; reuse the broadcast walker.
  detail::Broadcast plan;
  plan.out = out_shape;
  plan.sa.resize(r);
  plan.sb.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) plan.sa[i] = out_shape[i] == 1 ? 0 : in_strides[perm[i]];
  const auto& xv = x.impl()->value;
  Buffer out(xv.size());
  detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = xv[i]; });
  Tensor y = detail::finish("permute", out_shape, std::move(out), {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl(), plan] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      const auto& gy = yd->grad;
      detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t) { gx[i] += gy[o]; });
    });
  }
  return y;
}

// Swaps the last two axes.
inline Tensor transpose(const Tensor& x) {
  if (x.dim() < 2) throw DimensionError("transpose: rank < 2 for " + shape_str(x.shape()));
  std::vector<std::size_t> perm(x.dim());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[x.dim() - 1], perm[x.dim() - 2]);
  return permute(x, perm);
}

inline Tensor concat(const std::vector<Tensor>& parts, long axis_in) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& s0 = parts.front().shape();
  const std::size_t axis = detail::normalize_axis(axis_in, s0.size(), "concat");
  Shape out_shape = s0;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.dim() != s0.size()) throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
    for (std::size_t i = 0; i < s0.size(); ++i) {
      if (i != axis && p.shape()[i] != s0[i]) {
        throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(s0));
      }
    }
    out_shape[axis] += p.shape()[axis];
  }
  const auto split = detail::split_at(out_shape, axis);
  Buffer out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[axis] * split.inner;
    const auto& pv = p.impl()->value;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(pv.begin() + static_cast<long>(o * w), w,
                  out.begin() + static_cast<long>(o * split.n * split.inner + offset));
    }
    offset += w;
  }
  bool grad = false;
  if (Tape::active()) {
    for (const auto& p : parts) grad = grad || p.requires_grad();
  }
  detail::check_finite(out, "concat");
  Tensor y(out_shape, std::move(out), grad);
  if (grad) {
    std::vector<detail::DataPtr> inputs;
    for (const auto& p : parts) inputs.push_back(p.impl());
    detail::record([inputs, yd = y.impl(), split, axis] {
      if (yd->grad.empty()) return;
      std::size_t offset = 0;
      for (const auto& in : inputs) {
        const std::size_t w = in->shape[axis] * split.inner;
        if (in->requires_grad) {
          double* g = in->grad_buffer();
          for (std::size_t o = 0; o < split.outer; ++o) {
            const double* src = yd->grad.data() + o * split.n * split.inner + offset;
            for (std::size_t k = 0; k < w; ++k) g[o * w + k] += src[k];
          }
        }
        offset += w;
      }
    });
  }
  return y;
}

// Selects entries of `axis` by index (repeats allowed); backward scatter-adds.
inline Tensor index_select(const Tensor& x, long axis_in, const std::vector<std::size_t>& indices) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.dim(), "index_select");
  const auto split = detail::split_at(x.shape(), axis);
  for (std::size_t i : indices) {
    if (i >= split.n) throw DimensionError("index_select: index " + std::to_string(i) + " out of range for " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = indices.size();
  const std::size_t m = indices.size();
  const auto& xv = x.impl()->value;
  Buffer out(split.outer * m * split.inner);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < m; ++k) {
      const double* src = xv.data() + (o * split.n + indices[k]) * split.inner;
      std::copy_n(src, split.inner, out.begin() + static_cast<long>((o * m + k) * split.inner));
    }
  }
  Tensor y = detail::finish("index_select", out_shape, std::move(out), {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl(), split, indices] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      const std::size_t m = indices.size();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t k = 0; k < m; ++k) {
          const double* src = yd->grad.data() + (o * m + k) * split.inner;
          double* dst = gx + (o * split.n + indices[k]) * split.inner;
          for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

inline Tensor slice(const Tensor& x, long axis_in, std::size_t start, std::size_t length) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.dim(), "slice");
  if (start + length > x.shape()[axis]) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") exceeds axis of " + shape_str(x.shape()));
  }
  std::vector<std::size_t> idx(length);
  std::iota(idx.begin(), idx.end(), start);
  return index_select(x, static_cast<long>(axis), idx);
}

// ---------------------------------------------------------------------------
// Reductions.

inline Tensor sum(const Tensor& x, long axis_in, bool keepdim = false) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.dim(), "sum");
  const auto split = detail::split_at(x.shape(), axis);
  Shape out_shape = x.shape();
  if (keepdim) {
    out_shape[axis] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<long>(axis));
  }
  const auto& xv = x.impl()->value;
  Buffer out(split.outer * split.inner, 0.0);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t k = 0; k < split.n; ++k) {
      const double* src = xv.data() + (o * split.n + k) * split.inner;
      double* dst = out.data() + o * split.inner;
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
    }
  }
  Tensor y = detail::finish("sum", out_shape, std::move(out), {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl(), split] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t k = 0; k < split.n; ++k) {
          const double* src = yd->grad.data() + o * split.inner;
          double* dst = gx + (o * split.n + k) * split.inner;
          for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return y;
}

inline Tensor mean(const Tensor& x, long axis_in, bool keepdim = false) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.dim(), "mean");
  return scale(sum(x, static_cast<long>(axis), keepdim), 1.0 / static_cast<double>(x.shape()[axis]));
}

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  Tensor y = detail::finish("sum_all", Shape{}, {acc}, {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl()] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      for (std::size_t i = 0; i < xd->value.size(); ++i) gx[i] += yd->grad[0];
    });
  }
  return y;
}

inline Tensor mean_all(const Tensor& x) {
  if (x.numel() == 0) throw DimensionError("mean_all: empty tensor");
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// Euclidean norm over the last axis; the subgradient at zero is taken as 0.
inline Tensor norm_last(const Tensor& x) {
  if (x.dim() == 0) throw DimensionError("norm_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const auto& xv = x.impl()->value;
  Buffer out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t k = 0; k < n; ++k) s += xv[r * n + k] * xv[r * n + k];
    out[r] = std::sqrt(s);
  }
  Tensor y = detail::finish("norm_last", out_shape, std::move(out), {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl(), n, rows] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        const double len = yd->value[r];
        if (len == 0.0) continue;
        const double c = yd->grad[r] / len;
        for (std::size_t k = 0; k < n; ++k) gx[r * n + k] += c * xd->value[r * n + k];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Contractions.

// Batched matrix product a[..., m, k] x b[..., k, n] with broadcast batch axes.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  using detail::ConstMat;
  using detail::MutMat;
  if (a.dim() < 2 || b.dim() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[a.dim() - 2];
  const std::size_t k = a.shape()[a.dim() - 1];
  const std::size_t kb = b.shape()[b.dim() - 2];
  const std::size_t n = b.shape()[b.dim() - 1];
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  detail::Broadcast plan;
  try {
    plan = detail::broadcast_plan(a_batch, b_batch, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: batch dimensions of " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " are not broadcastable");
  }
  Shape out_shape = plan.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const auto& av = a.impl()->value;
  const auto& bv = b.impl()->value;
  Buffer out(shape_numel(out_shape));
  // Shared right operand: fold the batch of `a` into rows for a single GEMM.
  const bool shared_rhs = b.dim() == 2;
  if (shared_rhs) {
    const std::size_t rows = a.numel() / k;
    MutMat(out.data(), static_cast<long>(rows), static_cast<long>(n)).noalias() =
        ConstMat(av.data(), static_cast<long>(rows), static_cast<long>(k)) *
        ConstMat(bv.data(), static_cast<long>(k), static_cast<long>(n));
  } else {
    detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
      MutMat(out.data() + o * m * n, static_cast<long>(m), static_cast<long>(n)).noalias() =
          ConstMat(av.data() + i * m * k, static_cast<long>(m), static_cast<long>(k)) *
          ConstMat(bv.data() + j * k * n, static_cast<long>(k), static_cast<long>(n));
    });
  }
  Tensor y = detail::finish("matmul", out_shape, std::move(out), {&a, &b});
  if (y.requires_grad()) {
    detail::record([ad = a.impl(), bd = b.impl(), yd = y.impl(), plan, m, k, n, shared_rhs] {
      if (yd->grad.empty()) return;
      double* ga = detail::grad_of(ad);
      double* gb = detail::grad_of(bd);
      const auto& gy = yd->grad;
      const auto& av = ad->value;
      const auto& bv = bd->value;
      if (shared_rhs) {
        const long rows = static_cast<long>(av.size() / k);
        ConstMat G(gy.data(), rows, static_cast<long>(n));
        if (ga) MutMat(ga, rows, static_cast<long>(k)).noalias() += G * ConstMat(bv.data(), static_cast<long>(k), static_cast<long>(n)).transpose();
        if (gb) MutMat(gb, static_cast<long>(k), static_cast<long>(n)).noalias() += ConstMat(av.data(), rows, static_cast<long>(k)).transpose() * G;
        return;
      }
      detail::broadcast_for_each(plan, [&](std::size_t o, std::size_t i, std::size_t j) {
        ConstMat G(gy.data() + o * m * n, static_cast<long>(m), static_cast<long>(n));
        if (ga) {
          MutMat(ga + i * m * k, static_cast<long>(m), static_cast<long>(k)).noalias() +=
              G * ConstMat(bv.data() + j * k * n, static_cast<long>(k), static_cast<long>(n)).transpose();
        }
        if (gb) {
          MutMat(gb + j * k * n, static_cast<long>(k), static_cast<long>(n)).noalias() +=
              ConstMat(av.data() + i * m * k, static_cast<long>(m), static_cast<long>(k)).transpose() * G;
        }
      });
    });
  }
  return y;
}

// x[..., in] W[in, out] + bias[out], with the bias folded into the GEMM output.
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  using detail::ConstMat;
  using detail::MutMat;
  if (weight.dim() != 2 || bias.dim() != 1 || bias.shape()[0] != weight.shape()[1]) {
    throw DimensionError("linear: weight " + shape_str(weight.shape()) + " and bias " + shape_str(bias.shape()) +
                         " are inconsistent");
  }
  if (x.dim() < 1 || x.shape().back() != weight.shape()[0]) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const long k = static_cast<long>(weight.shape()[0]);
  const long n = static_cast<long>(weight.shape()[1]);
  const long rows = static_cast<long>(x.numel()) / k;
  Shape out_shape = x.shape();
  out_shape.back() = static_cast<std::size_t>(n);
  Buffer out(static_cast<std::size_t>(rows * n));
  MutMat y_mat(out.data(), rows, n);
  y_mat.rowwise() = Eigen::Map<const Eigen::RowVectorXd>(bias.impl()->value.data(), n);
  y_mat.noalias() += ConstMat(x.impl()->value.data(), rows, k) * ConstMat(weight.impl()->value.data(), k, n);
  Tensor y = detail::finish("linear", out_shape, std::move(out), {&x, &weight, &bias});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), wd = weight.impl(), bd = bias.impl(), yd = y.impl(), rows, k, n] {
      if (yd->grad.empty()) return;
      ConstMat G(yd->grad.data(), rows, n);
      if (xd->requires_grad) {
        MutMat(xd->grad_buffer(), rows, k).noalias() += G * ConstMat(wd->value.data(), k, n).transpose();
      }
      if (wd->requires_grad) {
        MutMat(wd->grad_buffer(), k, n).noalias() += ConstMat(xd->value.data(), rows, k).transpose() * G;
      }
      if (bd->requires_grad) {
        Eigen::Map<Eigen::RowVectorXd>(bd->grad_buffer(), n) += G.colwise().sum();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Normalizations.

inline Tensor softmax(const Tensor& x, long axis_in = -1) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.dim(), "softmax");
  const auto split = detail::split_at(x.shape(), axis);
  const auto& xv = x.impl()->value;
  Buffer out(xv.size());
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.n * split.inner + i;
      double mx = xv[base];
      for (std::size_t k = 1; k < split.n; ++k) mx = std::max(mx, xv[base + k * split.inner]);
      for (std::size_t k = 0; k < split.n; ++k) out[base + k * split.inner] = xv[base + k * split.inner] - mx;
    }
  }
  Eigen::Map<Eigen::ArrayXd> shifted(out.data(), static_cast<Eigen::Index>(out.size()));
  shifted = shifted.exp();
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t i = 0; i < split.inner; ++i) {
      const std::size_t base = o * split.n * split.inner + i;
      double total = 0.0;
      for (std::size_t k = 0; k < split.n; ++k) total += out[base + k * split.inner];
      const double inv = 1.0 / total;
      for (std::size_t k = 0; k < split.n; ++k) out[base + k * split.inner] *= inv;
    }
  }
  Tensor y = detail::finish("softmax", x.shape(), std::move(out), {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl(), split] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      const auto& gy = yd->grad;
      const auto& yv = yd->value;
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t i = 0; i < split.inner; ++i) {
          const std::size_t base = o * split.n * split.inner + i;
          double dot = 0.0;
          for (std::size_t k = 0; k < split.n; ++k) dot += gy[base + k * split.inner] * yv[base + k * split.inner];
          for (std::size_t k = 0; k < split.n; ++k) {
            const std::size_t p = base + k * split.inner;
            gx[p] += yv[p] * (gy[p] - dot);
          }
        }
      }
    });
  }
  return y;
}

// Normalizes over the last axis, then applies gamma/beta of that extent.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = kLayerNormEps) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t n = x.shape().back();
  if (gamma.shape() != Shape{n} || beta.shape() != Shape{n}) {
    throw DimensionError("layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " + shape_str(beta.shape()) +
                         " do not match feature axis of " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / n;
  const auto& xv = x.impl()->value;
  const auto& gv = gamma.impl()->value;
  const auto& bv = beta.impl()->value;
  Buffer out(xv.size());
  Buffer xhat(xv.size());
  Buffer rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (std::size_t k = 0; k < n; ++k) mu += row[k];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) var += (row[k] - mu) * (row[k] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < n; ++k) {
      const double h = (row[k] - mu) * rstd[r];
      xhat[r * n + k] = h;
      out[r * n + k] = gv[k] * h + bv[k];
    }
  }
  Tensor y = detail::finish("layer_norm", x.shape(), std::move(out), {&x, &gamma, &beta});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), gd = gamma.impl(), bd = beta.impl(), yd = y.impl(), xhat = std::move(xhat),
                    rstd = std::move(rstd), n, rows] {
      if (yd->grad.empty()) return;
      double* gx = detail::grad_of(xd);
      double* gg = detail::grad_of(gd);
      double* gb = detail::grad_of(bd);
      const auto& gy = yd->grad;
      const auto& gv = gd->value;
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t r = 0; r < rows; ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t p = r * n + k;
          const double dh = gy[p] * gv[k];
          m1 += dh;
          m2 += dh * xhat[p];
          if (gg) gg[k] += gy[p] * xhat[p];
          if (gb) gb[k] += gy[p];
        }
        if (!gx) continue;
        m1 *= inv_n;
        m2 *= inv_n;
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t p = r * n + k;
          gx[p] += rstd[r] * (gy[p] * gv[k] - m1 - xhat[p] * m2);
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Temporal pooling.

// Bin i of an adaptive pool covers [floor(i*n/m), ceil((i+1)*n/m)).
inline std::pair<std::size_t, std::size_t> adaptive_bin(std::size_t i, std::size_t n, std::size_t m) {
  const std::size_t start = (i * n) / m;
  const std::size_t end = ((i + 1) * n + m - 1) / m;
  return {start, end};
}

// Bin owning position t under the same split (first one when bins overlap).
inline std::size_t adaptive_bin_of(std::size_t t, std::size_t n, std::size_t m) { return (t * m) / n; }

inline Tensor adaptive_avg_pool(const Tensor& x, long axis_in, std::size_t out_len) {
  const std::size_t axis = detail::normalize_axis(axis_in, x.dim(), "adaptive_avg_pool");
  const auto split = detail::split_at(x.shape(), axis);
  if (out_len == 0 || out_len > split.n) {
    throw DimensionError("adaptive_avg_pool: output length " + std::to_string(out_len) + " invalid for axis of " +
                         shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = out_len;
  const auto& xv = x.impl()->value;
  Buffer out(split.outer * out_len * split.inner, 0.0);
  for (std::size_t o = 0; o < split.outer; ++o) {
    for (std::size_t b = 0; b < out_len; ++b) {
      const auto [s, e] = adaptive_bin(b, split.n, out_len);
      const double w = 1.0 / static_cast<double>(e - s);
      double* dst = out.data() + (o * out_len + b) * split.inner;
      for (std::size_t t = s; t < e; ++t) {
        const double* src = xv.data() + (o * split.n + t) * split.inner;
        for (std::size_t i = 0; i < split.inner; ++i) dst[i] += src[i];
      }
      for (std::size_t i = 0; i < split.inner; ++i) dst[i] *= w;
    }
  }
  Tensor y = detail::finish("adaptive_avg_pool", out_shape, std::move(out), {&x});
  if (y.requires_grad()) {
    detail::record([xd = x.impl(), yd = y.impl(), split, out_len] {
      if (yd->grad.empty()) return;
      double* gx = xd->grad_buffer();
      for (std::size_t o = 0; o < split.outer; ++o) {
        for (std::size_t b = 0; b < out_len; ++b) {
          const auto [s, e] = adaptive_bin(b, split.n, out_len);
          const double w = 1.0 / static_cast<double>(e - s);
          const double* src = yd->grad.data() + (o * out_len + b) * split.inner;
          for (std::size_t t = s; t < e; ++t) {
            double* dst = gx + (o * split.n + t) * split.inner;
            for (std::size_t i = 0; i < split.inner; ++i) dst[i] += w * src[i];
          }
        }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Selective state-space scan.
//
//   abar[t,d,n] = exp(delta[t,d] * A[d,n])
//   h[t,d,n]    = abar[t,d,n] * h[t-1,d,n] + delta[t,d] * B[t,n] * x[t,d]
//   y[t,d]      = sum_n C[t,n] * h[t,d,n]
//
// Shapes: x, delta [S, L, D]; A [D, N]; B, C [S, L, N]; h starts at zero for
// each of the S independent lanes. Backward is a reverse-time scan.
inline Tensor ssm_scan(const Tensor& x, const Tensor& delta, const Tensor& A, const Tensor& B, const Tensor& C) {
  if (x.dim() != 3 || A.dim() != 2) {
    throw DimensionError("ssm_scan: expected x [S,L,D] and A [D,N], got " + shape_str(x.shape()) + " and " +
                         shape_str(A.shape()));
  }
  const std::size_t S = x.shape()[0], L = x.shape()[1], D = x.shape()[2];
  const std::size_t N = A.shape()[1];
  if (delta.shape() != x.shape() || A.shape()[0] != D || B.shape() != Shape{S, L, N} || C.shape() != Shape{S, L, N}) {
    throw DimensionError("ssm_scan: inconsistent shapes x " + shape_str(x.shape()) + ", delta " +
                         shape_str(delta.shape()) + ", A " + shape_str(A.shape()) + ", B " + shape_str(B.shape()) +
                         ", C " + shape_str(C.shape()));
  }
  const bool grad = detail::needs_grad({&x, &delta, &A, &B, &C});
  const auto& xv = x.impl()->value;
  const auto& dv = delta.impl()->value;
  const auto& av = A.impl()->value;
  const auto& bv = B.impl()->value;
  const auto& cv = C.impl()->value;
  Buffer out(S * L * D, 0.0);
  // h and abar per (s,t,d,n), kept for backward; every entry is written below.
  std::shared_ptr<Buffer> hist, abar;
  if (grad) {
    hist = std::make_shared<Buffer>(S * L * D * N);
    abar = std::make_shared<Buffer>(S * L * D * N);
  }
  Buffer h(D * N);
  Buffer ab(grad ? 0 : D * N);
  for (std::size_t s = 0; s < S; ++s) {
    std::fill(h.begin(), h.end(), 0.0);
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t row = s * L + t;
      const double* xt = xv.data() + row * D;
      const double* dt = dv.data() + row * D;
      const double* bt = bv.data() + row * N;
      const double* ct = cv.data() + row * N;
      double* yt = out.data() + row * D;
      double* abt = grad ? abar->data() + row * D * N : ab.data();
      for (std::size_t d = 0; d < D; ++d) {
        for (std::size_t n = 0; n < N; ++n) abt[d * N + n] = dt[d] * av[d * N + n];
      }
      Eigen::Map<Eigen::ArrayXd> abmap(abt, static_cast<Eigen::Index>(D * N));
      abmap = abmap.exp();
      for (std::size_t d = 0; d < D; ++d) {
        const double dx = dt[d] * xt[d];
        double* hd = h.data() + d * N;
        const double* abd = abt + d * N;
        double acc = 0.0;
        for (std::size_t n = 0; n < N; ++n) {
          hd[n] = abd[n] * hd[n] + dx * bt[n];
          acc += ct[n] * hd[n];
        }
        yt[d] = acc;
      }
      if (grad) std::copy(h.begin(), h.end(), hist->data() + row * D * N);
    }
  }
  detail::check_finite(out, "ssm_scan");
  Tensor y(Shape{S, L, D}, std::move(out), grad);
  if (grad) {
    detail::record([xd = x.impl(), ddd = delta.impl(), ad = A.impl(), bd = B.impl(), cd = C.impl(), yd = y.impl(),
                    hist = std::move(hist), abar = std::move(abar), S, L, D, N] {
      if (yd->grad.empty()) return;
      const auto& gy = yd->grad;
      const auto& xv = xd->value;
      const auto& dv = ddd->value;
      const auto& av = ad->value;
      const auto& bv = bd->value;
      const auto& cv = cd->value;
      Buffer gx(S * L * D, 0.0), gdelta(S * L * D, 0.0), gA(D * N, 0.0), gB(S * L * N, 0.0),
          gC(S * L * N, 0.0);
      Buffer carry(D * N);
      for (std::size_t s = 0; s < S; ++s) {
        std::fill(carry.begin(), carry.end(), 0.0);
        for (std::size_t t = L; t-- > 0;) {
          const std::size_t row = s * L + t;
          const double* hcur = hist->data() + row * D * N;
          const double* hprev = t > 0 ? hist->data() + (row - 1) * D * N : nullptr;
          const double* abt = abar->data() + row * D * N;
          const double* bt = bv.data() + row * N;
          const double* ct = cv.data() + row * N;
          for (std::size_t d = 0; d < D; ++d) {
            const double dyd = gy[row * D + d];
            const double dd = dv[row * D + d];
            const double xx = xv[row * D + d];
            double g_delta = 0.0, g_x = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
              const std::size_t p = d * N + n;
              const double dh = dyd * ct[n] + carry[p];
              gC[row * N + n] += dyd * hcur[p];
              if (hprev) {
                const double da = dh * hprev[p] * abt[p];
                g_delta += da * av[p];
                gA[p] += da * dd;
              }
              g_delta += dh * bt[n] * xx;
              gB[row * N + n] += dh * dd * xx;
              g_x += dh * dd * bt[n];
              carry[p] = abt[p] * dh;
            }
            gdelta[row * D + d] += g_delta;
            gx[row * D + d] += g_x;
          }
        }
      }
      auto flush = [](const detail::DataPtr& dst, const Buffer& src) {
        if (!dst->requires_grad) return;
        double* g = dst->grad_buffer();
        for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
      };
      flush(xd, gx);
      flush(ddd, gdelta);
      flush(ad, gA);
      flush(bd, gB);
      flush(cd, gC);
    });
  }
  return y;
}

}  // namespace prgcn
