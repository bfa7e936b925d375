#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "ta/kernels.hpp"
#include "ta/tensor.hpp"

// Differentiable ops. Each op computes its value eagerly via kern:: loops and,
// when a graph is active and an input requires grad, records a backward
// closure that accumulates into input grads with +=.

namespace tmg::ta {

namespace detail {

inline void axis_split(const Shape& s, int64_t axis, int64_t& outer, int64_t& ax, int64_t& inner) {
  if (axis < 0) axis += static_cast<int64_t>(s.size());
  check(axis >= 0 && axis < static_cast<int64_t>(s.size()), "ops: axis out of range");
  outer = 1;
  inner = 1;
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  ax = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

inline int64_t norm_axis(const Shape& s, int64_t axis) {
  if (axis < 0) axis += static_cast<int64_t>(s.size());
  check(axis >= 0 && axis < static_cast<int64_t>(s.size()), "ops: axis out of range");
  return axis;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// broadcast binary ops

template <class T, class F, class DA, class DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  Shape os = kern::broadcast_shape(a.shape(), b.shape());
  auto sa = kern::broadcast_strides(a.shape(), os);
  auto sb = kern::broadcast_strides(b.shape(), os);
  int64_t n = numel_of(os);
  std::vector<T> y(static_cast<size_t>(n));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i)
    y[i] = f(pa[kern::bcast_index(i, os, sa)], pb[kern::bcast_index(i, os, sb)]);
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Graph<T>::current()->record(on, {an, bn}, [an, bn, on, sa, sb, da, db] {
      const Shape& os2 = on->shape;
      int64_t n2 = numel_of(os2);
      const T* g = on->grad.data();
      const T* pa2 = an->value.data();
      const T* pb2 = bn->value.data();
      if (an->requires_grad) {
        std::vector<T> tmp(static_cast<size_t>(n2));
#pragma omp parallel for
        for (int64_t i = 0; i < n2; ++i)
          tmp[i] = g[i] * da(pa2[kern::bcast_index(i, os2, sa)], pb2[kern::bcast_index(i, os2, sb)]);
        kern::reduce_to_shape_acc(tmp.data(), os2, an->grad.data(), an->shape);
      }
      if (bn->requires_grad) {
        std::vector<T> tmp(static_cast<size_t>(n2));
#pragma omp parallel for
        for (int64_t i = 0; i < n2; ++i)
          tmp[i] = g[i] * db(pa2[kern::bcast_index(i, os2, sa)], pb2[kern::bcast_index(i, os2, sb)]);
        kern::reduce_to_shape_acc(tmp.data(), os2, bn->grad.data(), bn->shape);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op(
      a, b, [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// ---------------------------------------------------------------------------
// unary ops

template <class T, class F, class D>
Tensor<T> unary_op(const Tensor<T>& a, F f, D dfdx /* (x, y) -> dy/dx */) {
  int64_t n = a.numel();
  std::vector<T> y(static_cast<size_t>(n));
  const T* pa = a.data().data();
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i) y[i] = f(pa[i]);
  auto out = Tensor<T>::from_data(a.shape(), std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, dfdx] {
      if (!an->requires_grad) return;
      int64_t n2 = static_cast<int64_t>(an->value.size());
      const T* g = on->grad.data();
      const T* x = an->value.data();
      const T* yv = on->value.data();
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t i = 0; i < n2; ++i) gx[i] += g[i] * dfdx(x[i], yv[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}
template <class T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}
template <class T>
Tensor<T> log(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}
template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}
template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}
template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); }, [](T, T y) { return y * (T(1) - y); });
}
template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}
// exact gelu: x * Phi(x)
template <class T>
Tensor<T> gelu(const Tensor<T>& a) {
  constexpr T inv_sqrt2 = T(0.7071067811865475244008443621048490393);
  constexpr T inv_sqrt2pi = T(0.3989422804014326779399460599343818685);
  return unary_op(
      a,
      [=](T x) { return x * T(0.5) * (T(1) + std::erf(x * inv_sqrt2)); },
      [=](T x, T) {
        T phi = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
        T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
        return phi + x * pdf;
      });
}
// stable softplus: max(x,0) + log1p(exp(-|x|))
template <class T>
Tensor<T> softplus(const Tensor<T>& a) {
  return unary_op(
      a,
      [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x, T) { return T(1) / (T(1) + std::exp(-x)); });
}
template <class T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}
template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}
template <class T>
Tensor<T> clamp_min(const Tensor<T>& a, T lo) {
  return unary_op(
      a, [=](T x) { return std::max(x, lo); }, [=](T x, T) { return x >= lo ? T(1) : T(0); });
}
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary_op(
      a, [=](T x) { return x + s; }, [](T, T) { return T(1); });
}
template <class T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary_op(
      a, [=](T x) { return x * s; }, [=](T, T) { return s; });
}

// ---------------------------------------------------------------------------
// reductions

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  const T* pa = a.data().data();
  T acc = T(0);
  for (int64_t i = 0; i < a.numel(); ++i) acc += pa[i];  // fixed order
  auto out = Tensor<T>::scalar(acc);
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on] {
      if (!an->requires_grad) return;
      T g = on->grad[0];
      int64_t n = static_cast<int64_t>(an->value.size());
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  check(a.numel() > 0, "mean_all: empty tensor");
  return mul_scalar(sum_all(a), T(1) / T(a.numel()));
}

template <class T>
Tensor<T> sum_axis(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
  int64_t outer, ax, inner;
  detail::axis_split(a.shape(), axis, outer, ax, inner);
  int64_t nax = detail::norm_axis(a.shape(), axis);
  Shape os;
  for (int64_t i = 0; i < static_cast<int64_t>(a.shape().size()); ++i) {
    if (i == nax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.shape()[static_cast<size_t>(i)]);
    }
  }
  std::vector<T> y(static_cast<size_t>(outer * inner), T(0));
  const T* pa = a.data().data();
#pragma omp parallel for
  for (int64_t oi = 0; oi < outer * inner; ++oi) {
    int64_t o = oi / inner, ii = oi % inner;
    T acc = T(0);
    for (int64_t k = 0; k < ax; ++k) acc += pa[(o * ax + k) * inner + ii];
    y[oi] = acc;
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, outer, ax, inner] {
      if (!an->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t i = 0; i < outer * ax * inner; ++i) {
        int64_t o = i / (ax * inner), ii = i % inner;
        gx[i] += g[o * inner + ii];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
  int64_t outer, ax, inner;
  detail::axis_split(a.shape(), axis, outer, ax, inner);
  (void)outer;
  (void)inner;
  return mul_scalar(sum_axis(a, axis, keepdim), T(1) / T(ax));
}

// max over one axis; ties pick the lowest index
template <class T>
Tensor<T> max_axis(const Tensor<T>& a, int64_t axis, bool keepdim = false) {
  int64_t outer, ax, inner;
  detail::axis_split(a.shape(), axis, outer, ax, inner);
  int64_t nax = detail::norm_axis(a.shape(), axis);
  Shape os;
  for (int64_t i = 0; i < static_cast<int64_t>(a.shape().size()); ++i) {
    if (i == nax) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.shape()[static_cast<size_t>(i)]);
    }
  }
  std::vector<T> y(static_cast<size_t>(outer * inner));
  auto arg = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(outer * inner));
  const T* pa = a.data().data();
#pragma omp parallel for
  for (int64_t oi = 0; oi < outer * inner; ++oi) {
    int64_t o = oi / inner, ii = oi % inner;
    T best = pa[(o * ax + 0) * inner + ii];
    int64_t bi = 0;
    for (int64_t k = 1; k < ax; ++k) {
      T v = pa[(o * ax + k) * inner + ii];
      if (v > best) {
        best = v;
        bi = k;
      }
    }
    y[oi] = best;
    (*arg)[oi] = bi;
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, arg, outer, ax, inner] {
      if (!an->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t oi = 0; oi < outer * inner; ++oi) {
        int64_t o = oi / inner, ii = oi % inner;
        gx[(o * ax + (*arg)[oi]) * inner + ii] += g[oi];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape ns) {
  // a single -1 extent is inferred
  int64_t known = 1, neg = -1;
  for (size_t i = 0; i < ns.size(); ++i) {
    if (ns[i] == -1) {
      check(neg == -1, "reshape: more than one -1 extent");
      neg = static_cast<int64_t>(i);
    } else {
      known *= ns[i];
    }
  }
  if (neg >= 0) {
    check(known != 0 && a.numel() % known == 0, "reshape: cannot infer extent");
    ns[static_cast<size_t>(neg)] = a.numel() / known;
  }
  check(numel_of(ns) == a.numel(), "reshape: numel mismatch, " + shape_str(a.shape()) + " -> " +
                                       shape_str(ns));
  std::vector<T> y(a.data().begin(), a.data().end());
  auto out = Tensor<T>::from_data(std::move(ns), std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on] {
      if (!an->requires_grad) return;
      int64_t n = static_cast<int64_t>(an->value.size());
      const T* g = on->grad.data();
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t i = 0; i < n; ++i) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> permute(const Tensor<T>& a, std::vector<int64_t> perm) {
  size_t r = a.shape().size();
  check(perm.size() == r, "permute: rank mismatch");
  Shape os(r);
  for (size_t i = 0; i < r; ++i) os[i] = a.shape()[static_cast<size_t>(perm[i])];
  // source strides in destination axis order
  std::vector<int64_t> sstr(r, 1);
  {
    std::vector<int64_t> astr(r, 1);
    for (size_t i = r - 1; i-- > 0;) astr[i] = astr[i + 1] * a.shape()[i + 1];
    for (size_t i = 0; i < r; ++i) sstr[i] = astr[static_cast<size_t>(perm[i])];
  }
  int64_t n = a.numel();
  std::vector<T> y(static_cast<size_t>(n));
  const T* pa = a.data().data();
#pragma omp parallel for
  for (int64_t d = 0; d < n; ++d) {
    int64_t rem = d, src = 0;
    for (size_t i = r; i-- > 0;) {
      int64_t c = rem % os[i];
      rem /= os[i];
      src += c * sstr[i];
    }
    y[d] = pa[src];
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, os, sstr, r] {
      if (!an->requires_grad) return;
      int64_t n2 = static_cast<int64_t>(an->value.size());
      const T* g = on->grad.data();
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t d = 0; d < n2; ++d) {
        int64_t rem = d, src = 0;
        for (size_t i = r; i-- > 0;) {
          int64_t c = rem % os[i];
          rem /= os[i];
          src += c * sstr[i];
        }
        gx[src] += g[d];  // bijective map: each gx element written exactly once
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose2(const Tensor<T>& a) {
  size_t r = a.shape().size();
  check(r >= 2, "transpose2: needs rank >= 2");
  std::vector<int64_t> perm(r);
  for (size_t i = 0; i < r; ++i) perm[i] = static_cast<int64_t>(i);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

template <class T>
Tensor<T> slice(const Tensor<T>& a, int64_t axis, int64_t start, int64_t len) {
  int64_t outer, ax, inner;
  detail::axis_split(a.shape(), axis, outer, ax, inner);
  int64_t nax = detail::norm_axis(a.shape(), axis);
  check(start >= 0 && len >= 0 && start + len <= ax, "slice: range out of bounds");
  Shape os = a.shape();
  os[static_cast<size_t>(nax)] = len;
  std::vector<T> y(static_cast<size_t>(outer * len * inner));
  const T* pa = a.data().data();
#pragma omp parallel for
  for (int64_t i = 0; i < outer * len * inner; ++i) {
    int64_t ii = i % inner, k = (i / inner) % len, o = i / (inner * len);
    y[i] = pa[(o * ax + start + k) * inner + ii];
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, outer, ax, inner, start, len] {
      if (!an->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = an->grad.data();
#pragma omp parallel for
      for (int64_t i = 0; i < outer * len * inner; ++i) {
        int64_t ii = i % inner, k = (i / inner) % len, o = i / (inner * len);
        gx[(o * ax + start + k) * inner + ii] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& ts, int64_t axis) {
  check(!ts.empty(), "concat: empty input list");
  int64_t nax = detail::norm_axis(ts[0].shape(), axis);
  Shape os = ts[0].shape();
  int64_t total = 0;
  for (auto& t : ts) {
    check(t.shape().size() == os.size(), "concat: rank mismatch");
    for (size_t i = 0; i < os.size(); ++i)
      if (static_cast<int64_t>(i) != nax)
        check(t.shape()[i] == os[i], "concat: extent mismatch off the concat axis");
    total += t.extent(nax);
  }
  os[static_cast<size_t>(nax)] = total;
  int64_t outer, axo, inner;
  detail::axis_split(os, nax, outer, axo, inner);
  (void)axo;
  std::vector<T> y(static_cast<size_t>(numel_of(os)));
  int64_t off = 0;
  for (auto& t : ts) {
    int64_t ax = t.extent(nax);
    const T* pa = t.data().data();
#pragma omp parallel for
    for (int64_t i = 0; i < outer * ax * inner; ++i) {
      int64_t ii = i % inner, k = (i / inner) % ax, o = i / (inner * ax);
      y[(o * total + off + k) * inner + ii] = pa[i];
    }
    off += ax;
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  bool any = false;
  if (Graph<T>::current())
    for (auto& t : ts)
      if (t.requires_grad()) any = true;
  if (any) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<Node<T>>> ins;
    for (auto& t : ts) ins.push_back(t.node());
    auto on = out.node();
    Graph<T>::current()->record(on, ins, [ins, on, outer, inner, total, nax] {
      const T* g = on->grad.data();
      int64_t off2 = 0;
      for (auto& an : ins) {
        int64_t ax = an->shape[static_cast<size_t>(nax)];
        if (an->requires_grad) {
          T* gx = an->grad.data();
#pragma omp parallel for
          for (int64_t i = 0; i < outer * ax * inner; ++i) {
            int64_t ii = i % inner, k = (i / inner) % ax, o = i / (inner * ax);
            gx[i] += g[(o * total + off2 + k) * inner + ii];
          }
        }
        off2 += ax;
      }
    });
  }
  return out;
}

// gather along an axis by integer index list; backward is a serial
// scatter-add so repeated indices accumulate in a fixed order
template <class T>
Tensor<T> index_select(const Tensor<T>& a, int64_t axis, const std::vector<int64_t>& indices) {
  int64_t outer, ax, inner;
  detail::axis_split(a.shape(), axis, outer, ax, inner);
  int64_t nax = detail::norm_axis(a.shape(), axis);
  auto idx = std::make_shared<std::vector<int64_t>>(indices);
  for (int64_t v : *idx)
    check(v >= 0 && v < ax, "index_select: index " + std::to_string(v) + " out of range [0," +
                                std::to_string(ax) + ")");
  int64_t m = static_cast<int64_t>(idx->size());
  Shape os = a.shape();
  os[static_cast<size_t>(nax)] = m;
  std::vector<T> y(static_cast<size_t>(outer * m * inner));
  const T* pa = a.data().data();
#pragma omp parallel for
  for (int64_t i = 0; i < outer * m * inner; ++i) {
    int64_t ii = i % inner, k = (i / inner) % m, o = i / (inner * m);
    y[i] = pa[(o * ax + (*idx)[static_cast<size_t>(k)]) * inner + ii];
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, idx, outer, ax, inner, m] {
      if (!an->requires_grad) return;
      const T* g = on->grad.data();
      T* gx = an->grad.data();
      for (int64_t i = 0; i < outer * m * inner; ++i) {
        int64_t ii = i % inner, k = (i / inner) % m, o = i / (inner * m);
        gx[(o * ax + (*idx)[static_cast<size_t>(k)]) * inner + ii] += g[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// matmul

// Batched matmul. Supports equal batch shapes, or a rank-2 operand shared
// across the other side's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  check(as.size() >= 2 && bs.size() >= 2, "matmul: operands must have rank >= 2");
  int64_t m = as[as.size() - 2], k = as[as.size() - 1];
  int64_t k2 = bs[bs.size() - 2], n = bs[bs.size() - 1];
  check(k == k2, "matmul: inner extents differ, " + shape_str(as) + " x " + shape_str(bs));
  Shape abatch(as.begin(), as.end() - 2), bbatch(bs.begin(), bs.end() - 2);
  bool shared_b = bbatch.empty() && !abatch.empty();
  bool shared_a = abatch.empty() && !bbatch.empty();
  check(shared_a || shared_b || abatch == bbatch,
        "matmul: unsupported batch broadcast, " + shape_str(as) + " x " + shape_str(bs));
  Shape batch = abatch.empty() ? bbatch : abatch;
  int64_t nb = numel_of(batch);
  Shape os = batch;
  os.push_back(m);
  os.push_back(n);

  std::vector<T> y(static_cast<size_t>(nb * m * n));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  if (shared_b) {
    // batch dims fold into rows when the right operand is shared
    kern::matmul(pa, pb, y.data(), 1, nb * m, k, n, false);
  } else if (shared_a) {
    for (int64_t bi = 0; bi < nb; ++bi)
      kern::matmul(pa, pb + bi * k * n, y.data() + bi * m * n, 1, m, k, n, false);
  } else {
    kern::matmul(pa, pb, y.data(), nb, m, k, n, false);
  }
  auto out = Tensor<T>::from_data(os, std::move(y));
  if (track_grad<T>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Graph<T>::current()->record(on, {an, bn}, [an, bn, on, nb, m, k, n, shared_a, shared_b] {
      const T* g = on->grad.data();
      const T* pa2 = an->value.data();
      const T* pb2 = bn->value.data();
      if (an->requires_grad) {
        if (shared_a) {
          // dA = sum_b g_b B_b^T, rows of dA are shared: accumulate serially per batch
          for (int64_t bi = 0; bi < nb; ++bi)
            kern::matmul_nt_acc(g + bi * m * n, pb2 + bi * k * n, an->grad.data(), 1, m, k, n);
        } else if (shared_b) {
          // flatten batch into rows: dA[b,i,:] += g[b,i,:] B^T
          kern::matmul_nt_acc(g, pb2, an->grad.data(), 1, nb * m, k, n);
        } else {
          kern::matmul_nt_acc(g, pb2, an->grad.data(), nb, m, k, n);
        }
      }
      if (bn->requires_grad) {
        if (shared_b) {
          // dB = sum_b A_b^T g_b == (A flattened)^T (g flattened)
          kern::matmul_tn_acc(pa2, g, bn->grad.data(), 1, nb * m, k, n);
        } else if (shared_a) {
          for (int64_t bi = 0; bi < nb; ++bi)
            kern::matmul_tn_acc(pa2, g + bi * m * n, bn->grad.data() + bi * k * n, 1, m, k, n);
        } else {
          kern::matmul_tn_acc(pa2, g, bn->grad.data(), nb, m, k, n);
        }
      }
    });
  }
  return out;
}

// x [.., m, k] * W [k, n] + bias [n]
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// fused normalisation / softmax ops

template <class T>
Tensor<T> softmax_lastaxis(const Tensor<T>& a) {
  check(a.dim() >= 1, "softmax: needs rank >= 1");
  check(a.extent(-1) > 0, "softmax: zero-size axis");
  int64_t cols = a.extent(-1);
  int64_t rows = a.numel() / cols;
  std::vector<T> y(static_cast<size_t>(a.numel()));
  kern::softmax_lastaxis(a.data().data(), y.data(), rows, cols);
  auto out = Tensor<T>::from_data(a.shape(), std::move(y));
  if (track_grad<T>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Graph<T>::current()->record(on, {an}, [an, on, rows, cols] {
      if (!an->requires_grad) return;
      kern::softmax_lastaxis_bw(on->value.data(), on->grad.data(), an->grad.data(), rows, cols);
    });
  }
  return out;
}

template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                    T eps = T(1e-5)) {
  int64_t cols = x.extent(-1);
  int64_t rows = x.numel() / cols;
  check(w.numel() == cols && b.numel() == cols, "layernorm: affine param extent mismatch");
  std::vector<T> y(static_cast<size_t>(x.numel()));
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  auto rstd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  kern::layernorm(x.data().data(), w.data().data(), b.data().data(), y.data(), mean->data(),
                  rstd->data(), rows, cols, eps);
  auto out = Tensor<T>::from_data(x.shape(), std::move(y));
  if (track_grad<T>({&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
    Graph<T>::current()->record(on, {xn, wn, bn}, [xn, wn, bn, on, mean, rstd, rows, cols] {
      kern::layernorm_bw(xn->value.data(), wn->value.data(), on->grad.data(), mean->data(),
                         rstd->data(), xn->requires_grad ? xn->grad.data() : nullptr,
                         wn->requires_grad ? wn->grad.data() : nullptr,
                         bn->requires_grad ? bn->grad.data() : nullptr, rows, cols);
    });
  }
  return out;
}

// Batch norm over channel axis 1. Training mode normalises with batch
// statistics and reports them (biased variance) through batch_mean/batch_var
// so the caller can maintain running stats; eval mode consumes fixed stats.
template <class T>
Tensor<T> batchnorm_train(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                          std::vector<T>* batch_mean = nullptr,
                          std::vector<T>* batch_var = nullptr, T eps = T(1e-5)) {
  check(x.dim() >= 2, "batchnorm: needs rank >= 2");
  int64_t n = x.extent(0), C = x.extent(1), sp = x.numel() / (n * C);
  check(w.numel() == C && b.numel() == C, "batchnorm: affine param extent mismatch");
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  auto var = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  kern::batchnorm_stats(x.data().data(), n, C, sp, mean->data(), var->data());
  if (batch_mean) *batch_mean = *mean;
  if (batch_var) *batch_var = *var;
  std::vector<T> y(static_cast<size_t>(x.numel()));
  kern::batchnorm_apply(x.data().data(), mean->data(), var->data(), w.data().data(),
                        b.data().data(), y.data(), n, C, sp, eps);
  auto out = Tensor<T>::from_data(x.shape(), std::move(y));
  if (track_grad<T>({&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
    Graph<T>::current()->record(on, {xn, wn, bn}, [xn, wn, bn, on, mean, var, n, C, sp, eps] {
      kern::batchnorm_bw(xn->value.data(), mean->data(), var->data(), wn->value.data(),
                         on->grad.data(), xn->requires_grad ? xn->grad.data() : nullptr,
                         wn->requires_grad ? wn->grad.data() : nullptr,
                         bn->requires_grad ? bn->grad.data() : nullptr, n, C, sp, eps);
    });
  }
  return out;
}

template <class T>
Tensor<T> batchnorm_eval(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                         const std::vector<T>& running_mean, const std::vector<T>& running_var,
                         T eps = T(1e-5)) {
  check(x.dim() >= 2, "batchnorm: needs rank >= 2");
  int64_t n = x.extent(0), C = x.extent(1), sp = x.numel() / (n * C);
  check(static_cast<int64_t>(running_mean.size()) == C &&
            static_cast<int64_t>(running_var.size()) == C,
        "batchnorm: running stat extent mismatch");
  auto mean = std::make_shared<std::vector<T>>(running_mean);
  auto var = std::make_shared<std::vector<T>>(running_var);
  std::vector<T> y(static_cast<size_t>(x.numel()));
  kern::batchnorm_apply(x.data().data(), mean->data(), var->data(), w.data().data(),
                        b.data().data(), y.data(), n, C, sp, eps);
  auto out = Tensor<T>::from_data(x.shape(), std::move(y));
  if (track_grad<T>({&x, &w, &b})) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), bn = b.node(), on = out.node();
    Graph<T>::current()->record(on, {xn, wn, bn}, [xn, wn, bn, on, mean, var, n, C, sp, eps] {
      kern::batchnorm_eval_bw(xn->value.data(), mean->data(), var->data(), wn->value.data(),
                              on->grad.data(), xn->requires_grad ? xn->grad.data() : nullptr,
                              wn->requires_grad ? wn->grad.data() : nullptr,
                              bn->requires_grad ? bn->grad.data() : nullptr, n, C, sp, eps);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structured gathers

// out[i,:] = sum_j w[i,j] * src[idx[i,j],:]; idx/w are geometry constants,
// idx entries < 0 mean "no contribution" (e.g. point invisible in a view)
template <class T>
Tensor<T> weighted_gather(const Tensor<T>& src, std::vector<int64_t> idx, std::vector<T> w,
                          int64_t J) {
  check(src.dim() == 2, "weighted_gather: src must be [N, C]");
  check(idx.size() == w.size(), "weighted_gather: idx/weight length mismatch");
  check(J > 0 && static_cast<int64_t>(idx.size()) % J == 0, "weighted_gather: bad J");
  int64_t n = static_cast<int64_t>(idx.size()) / J;
  int64_t N = src.extent(0), C = src.extent(1);
  for (int64_t v : idx) check(v < N, "weighted_gather: index out of range");
  std::vector<T> y(static_cast<size_t>(n * C));
  kern::weighted_gather(src.data().data(), idx.data(), w.data(), y.data(), n, J, C);
  auto out = Tensor<T>::from_data({n, C}, std::move(y));
  if (track_grad<T>({&src})) {
    out.set_requires_grad(true);
    auto sn = src.node(), on = out.node();
    auto pidx = std::make_shared<std::vector<int64_t>>(std::move(idx));
    auto pw = std::make_shared<std::vector<T>>(std::move(w));
    Graph<T>::current()->record(on, {sn}, [sn, on, pidx, pw, n, J, C] {
      if (!sn->requires_grad) return;
      kern::weighted_gather_bw(on->grad.data(), pidx->data(), pw->data(), sn->grad.data(), n, J,
                               C);
    });
  }
  return out;
}

// x [B, cin, H, W] convolved with w [cout, cin, kh, kw], zero padding
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t padding) {
  check(x.dim() == 4, "conv2d: input must be [B, C, H, W], got " + shape_str(x.shape()));
  check(w.dim() == 4, "conv2d: kernel must be [Cout, Cin, kh, kw], got " + shape_str(w.shape()));
  int64_t B = x.extent(0), cin = x.extent(1), H = x.extent(2), W = x.extent(3);
  int64_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
  check(w.extent(1) == cin, "conv2d: channel mismatch between input and kernel");
  check(stride >= 1, "conv2d: stride must be >= 1");
  int64_t Ho = (H + 2 * padding - kh) / stride + 1;
  int64_t Wo = (W + 2 * padding - kw) / stride + 1;
  check(H + 2 * padding >= kh && W + 2 * padding >= kw && Ho > 0 && Wo > 0,
        "conv2d: kernel does not fit padded input");
  std::vector<T> y(static_cast<size_t>(B * cout * Ho * Wo));
  kern::conv2d(x.data().data(), w.data().data(), y.data(), B, cin, H, W, cout, kh, kw, stride,
               padding, Ho, Wo);
  auto out = Tensor<T>::from_data({B, cout, Ho, Wo}, std::move(y));
  if (track_grad<T>({&x, &w})) {
    out.set_requires_grad(true);
    auto xn = x.node(), wn = w.node(), on = out.node();
    Graph<T>::current()->record(
        on, {xn, wn}, [xn, wn, on, B, cin, H, W, cout, kh, kw, stride, padding, Ho, Wo] {
          if (xn->requires_grad)
            kern::conv2d_bw_input(on->grad.data(), wn->value.data(), xn->grad.data(), B, cin, H, W,
                                  cout, kh, kw, stride, padding, Ho, Wo);
          if (wn->requires_grad)
            kern::conv2d_bw_kernel(on->grad.data(), xn->value.data(), wn->grad.data(), B, cin, H,
                                   W, cout, kh, kw, stride, padding, Ho, Wo);
        });
  }
  return out;
}

// NCHW average pooling, ceil-mode output extents, edge windows average over
// the cells they actually cover
template <class T>
Tensor<T> avg_pool2d_ceil(const Tensor<T>& x, int64_t k, int64_t s) {
  check(x.dim() == 4, "avg_pool2d: input must be [N, C, H, W]");
  int64_t N = x.extent(0), C = x.extent(1), H = x.extent(2), W = x.extent(3);
  int64_t Ho = kern::pool_out_ceil(H, k, s), Wo = kern::pool_out_ceil(W, k, s);
  std::vector<T> y(static_cast<size_t>(N * C * Ho * Wo));
  kern::avg_pool2d_ceil(x.data().data(), y.data(), N * C, H, W, k, s);
  auto out = Tensor<T>::from_data({N, C, Ho, Wo}, std::move(y));
  if (track_grad<T>({&x})) {
    out.set_requires_grad(true);
    auto xn = x.node(), on = out.node();
    Graph<T>::current()->record(on, {xn}, [xn, on, N, C, H, W, k, s] {
      if (!xn->requires_grad) return;
      kern::avg_pool2d_ceil_bw(on->grad.data(), xn->grad.data(), N * C, H, W, k, s);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// multi-head scaled dot-product attention, composed from the primitives above.
// q [Lq, D], k/v [Lk, D]; key_mask (optional) marks visible keys with nonzero;
// masked keys get additive -1e30 before softmax, i.e. zero attention weight.
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, int64_t heads,
                    const std::vector<uint8_t>* key_mask = nullptr) {
  check(q.dim() == 2 && k.dim() == 2 && v.dim() == 2, "attention: q/k/v must be rank 2");
  int64_t Lq = q.extent(0), D = q.extent(1);
  int64_t Lk = k.extent(0);
  check(k.extent(1) == D && v.extent(1) == D, "attention: model dim mismatch across q/k/v");
  check(v.extent(0) == Lk, "attention: k and v disagree on sequence length");
  check(heads > 0 && D % heads == 0,
        "attention: model dim " + std::to_string(D) + " not divisible by " +
            std::to_string(heads) + " heads");
  int64_t dh = D / heads;
  auto Q = permute(reshape(q, {Lq, heads, dh}), {1, 0, 2});
  auto K = permute(reshape(k, {Lk, heads, dh}), {1, 0, 2});
  auto V = permute(reshape(v, {Lk, heads, dh}), {1, 0, 2});
  auto logits = mul_scalar(matmul(Q, transpose2(K)), T(1) / std::sqrt(T(dh)));
  if (key_mask) {
    check(static_cast<int64_t>(key_mask->size()) == Lk, "attention: mask length mismatch");
    bool any_visible = false;
    for (auto m : *key_mask) any_visible |= (m != 0);
    check(any_visible, "attention: mask hides every key");
    std::vector<T> mv(static_cast<size_t>(Lk));
    for (int64_t i = 0; i < Lk; ++i) mv[static_cast<size_t>(i)] = (*key_mask)[i] ? T(0) : T(-1e30);
    logits = add(logits, Tensor<T>::from_data({1, 1, Lk}, std::move(mv)));
  }
  auto A = softmax_lastaxis(logits);
  auto out = matmul(A, V);  // [h, Lq, dh]
  return reshape(permute(out, {1, 0, 2}), {Lq, D});
}

}  // namespace tmg::ta
