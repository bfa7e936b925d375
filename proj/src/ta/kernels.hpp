#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "common.hpp"

// Raw compute loops shared by the autodiff ops and (for the hot ones) mirrored
// by the serial reference implementations under src/ref/.
//
// Parallelisation rule: every OpenMP loop is gather-style -- each output (or
// gradient) element is written by exactly one thread and any reduction inside
// runs in a fixed serial order. That makes results bitwise identical for any
// thread count, including the serial reference.
//
// Gradient kernels accumulate with += because a tensor may feed several ops.

namespace tmg::kern {

// ---------------------------------------------------------------------------
// broadcasting

// Right-aligned numpy-style broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int64_t da = i < r - ra ? 1 : a[i - (r - ra)];
    int64_t db = i < r - rb ? 1 : b[i - (r - rb)];
    check(da == db || da == 1 || db == 1,
          "broadcast: incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `shape` aligned to an `out`-rank index space, 0 where broadcast.
inline std::vector<int64_t> broadcast_strides(const Shape& shape, const Shape& out) {
  size_t r = out.size(), rs = shape.size();
  std::vector<int64_t> st(r, 0);
  int64_t acc = 1;
  for (size_t i = rs; i-- > 0;) {
    size_t oi = i + (r - rs);
    st[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= shape[i];
  }
  return st;
}

// Map a flat index in `out` space to a flat index of a broadcast input.
inline int64_t bcast_index(int64_t flat, const Shape& out, const std::vector<int64_t>& strides) {
  int64_t idx = 0;
  for (size_t i = out.size(); i-- > 0;) {
    int64_t c = flat % out[i];
    flat /= out[i];
    idx += c * strides[i];
  }
  return idx;
}

// grad_out has shape `from`; accumulate it into grad shaped `to` (summing over
// broadcast positions). Parallel over the destination elements.
template <class T>
void reduce_to_shape_acc(const T* gout, const Shape& from, T* gdst, const Shape& to) {
  if (from == to) {
    int64_t n = numel_of(from);
#pragma omp parallel for
    for (int64_t i = 0; i < n; ++i) gdst[i] += gout[i];
    return;
  }
  auto st = broadcast_strides(to, from);
  int64_t nfrom = numel_of(from), nto = numel_of(to);
  // Inverted gather: each destination element sums its source positions in
  // ascending order. nto is small whenever we actually broadcast, so a plain
  // scan per destination is fine.
#pragma omp parallel for
  for (int64_t d = 0; d < nto; ++d) {
    T acc = T(0);
    for (int64_t s = 0; s < nfrom; ++s)
      if (bcast_index(s, from, st) == d) acc += gout[s];
    gdst[d] += acc;
  }
}

// ---------------------------------------------------------------------------
// matmul: A [bs, m, k] x B [bs, k, n] -> C [bs, m, n], batch already expanded.

template <class T>
void matmul(const T* A, const T* B, T* C, int64_t bs, int64_t m, int64_t k, int64_t n,
            bool accumulate) {
#pragma omp parallel for
  for (int64_t bi = 0; bi < bs * m; ++bi) {
    int64_t b = bi / m, i = bi % m;
    const T* a = A + b * m * k + i * k;
    const T* bb = B + b * k * n;
    T* c = C + b * m * n + i * n;
    if (!accumulate)
      for (int64_t j = 0; j < n; ++j) c[j] = T(0);
    for (int64_t p = 0; p < k; ++p) {
      T av = a[p];
      const T* br = bb + p * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * br[j];
    }
  }
}

// C [bs,m,n] x B^T: dA[b,i,p] += sum_j C[b,i,j] * B[b,p,j]
template <class T>
void matmul_nt_acc(const T* C, const T* B, T* dA, int64_t bs, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for
  for (int64_t bi = 0; bi < bs * m; ++bi) {
    int64_t b = bi / m, i = bi % m;
    const T* c = C + b * m * n + i * n;
    const T* bb = B + b * k * n;
    T* da = dA + b * m * k + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T* br = bb + p * n;
      T acc = T(0);
      for (int64_t j = 0; j < n; ++j) acc += c[j] * br[j];
      da[p] += acc;
    }
  }
}

// A^T x C: dB[b,p,j] += sum_i A[b,i,p] * C[b,i,j]
template <class T>
void matmul_tn_acc(const T* A, const T* C, T* dB, int64_t bs, int64_t m, int64_t k, int64_t n) {
#pragma omp parallel for
  for (int64_t bp = 0; bp < bs * k; ++bp) {
    int64_t b = bp / k, p = bp % k;
    const T* a = A + b * m * k;
    const T* c = C + b * m * n;
    T* db = dB + b * k * n + p * n;
    for (int64_t i = 0; i < m; ++i) {
      T av = a[i * k + p];
      const T* cr = c + i * n;
      for (int64_t j = 0; j < n; ++j) db[j] += av * cr[j];
    }
  }
}

// ---------------------------------------------------------------------------
// softmax over the last axis, numerically stable

template <class T>
void softmax_lastaxis(const T* x, T* y, int64_t rows, int64_t cols) {
#pragma omp parallel for
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mx = xr[0];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, xr[c]);
    T sum = T(0);
    for (int64_t c = 0; c < cols; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      sum += yr[c];
    }
    T inv = T(1) / sum;
    for (int64_t c = 0; c < cols; ++c) yr[c] *= inv;
  }
}

// gx += y * (gy - sum(gy*y))
template <class T>
void softmax_lastaxis_bw(const T* y, const T* gy, T* gx, int64_t rows, int64_t cols) {
#pragma omp parallel for
  for (int64_t r = 0; r < rows; ++r) {
    const T* yr = y + r * cols;
    const T* gr = gy + r * cols;
    T* gxr = gx + r * cols;
    T dot = T(0);
    for (int64_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
    for (int64_t c = 0; c < cols; ++c) gxr[c] += yr[c] * (gr[c] - dot);
  }
}

// ---------------------------------------------------------------------------
// layer norm over the last axis with affine params

template <class T>
void layernorm(const T* x, const T* w, const T* b, T* y, T* mean, T* rstd, int64_t rows,
               int64_t cols, T eps) {
#pragma omp parallel for
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = x + r * cols;
    T* yr = y + r * cols;
    T mu = T(0);
    for (int64_t c = 0; c < cols; ++c) mu += xr[c];
    mu /= T(cols);
    T var = T(0);
    for (int64_t c = 0; c < cols; ++c) {
      T d = xr[c] - mu;
      var += d * d;
    }
    var /= T(cols);
    T rs = T(1) / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    for (int64_t c = 0; c < cols; ++c) yr[c] = (xr[c] - mu) * rs * w[c] + b[c];
  }
}

template <class T>
void layernorm_bw(const T* x, const T* w, const T* gy, const T* mean, const T* rstd, T* gx, T* gw,
                  T* gb, int64_t rows, int64_t cols) {
  if (gx) {
#pragma omp parallel for
    for (int64_t r = 0; r < rows; ++r) {
      const T* xr = x + r * cols;
      const T* gr = gy + r * cols;
      T mu = mean[r], rs = rstd[r];
      // gx = rs*(gh - mean(gh) - xhat*mean(gh*xhat)), gh = gy*w
      T s1 = T(0), s2 = T(0);
      for (int64_t c = 0; c < cols; ++c) {
        T xh = (xr[c] - mu) * rs;
        T gh = gr[c] * w[c];
        s1 += gh;
        s2 += gh * xh;
      }
      s1 /= T(cols);
      s2 /= T(cols);
      T* gxr = gx + r * cols;
      for (int64_t c = 0; c < cols; ++c) {
        T xh = (xr[c] - mu) * rs;
        T gh = gr[c] * w[c];
        gxr[c] += rs * (gh - s1 - xh * s2);
      }
    }
  }
  if (gw) {
#pragma omp parallel for
    for (int64_t c = 0; c < cols; ++c) {
      T aw = T(0), ab = T(0);
      for (int64_t r = 0; r < rows; ++r) {
        T xh = (x[r * cols + c] - mean[r]) * rstd[r];
        aw += gy[r * cols + c] * xh;
        ab += gy[r * cols + c];
      }
      gw[c] += aw;
      gb[c] += ab;
    }
  }
}

// ---------------------------------------------------------------------------
// batch norm, channel axis 1: x viewed as [n, C, sp]

template <class T>
void batchnorm_stats(const T* x, int64_t n, int64_t C, int64_t sp, T* mean, T* var_biased) {
#pragma omp parallel for
  for (int64_t c = 0; c < C; ++c) {
    T mu = T(0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) mu += x[(i * C + c) * sp + s];
    mu /= T(n * sp);
    T v = T(0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) {
        T d = x[(i * C + c) * sp + s] - mu;
        v += d * d;
      }
    v /= T(n * sp);
    mean[c] = mu;
    var_biased[c] = v;
  }
}

template <class T>
void batchnorm_apply(const T* x, const T* mean, const T* var, const T* w, const T* b, T* y,
                     int64_t n, int64_t C, int64_t sp, T eps) {
#pragma omp parallel for
  for (int64_t ic = 0; ic < n * C; ++ic) {
    int64_t c = ic % C;
    T rs = T(1) / std::sqrt(var[c] + eps);
    const T* xr = x + ic * sp;
    T* yr = y + ic * sp;
    for (int64_t s = 0; s < sp; ++s) yr[s] = (xr[s] - mean[c]) * rs * w[c] + b[c];
  }
}

// training-mode backward (batch statistics participate in the graph)
template <class T>
void batchnorm_bw(const T* x, const T* mean, const T* var, const T* w, const T* gy, T* gx, T* gw,
                  T* gb, int64_t n, int64_t C, int64_t sp, T eps) {
  int64_t m = n * sp;
#pragma omp parallel for
  for (int64_t c = 0; c < C; ++c) {
    T mu = mean[c];
    T rs = T(1) / std::sqrt(var[c] + eps);
    T sg = T(0), sgx = T(0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) {
        int64_t off = (i * C + c) * sp + s;
        T xh = (x[off] - mu) * rs;
        sg += gy[off];
        sgx += gy[off] * xh;
      }
    if (gw) gw[c] += sgx;
    if (gb) gb[c] += sg;
    if (gx) {
      T s1 = sg / T(m), s2 = sgx / T(m);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < sp; ++s) {
          int64_t off = (i * C + c) * sp + s;
          T xh = (x[off] - mu) * rs;
          gx[off] += w[c] * rs * (gy[off] - s1 - xh * s2);
        }
    }
  }
}

// eval-mode backward: running stats are constants
template <class T>
void batchnorm_eval_bw(const T* x, const T* mean, const T* var, const T* w, const T* gy, T* gx,
                       T* gw, T* gb, int64_t n, int64_t C, int64_t sp, T eps) {
#pragma omp parallel for
  for (int64_t c = 0; c < C; ++c) {
    T rs = T(1) / std::sqrt(var[c] + eps);
    T sg = T(0), sgx = T(0);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) {
        int64_t off = (i * C + c) * sp + s;
        sg += gy[off];
        sgx += gy[off] * (x[off] - mean[c]) * rs;
        if (gx) gx[off] += gy[off] * w[c] * rs;
      }
    if (gw) gw[c] += sgx;
    if (gb) gb[c] += sg;
  }
}

// ---------------------------------------------------------------------------
// dense conv2d, NCHW x [cout, cin, kh, kw], zero padding
// out spatial extent = floor((in + 2p - k)/s) + 1

template <class T>
void conv2d(const T* x, const T* w, T* y, int64_t B, int64_t cin, int64_t H, int64_t W,
            int64_t cout, int64_t kh, int64_t kw, int64_t s, int64_t p, int64_t Ho, int64_t Wo) {
#pragma omp parallel for
  for (int64_t bc = 0; bc < B * cout; ++bc) {
    int64_t b = bc / cout, co = bc % cout;
    const T* xb = x + b * cin * H * W;
    const T* wc = w + co * cin * kh * kw;
    T* yo = y + bc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho) {
      int64_t i0 = std::max<int64_t>(0, p - ho * s), i1 = std::min(kh, H + p - ho * s);
      for (int64_t wo = 0; wo < Wo; ++wo) {
        int64_t j0 = std::max<int64_t>(0, p - wo * s), j1 = std::min(kw, W + p - wo * s);
        T acc = T(0);
        for (int64_t ci = 0; ci < cin; ++ci) {
          const T* xc = xb + ci * H * W;
          const T* wk = wc + ci * kh * kw;
          for (int64_t i = i0; i < i1; ++i) {
            const T* xr = xc + (ho * s + i - p) * W + (wo * s - p);
            const T* wr = wk + i * kw;
            for (int64_t j = j0; j < j1; ++j) acc += xr[j] * wr[j];
          }
        }
        yo[ho * Wo + wo] = acc;
      }
    }
  }
}

template <class T>
void conv2d_bw_input(const T* gy, const T* w, T* gx, int64_t B, int64_t cin, int64_t H, int64_t W,
                     int64_t cout, int64_t kh, int64_t kw, int64_t s, int64_t p, int64_t Ho,
                     int64_t Wo) {
#pragma omp parallel for
  for (int64_t o = 0; o < B * cin * H * W; ++o) {
    int64_t ww = o % W, h = (o / W) % H, ci = (o / (W * H)) % cin, b = o / (W * H * cin);
    T acc = T(0);
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t i = 0; i < kh; ++i) {
        int64_t hn = h + p - i;
        if (hn < 0 || hn % s != 0) continue;
        int64_t ho = hn / s;
        if (ho >= Ho) continue;
        for (int64_t j = 0; j < kw; ++j) {
          int64_t wn = ww + p - j;
          if (wn < 0 || wn % s != 0) continue;
          int64_t wo = wn / s;
          if (wo >= Wo) continue;
          acc += gy[((b * cout + co) * Ho + ho) * Wo + wo] *
                 w[((co * cin + ci) * kh + i) * kw + j];
        }
      }
    gx[o] += acc;
  }
}

template <class T>
void conv2d_bw_kernel(const T* gy, const T* x, T* gw, int64_t B, int64_t cin, int64_t H, int64_t W,
                      int64_t cout, int64_t kh, int64_t kw, int64_t s, int64_t p, int64_t Ho,
                      int64_t Wo) {
#pragma omp parallel for
  for (int64_t o = 0; o < cout * cin * kh * kw; ++o) {
    int64_t j = o % kw, i = (o / kw) % kh, ci = (o / (kw * kh)) % cin, co = o / (kw * kh * cin);
    T acc = T(0);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t ho = 0; ho < Ho; ++ho) {
        int64_t h = ho * s + i - p;
        if (h < 0 || h >= H) continue;
        for (int64_t wo = 0; wo < Wo; ++wo) {
          int64_t ww = wo * s + j - p;
          if (ww < 0 || ww >= W) continue;
          acc += gy[((b * cout + co) * Ho + ho) * Wo + wo] * x[((b * cin + ci) * H + h) * W + ww];
        }
      }
    gw[o] += acc;
  }
}

// ---------------------------------------------------------------------------
// average pooling with ceil-mode output size, NCHW

inline int64_t pool_out_ceil(int64_t in, int64_t k, int64_t s) {
  int64_t o = (in - k + s - 1) / s + 1;  // ceil((in - k)/s) + 1
  if ((o - 1) * s >= in) --o;            // drop a window that starts past the input
  return o;
}

template <class T>
void avg_pool2d_ceil(const T* x, T* y, int64_t nc, int64_t H, int64_t W, int64_t k, int64_t s) {
  int64_t Ho = pool_out_ceil(H, k, s), Wo = pool_out_ceil(W, k, s);
#pragma omp parallel for
  for (int64_t i = 0; i < nc * Ho * Wo; ++i) {
    int64_t wo = i % Wo, ho = (i / Wo) % Ho, c = i / (Wo * Ho);
    int64_t h0 = ho * s, w0 = wo * s;
    int64_t h1 = std::min(h0 + k, H), w1 = std::min(w0 + k, W);
    T acc = T(0);
    for (int64_t h = h0; h < h1; ++h)
      for (int64_t w = w0; w < w1; ++w) acc += x[(c * H + h) * W + w];
    // averaged over the cells actually covered (edge windows are smaller)
    y[i] = acc / T((h1 - h0) * (w1 - w0));
  }
}

template <class T>
void avg_pool2d_ceil_bw(const T* gy, T* gx, int64_t nc, int64_t H, int64_t W, int64_t k,
                        int64_t s) {
  int64_t Ho = pool_out_ceil(H, k, s), Wo = pool_out_ceil(W, k, s);
  // gather per input cell: find the windows that cover it
#pragma omp parallel for
  for (int64_t i = 0; i < nc * H * W; ++i) {
    int64_t w = i % W, h = (i / W) % H, c = i / (W * H);
    T acc = T(0);
    for (int64_t ho = 0; ho < Ho; ++ho) {
      int64_t h0 = ho * s, h1 = std::min(h0 + k, H);
      if (h < h0 || h >= h1) continue;
      for (int64_t wo = 0; wo < Wo; ++wo) {
        int64_t w0 = wo * s, w1 = std::min(w0 + k, W);
        if (w < w0 || w >= w1) continue;
        acc += gy[(c * Ho + ho) * Wo + wo] / T((h1 - h0) * (w1 - w0));
      }
    }
    gx[i] += acc;
  }
}

// ---------------------------------------------------------------------------
// weighted gather: out[i,:] = sum_j w[i,j] * src[idx[i,j],:]
// Shared by k-NN interpolation and bilinear map sampling; weights and indices
// are geometry (constant), gradients flow to src only.

template <class T>
void weighted_gather(const T* src, const int64_t* idx, const T* w, T* out, int64_t n, int64_t J,
                     int64_t C) {
#pragma omp parallel for
  for (int64_t i = 0; i < n; ++i) {
    T* o = out + i * C;
    for (int64_t c = 0; c < C; ++c) o[c] = T(0);
    for (int64_t j = 0; j < J; ++j) {
      int64_t s = idx[i * J + j];
      if (s < 0) continue;  // padded / invisible slot
      T wj = w[i * J + j];
      const T* sr = src + s * C;
      for (int64_t c = 0; c < C; ++c) o[c] += wj * sr[c];
    }
  }
}

// scatter side runs serially in ascending i so accumulation order is fixed
template <class T>
void weighted_gather_bw(const T* gy, const int64_t* idx, const T* w, T* gsrc, int64_t n, int64_t J,
                        int64_t C) {
  for (int64_t i = 0; i < n; ++i) {
    const T* g = gy + i * C;
    for (int64_t j = 0; j < J; ++j) {
      int64_t s = idx[i * J + j];
      if (s < 0) continue;
      T wj = w[i * J + j];
      T* gs = gsrc + s * C;
      for (int64_t c = 0; c < C; ++c) gs[c] += wj * g[c];
    }
  }
}

}  // namespace tmg::kern
