#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

// Serial reference implementations of the parallel kernels, written as the
// most obvious loops (no tiling, no pragmas, naive accumulation order).
// Tests and the benchmark compare these against the kern:: versions.

namespace tmg::ref {

// plain ijk dot-product matmul
template <class T>
void matmul(const T* A, const T* B, T* C, int64_t bs, int64_t m, int64_t k, int64_t n) {
  for (int64_t b = 0; b < bs; ++b)
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) {
        T acc = T(0);
        for (int64_t p = 0; p < k; ++p) acc += A[b * m * k + i * k + p] * B[b * k * n + p * n + j];
        C[b * m * n + i * n + j] = acc;
      }
}

// direct six-nested-loop convolution, NCHW
template <class T>
void conv2d(const T* x, const T* w, T* y, int64_t B, int64_t cin, int64_t H, int64_t W,
            int64_t cout, int64_t kh, int64_t kw, int64_t s, int64_t p, int64_t Ho, int64_t Wo) {
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < cout; ++co)
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          T acc = T(0);
          for (int64_t ci = 0; ci < cin; ++ci)
            for (int64_t i = 0; i < kh; ++i)
              for (int64_t j = 0; j < kw; ++j) {
                int64_t h = ho * s + i - p, ww = wo * s + j - p;
                if (h < 0 || h >= H || ww < 0 || ww >= W) continue;
                acc += x[((b * cin + ci) * H + h) * W + ww] *
                       w[((co * cin + ci) * kh + i) * kw + j];
              }
          y[((b * cout + co) * Ho + ho) * Wo + wo] = acc;
        }
}

template <class T>
void softmax_lastaxis(const T* x, T* y, int64_t rows, int64_t cols) {
  for (int64_t r = 0; r < rows; ++r) {
    T mx = x[r * cols];
    for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x[r * cols + c]);
    T sum = T(0);
    for (int64_t c = 0; c < cols; ++c) {
      y[r * cols + c] = std::exp(x[r * cols + c] - mx);
      sum += y[r * cols + c];
    }
    for (int64_t c = 0; c < cols; ++c) y[r * cols + c] /= sum;
  }
}

template <class T>
void layernorm(const T* x, const T* w, const T* b, T* y, int64_t rows, int64_t cols, T eps) {
  for (int64_t r = 0; r < rows; ++r) {
    T mu = T(0);
    for (int64_t c = 0; c < cols; ++c) mu += x[r * cols + c];
    mu /= T(cols);
    T var = T(0);
    for (int64_t c = 0; c < cols; ++c) {
      T d = x[r * cols + c] - mu;
      var += d * d;
    }
    var /= T(cols);
    for (int64_t c = 0; c < cols; ++c)
      y[r * cols + c] = (x[r * cols + c] - mu) / std::sqrt(var + eps) * w[c] + b[c];
  }
}

template <class T>
void avg_pool2d_ceil(const T* x, T* y, int64_t nc, int64_t H, int64_t W, int64_t k, int64_t s) {
  int64_t Ho = (H - k + s - 1) / s + 1, Wo = (W - k + s - 1) / s + 1;
  if ((Ho - 1) * s >= H) --Ho;  // last window must start inside the input
  if ((Wo - 1) * s >= W) --Wo;
  for (int64_t c = 0; c < nc; ++c)
    for (int64_t ho = 0; ho < Ho; ++ho)
      for (int64_t wo = 0; wo < Wo; ++wo) {
        int64_t h0 = ho * s, w0 = wo * s;
        int64_t h1 = std::min(h0 + k, H), w1 = std::min(w0 + k, W);
        T acc = T(0);
        for (int64_t h = h0; h < h1; ++h)
          for (int64_t w = w0; w < w1; ++w) acc += x[(c * H + h) * W + w];
        y[(c * Ho + ho) * Wo + wo] = acc / T((h1 - h0) * (w1 - w0));
      }
}

template <class T>
void weighted_gather(const T* src, const int64_t* idx, const T* w, T* out, int64_t n, int64_t J,
                     int64_t C) {
  for (int64_t i = 0; i < n; ++i)
    for (int64_t c = 0; c < C; ++c) {
      T acc = T(0);
      for (int64_t j = 0; j < J; ++j)
        if (idx[i * J + j] >= 0) acc += w[i * J + j] * src[idx[i * J + j] * C + c];
      out[i * C + c] = acc;
    }
}

// per-channel batch statistics with compensated (Kahan) summation
template <class T>
void batchnorm_stats_kahan(const T* x, int64_t n, int64_t C, int64_t sp, T* mean, T* var_biased) {
  for (int64_t c = 0; c < C; ++c) {
    double sum = 0.0, comp = 0.0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) {
        double v = static_cast<double>(x[(i * C + c) * sp + s]) - comp;
        double t = sum + v;
        comp = (t - sum) - v;
        sum = t;
      }
    double mu = sum / static_cast<double>(n * sp);
    double vsum = 0.0, vcomp = 0.0;
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) {
        double d = static_cast<double>(x[(i * C + c) * sp + s]) - mu;
        double v = d * d - vcomp;
        double t = vsum + v;
        vcomp = (t - vsum) - v;
        vsum = t;
      }
    mean[c] = static_cast<T>(mu);
    var_biased[c] = static_cast<T>(vsum / static_cast<double>(n * sp));
  }
}

}  // namespace tmg::ref
