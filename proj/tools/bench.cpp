// Benchmark of the OpenMP kernels against the serial reference loops.
// Prints a table with wall times and verifies the two implementations agree.

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "ref/ref_kernels.hpp"
#include "rng.hpp"
#include "ta/kernels.hpp"

using tmg::Rng;

namespace {

double now_ms() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

template <class F>
double time_best_of(int reps, F f) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    double t0 = now_ms();
    f();
    best = std::min(best, now_ms() - t0);
  }
  return best;
}

double max_abs_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double m = 0;
  for (size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

void report(const char* name, double t_ref, double t_par, double diff, double tol) {
  const char* verdict = diff <= tol ? "ok" : "MISMATCH";
  std::printf("%-22s serial %8.2f ms   parallel %8.2f ms   speedup %5.2fx   max|diff| %.2e  %s\n",
              name, t_ref, t_par, t_ref / t_par, diff, verdict);
  if (diff > tol) std::exit(1);
}

}  // namespace

int main() {
  std::printf("kernel benchmark, %d OpenMP threads\n", omp_get_max_threads());
  Rng rng(7);

  {  // matmul 256x256x256
    int64_t m = 256, k = 256, n = 256;
    std::vector<float> A(m * k), B(k * n), C1(m * n), C2(m * n);
    for (auto& v : A) v = static_cast<float>(rng.normal());
    for (auto& v : B) v = static_cast<float>(rng.normal());
    double t1 = time_best_of(3, [&] { tmg::ref::matmul(A.data(), B.data(), C1.data(), 1, m, k, n); });
    double t2 = time_best_of(3, [&] { tmg::kern::matmul(A.data(), B.data(), C2.data(), 1, m, k, n, false); });
    report("matmul 256^3", t1, t2, max_abs_diff(C1, C2), 1e-3);
  }

  {  // conv2d 8x16x64x64, 3x3 (32 out channels), stride 1, pad 1.
    // Sizes go through a volatile so the compiler cannot constant-propagate
    // them into either implementation; that would unfairly specialise
    // whichever function it happens to clone.
    volatile int64_t dims[9] = {8, 16, 64, 64, 32, 3, 3, 1, 1};
    int64_t B = dims[0], cin = dims[1], H = dims[2], W = dims[3], cout = dims[4], kh = dims[5],
            kw = dims[6], s = dims[7], p = dims[8];
    int64_t Ho = (H + 2 * p - kh) / s + 1, Wo = (W + 2 * p - kw) / s + 1;
    std::vector<float> x(B * cin * H * W), w(cout * cin * kh * kw), y1(B * cout * Ho * Wo),
        y2(B * cout * Ho * Wo);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    for (auto& v : w) v = static_cast<float>(rng.normal(0.0, 0.1));
    double t1 = time_best_of(2, [&] {
      tmg::ref::conv2d(x.data(), w.data(), y1.data(), B, cin, H, W, cout, kh, kw, s, p, Ho, Wo);
    });
    double t2 = time_best_of(2, [&] {
      tmg::kern::conv2d(x.data(), w.data(), y2.data(), B, cin, H, W, cout, kh, kw, s, p, Ho, Wo);
    });
    report("conv2d 8x16x64x64", t1, t2, max_abs_diff(y1, y2), 1e-4);
  }

  {  // softmax 4096 rows x 512 cols
    int64_t rows = 4096, cols = 512;
    std::vector<float> x(rows * cols), y1(rows * cols), y2(rows * cols);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    double t1 = time_best_of(5, [&] { tmg::ref::softmax_lastaxis(x.data(), y1.data(), rows, cols); });
    double t2 = time_best_of(5, [&] { tmg::kern::softmax_lastaxis(x.data(), y2.data(), rows, cols); });
    report("softmax 4096x512", t1, t2, max_abs_diff(y1, y2), 1e-6);
  }

  {  // layernorm 8192 rows x 256 cols
    int64_t rows = 8192, cols = 256;
    std::vector<float> x(rows * cols), w(cols, 1.0f), b(cols, 0.0f), y1(rows * cols),
        y2(rows * cols), mean(rows), rstd(rows);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    double t1 = time_best_of(5, [&] {
      tmg::ref::layernorm(x.data(), w.data(), b.data(), y1.data(), rows, cols, 1e-5f);
    });
    double t2 = time_best_of(5, [&] {
      tmg::kern::layernorm(x.data(), w.data(), b.data(), y2.data(), mean.data(), rstd.data(), rows,
                           cols, 1e-5f);
    });
    report("layernorm 8192x256", t1, t2, max_abs_diff(y1, y2), 1e-5);
  }

  {  // weighted gather 100k x 3 neighbours x 64 channels
    int64_t n = 100000, J = 3, C = 64, N = 50000;
    std::vector<float> src(N * C), w(n * J), o1(n * C), o2(n * C);
    std::vector<int64_t> idx(n * J);
    for (auto& v : src) v = static_cast<float>(rng.normal());
    for (auto& v : w) v = static_cast<float>(rng.uniform());
    for (auto& v : idx) v = static_cast<int64_t>(rng.randint(static_cast<uint64_t>(N)));
    double t1 = time_best_of(5, [&] {
      tmg::ref::weighted_gather(src.data(), idx.data(), w.data(), o1.data(), n, J, C);
    });
    double t2 = time_best_of(5, [&] {
      tmg::kern::weighted_gather(src.data(), idx.data(), w.data(), o2.data(), n, J, C);
    });
    report("gather 100kx3x64", t1, t2, max_abs_diff(o1, o2), 1e-5);
  }

  std::printf("all kernels agree with the serial reference\n");
  return 0;
}
