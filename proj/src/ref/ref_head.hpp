#pragma once

// Scalar oracles for the decoder stage: plain-loop linear / layernorm /
// attention primitives for chaining, projected-cosine logits, an exhaustive
// assignment solver, and per-element focal / BCE formulas.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "common.hpp"

namespace tmg::ref {

// y [n*out] = x [n*in] @ w [in*out] + b
inline std::vector<double> linear_scalar(std::span<const double> x, int64_t n, int64_t in,
                                         std::span<const double> w, std::span<const double> b,
                                         int64_t out) {
    check(x.size() == size_t(n * in) && w.size() == size_t(in * out) && b.size() == size_t(out),
          "linear_scalar: size mismatch");
    std::vector<double> y(size_t(n * out));
    for (int64_t r = 0; r < n; ++r)
        for (int64_t o = 0; o < out; ++o) {
            double s = b[size_t(o)];
            for (int64_t i = 0; i < in; ++i) s += x[size_t(r * in + i)] * w[size_t(i * out + o)];
            y[size_t(r * out + o)] = s;
        }
    return y;
}

// per-row affine layer norm: biased variance, eps inside the sqrt
inline std::vector<double> layernorm_scalar(std::span<const double> x, int64_t n, int64_t d,
                                            std::span<const double> w, std::span<const double> b,
                                            double eps = 1e-5) {
    check(x.size() == size_t(n * d), "layernorm_scalar: size mismatch");
    std::vector<double> y(x.size());
    for (int64_t r = 0; r < n; ++r) {
        double mu = 0;
        for (int64_t c = 0; c < d; ++c) mu += x[size_t(r * d + c)];
        mu /= double(d);
        double var = 0;
        for (int64_t c = 0; c < d; ++c) {
            double dv = x[size_t(r * d + c)] - mu;
            var += dv * dv;
        }
        var /= double(d);
        double rs = 1.0 / std::sqrt(var + eps);
        for (int64_t c = 0; c < d; ++c)
            y[size_t(r * d + c)] = (x[size_t(r * d + c)] - mu) * rs * w[size_t(c)] + b[size_t(c)];
    }
    return y;
}

// Multi-head softmax attention over pre-projected q [lq*dm], k/v [lk*dm];
// optional mask marks visible keys, hidden keys get -1e30 before softmax.
inline std::vector<double> mha_scalar(std::span<const double> q, int64_t lq,
                                      std::span<const double> k, std::span<const double> v,
                                      int64_t lk, int64_t dm, int64_t heads,
                                      const std::vector<uint8_t>* mask = nullptr) {
    check(dm % heads == 0, "mha_scalar: heads must divide dim");
    int64_t dh = dm / heads;
    double scale = 1.0 / std::sqrt(double(dh));
    std::vector<double> out(size_t(lq * dm), 0.0);
    for (int64_t h = 0; h < heads; ++h) {
        for (int64_t i = 0; i < lq; ++i) {
            std::vector<double> lg(static_cast<size_t>(lk));
            for (int64_t j = 0; j < lk; ++j) {
                double s = 0;
                for (int64_t d = 0; d < dh; ++d)
                    s += q[size_t(i * dm + h * dh + d)] * k[size_t(j * dm + h * dh + d)];
                lg[size_t(j)] = s * scale;
                if (mask && !(*mask)[size_t(j)]) lg[size_t(j)] += -1e30;
            }
            double mx = *std::max_element(lg.begin(), lg.end());
            double sum = 0;
            for (auto& e : lg) {
                e = std::exp(e - mx);
                sum += e;
            }
            double inv = 1.0 / sum;
            for (auto& e : lg) e *= inv;
            for (int64_t j = 0; j < lk; ++j)
                for (int64_t d = 0; d < dh; ++d)
                    out[size_t(i * dm + h * dh + d)] += lg[size_t(j)] * v[size_t(j * dm + h * dh + d)];
        }
    }
    return out;
}

// logits [n*l]: cosine of the projected rows over the clamped temperature.
// xv [n*c] through pv [c*e] + bv, xt [l*d] through pt [d*e] + bt; rows are
// normalized with the same 1e-12 floor the graph path uses.
inline std::vector<double> cosine_logits_scalar(std::span<const double> xv, int64_t n, int64_t c,
                                                std::span<const double> xt, int64_t l, int64_t d,
                                                std::span<const double> pv,
                                                std::span<const double> bv,
                                                std::span<const double> pt,
                                                std::span<const double> bt, int64_t e,
                                                double tau) {
    auto project = [&](std::span<const double> x, int64_t rows, int64_t in,
                       std::span<const double> w, std::span<const double> b) {
        auto y = linear_scalar(x, rows, in, w, b, e);
        for (int64_t r = 0; r < rows; ++r) {
            double s = 0;
            for (int64_t j = 0; j < e; ++j) s += y[size_t(r * e + j)] * y[size_t(r * e + j)];
            double inv = 1.0 / std::sqrt(s + 1e-12);
            for (int64_t j = 0; j < e; ++j) y[size_t(r * e + j)] *= inv;
        }
        return y;
    };
    auto vn = project(xv, n, c, pv, bv);
    auto tn = project(xt, l, d, pt, bt);
    double t = std::max(tau, 1e-3);
    std::vector<double> out(size_t(n * l));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < l; ++j) {
            double s = 0;
            for (int64_t q = 0; q < e; ++q) s += vn[size_t(i * e + q)] * tn[size_t(j * e + q)];
            out[size_t(i * l + j)] = s / t;
        }
    return out;
}

namespace detail {

inline void brute_rec(const std::vector<double>& cost, int64_t n, int64_t m, int64_t r,
                      int64_t quota, std::vector<char>& used, std::vector<int64_t>& cur,
                      double acc, double& best, std::vector<int64_t>& best_cols) {
    if (n - r < quota) return;  // not enough rows left to fill the quota
    if (r == n) {
        if (quota != 0) return;
        bool better = acc < best;
        if (!better && acc == best) {
            for (int64_t i = 0; i < n; ++i) {
                int64_t a = cur[size_t(i)] < 0 ? std::numeric_limits<int64_t>::max() : cur[size_t(i)];
                int64_t b = best_cols[size_t(i)] < 0 ? std::numeric_limits<int64_t>::max()
                                                     : best_cols[size_t(i)];
                if (a != b) {
                    better = a < b;
                    break;
                }
            }
        }
        if (better) {
            best = acc;
            best_cols = cur;
        }
        return;
    }
    for (int64_t c = 0; c < m; ++c) {
        if (used[size_t(c)] || quota == 0) continue;
        used[size_t(c)] = 1;
        cur[size_t(r)] = c;
        brute_rec(cost, n, m, r + 1, quota - 1, used, cur, acc + cost[size_t(r * m + c)], best,
                  best_cols);
        used[size_t(c)] = 0;
    }
    cur[size_t(r)] = -1;
    brute_rec(cost, n, m, r + 1, quota, used, cur, acc, best, best_cols);
}

}  // namespace detail

// Exhaustive min-cost assignment of min(n,m) pairs; ties resolved to the
// lexicographically smallest row->col map (unmatched rows compare last).
inline std::pair<double, std::vector<std::pair<int64_t, int64_t>>> assignment_brute(
    const std::vector<double>& cost, int64_t n, int64_t m) {
    std::vector<char> used(size_t(m), 0);
    std::vector<int64_t> cur(size_t(n), -1), best_cols(size_t(n), -1);
    double best = std::numeric_limits<double>::infinity();
    detail::brute_rec(cost, n, m, 0, std::min(n, m), used, cur, 0.0, best, best_cols);
    std::vector<std::pair<int64_t, int64_t>> pairs;
    for (int64_t r = 0; r < n; ++r)
        if (best_cols[size_t(r)] >= 0) pairs.emplace_back(r, best_cols[size_t(r)]);
    return {best, pairs};
}

// one sigmoid-focal term; matches the graph path's 1e-12 floors
inline double focal_scalar(double logit, bool positive, double alpha, double gamma) {
    double xt = positive ? logit : -logit;
    double pt = 1.0 / (1.0 + std::exp(-xt));
    double om = 1.0 / (1.0 + std::exp(xt));
    double at = positive ? alpha : 1.0 - alpha;
    return -at * std::exp(gamma * std::log(std::max(om, 1e-12))) * std::log(std::max(pt, 1e-12));
}

// one soft-target binary cross-entropy term
inline double bce_scalar(double logit, double target) {
    double lp = std::log(std::max(1.0 / (1.0 + std::exp(-logit)), 1e-12));
    double ln = std::log(std::max(1.0 / (1.0 + std::exp(logit)), 1e-12));
    return -(target * lp + (1.0 - target) * ln);
}

}  // namespace tmg::ref
