#pragma once

// Loop-level oracles for the tokenizer and adapter paths.

#include <limits>
#include <span>
#include <vector>

#include "geo/linalg.hpp"

namespace tmg::ref {

// Farthest-point sampling where every step rescans all candidates against the
// whole selected set (no cached min-distance array).
inline std::vector<int64_t> fps_rescan(const std::vector<geo::Vec3>& pts, int64_t m, int64_t start) {
    std::vector<int64_t> sel{start};
    while (int64_t(sel.size()) < m) {
        int64_t arg = -1;
        double far = -1.0;
        for (int64_t i = 0; i < int64_t(pts.size()); ++i) {
            double near = std::numeric_limits<double>::infinity();
            for (int64_t s : sel) {
                geo::Vec3 d = pts[size_t(i)] - pts[size_t(s)];
                near = std::min(near, geo::dot(d, d));
            }
            if (near > far) {
                far = near;
                arg = i;
            }
        }
        sel.push_back(arg);
    }
    return sel;
}

inline double min_pairwise_dist(const std::vector<geo::Vec3>& pts, const std::vector<int64_t>& idx) {
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < idx.size(); ++i)
        for (size_t j = i + 1; j < idx.size(); ++j) {
            geo::Vec3 d = pts[size_t(idx[i])] - pts[size_t(idx[j])];
            best = std::min(best, geo::dot(d, d));
        }
    return std::sqrt(best);
}

// Shared two-layer MLP + max-pool over each group, all scalar loops.
// feats [M*K*C], w1 [C*D] row-major (in x out), w2 [D*D].
inline std::vector<double> group_mlp_maxpool(std::span<const double> feats, int64_t m, int64_t k,
                                             int64_t c, int64_t d, std::span<const double> w1,
                                             std::span<const double> b1, std::span<const double> w2,
                                             std::span<const double> b2, double (*act)(double)) {
    std::vector<double> out(size_t(m * d), -std::numeric_limits<double>::infinity());
    for (int64_t g = 0; g < m; ++g)
        for (int64_t j = 0; j < k; ++j) {
            std::vector<double> h(static_cast<size_t>(d));
            for (int64_t o = 0; o < d; ++o) {
                double s = b1[size_t(o)];
                for (int64_t i = 0; i < c; ++i) s += feats[size_t((g * k + j) * c + i)] * w1[size_t(i * d + o)];
                h[size_t(o)] = act(s);
            }
            for (int64_t o = 0; o < d; ++o) {
                double s = b2[size_t(o)];
                for (int64_t i = 0; i < d; ++i) s += h[size_t(i)] * w2[size_t(i * d + o)];
                out[size_t(g * d + o)] = std::max(out[size_t(g * d + o)], s);
            }
        }
    return out;
}

// Bottleneck residual adapter, scalar loops: y = x + W2 act(W1 x + b1) + b2.
inline std::vector<double> adapter_scalar(std::span<const double> x, int64_t rows, int64_t d,
                                          int64_t bn, std::span<const double> w1,
                                          std::span<const double> b1, std::span<const double> w2,
                                          std::span<const double> b2, double (*act)(double)) {
    std::vector<double> y(x.size());
    for (int64_t r = 0; r < rows; ++r) {
        std::vector<double> h(static_cast<size_t>(bn));
        for (int64_t o = 0; o < bn; ++o) {
            double s = b1[size_t(o)];
            for (int64_t i = 0; i < d; ++i) s += x[size_t(r * d + i)] * w1[size_t(i * bn + o)];
            h[size_t(o)] = act(s);
        }
        for (int64_t o = 0; o < d; ++o) {
            double s = b2[size_t(o)];
            for (int64_t i = 0; i < bn; ++i) s += h[size_t(i)] * w2[size_t(i * d + o)];
            y[size_t(r * d + o)] = x[size_t(r * d + o)] + s;
        }
    }
    return y;
}

}  // namespace tmg::ref
