#pragma once

// Slow scalar references for the fusion stage: a densify-then-dense-conv
// oracle for the sparse convolutions, straight-loop implementations of the
// gating and sampling math. Everything indexes plain row-major buffers.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "common.hpp"
#include "geo/camera.hpp"
#include "geo/linalg.hpp"

namespace tmg::ref {

// Dense 3^3 convolution over the bounding grid of the occupied cells, sampled
// back at the requested output coordinates. Offsets enumerate kx outer, ky,
// kz inner over {-1,0,1}; weight rows are offset*cin + ci.
inline std::vector<double> dense_conv3(const std::vector<std::array<int32_t, 3>>& in_coords,
                                       std::span<const double> in_feats, int64_t cin,
                                       const std::vector<std::array<int32_t, 3>>& out_coords,
                                       std::span<const double> w, std::span<const double> b,
                                       int64_t cout, int64_t stride) {
    check(in_feats.size() == in_coords.size() * static_cast<size_t>(cin), "dense_conv3: feat size");
    check(w.size() == static_cast<size_t>(27 * cin * cout), "dense_conv3: weight size");
    std::array<int32_t, 3> lo{INT32_MAX, INT32_MAX, INT32_MAX}, hi{INT32_MIN, INT32_MIN, INT32_MIN};
    for (const auto& c : in_coords)
        for (int a = 0; a < 3; ++a) {
            lo[static_cast<size_t>(a)] = std::min(lo[static_cast<size_t>(a)], c[static_cast<size_t>(a)]);
            hi[static_cast<size_t>(a)] = std::max(hi[static_cast<size_t>(a)], c[static_cast<size_t>(a)]);
        }
    int64_t dx = hi[0] - lo[0] + 1, dy = hi[1] - lo[1] + 1, dz = hi[2] - lo[2] + 1;
    std::vector<double> dense(static_cast<size_t>(dx * dy * dz * cin), 0.0);
    for (size_t i = 0; i < in_coords.size(); ++i) {
        const auto& c = in_coords[i];
        int64_t cell = ((c[0] - lo[0]) * dy + (c[1] - lo[1])) * dz + (c[2] - lo[2]);
        for (int64_t ci = 0; ci < cin; ++ci)
            dense[static_cast<size_t>(cell * cin + ci)] = in_feats[i * static_cast<size_t>(cin) + static_cast<size_t>(ci)];
    }
    auto at = [&](int64_t x, int64_t y, int64_t z, int64_t ci) -> double {
        x -= lo[0], y -= lo[1], z -= lo[2];
        if (x < 0 || y < 0 || z < 0 || x >= dx || y >= dy || z >= dz) return 0.0;
        return dense[static_cast<size_t>(((x * dy + y) * dz + z) * cin + ci)];
    };
    std::vector<double> out(out_coords.size() * static_cast<size_t>(cout), 0.0);
    for (size_t i = 0; i < out_coords.size(); ++i) {
        const auto& o = out_coords[i];
        for (int64_t co = 0; co < cout; ++co) {
            double acc = b[static_cast<size_t>(co)];
            int64_t koff = 0;
            for (int32_t kx = -1; kx <= 1; ++kx)
                for (int32_t ky = -1; ky <= 1; ++ky)
                    for (int32_t kz = -1; kz <= 1; ++kz, ++koff)
                        for (int64_t ci = 0; ci < cin; ++ci)
                            acc += w[static_cast<size_t>((koff * cin + ci) * cout + co)] *
                                   at(o[0] * stride + kx, o[1] * stride + ky, o[2] * stride + kz, ci);
            out[i * static_cast<size_t>(cout) + static_cast<size_t>(co)] = acc;
        }
    }
    return out;
}

// 3-nearest inverse-distance feature blend at each query position.
inline std::vector<double> interp3_scalar(std::span<const double> feats, int64_t m, int64_t d,
                                          const std::vector<geo::Vec3>& centers,
                                          const std::vector<geo::Vec3>& queries) {
    check(static_cast<int64_t>(centers.size()) == m && m >= 3, "interp3: bad center count");
    std::vector<double> out(queries.size() * static_cast<size_t>(d), 0.0);
    for (size_t q = 0; q < queries.size(); ++q) {
        std::vector<std::pair<double, int64_t>> ds(static_cast<size_t>(m));
        for (int64_t j = 0; j < m; ++j)
            ds[static_cast<size_t>(j)] = {geo::norm(centers[static_cast<size_t>(j)] - queries[q]), j};
        std::sort(ds.begin(), ds.end());
        double inv[3], s = 0;
        for (int k = 0; k < 3; ++k) {
            inv[k] = 1.0 / std::max(ds[static_cast<size_t>(k)].first, 1e-8);
            s += inv[k];
        }
        for (int k = 0; k < 3; ++k)
            for (int64_t a = 0; a < d; ++a)
                out[q * static_cast<size_t>(d) + static_cast<size_t>(a)] +=
                    inv[k] / s * feats[static_cast<size_t>(ds[static_cast<size_t>(k)].second * d + a)];
    }
    return out;
}

// Pooled-descriptor sigmoid gating, step by step.
inline std::vector<double> apif_scalar(std::span<const double> f_s, std::span<const double> f_proj,
                                       int64_t n, int64_t c, std::span<const double> w1,
                                       std::span<const double> b1, std::span<const double> w2,
                                       std::span<const double> b2) {
    int64_t c2 = 2 * c, hid = static_cast<int64_t>(b1.size());
    std::vector<double> fc(static_cast<size_t>(n * c2));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c2; ++j)
            fc[static_cast<size_t>(i * c2 + j)] = j < c ? f_s[static_cast<size_t>(i * c + j)]
                                                        : f_proj[static_cast<size_t>(i * c + (j - c))];
    std::vector<double> mx(static_cast<size_t>(c2), -1e300), av(static_cast<size_t>(c2), 0.0);
    for (int64_t j = 0; j < c2; ++j) {
        for (int64_t i = 0; i < n; ++i) {
            mx[static_cast<size_t>(j)] = std::max(mx[static_cast<size_t>(j)], fc[static_cast<size_t>(i * c2 + j)]);
            av[static_cast<size_t>(j)] += fc[static_cast<size_t>(i * c2 + j)];
        }
        av[static_cast<size_t>(j)] /= static_cast<double>(n);
    }
    auto mlp = [&](const std::vector<double>& x) {
        std::vector<double> h(static_cast<size_t>(hid), 0.0), o(static_cast<size_t>(c), 0.0);
        for (int64_t t = 0; t < hid; ++t) {
            double a = b1[static_cast<size_t>(t)];
            for (int64_t j = 0; j < c2; ++j) a += x[static_cast<size_t>(j)] * w1[static_cast<size_t>(j * hid + t)];
            h[static_cast<size_t>(t)] = std::max(a, 0.0);
        }
        for (int64_t u = 0; u < c; ++u) {
            double a = b2[static_cast<size_t>(u)];
            for (int64_t t = 0; t < hid; ++t) a += h[static_cast<size_t>(t)] * w2[static_cast<size_t>(t * c + u)];
            o[static_cast<size_t>(u)] = a;
        }
        return o;
    };
    auto gm = mlp(mx), ga = mlp(av);
    std::vector<double> out(static_cast<size_t>(n * c2));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c2; ++j) {
            double logit = j < c ? gm[static_cast<size_t>(j)] : ga[static_cast<size_t>(j - c)];
            out[static_cast<size_t>(i * c2 + j)] =
                fc[static_cast<size_t>(i * c2 + j)] / (1.0 + std::exp(-logit));
        }
    return out;
}

// Per-voxel projection + bilinear sampling against the unflattened [V,C,H,W]
// map, averaging over the views that see the point.
inline std::vector<double> project_sample_scalar(const std::vector<geo::Vec3>& centers,
                                                 std::span<const double> map, int64_t nv,
                                                 int64_t c, int64_t h, int64_t w,
                                                 const std::vector<geo::CameraView>& views,
                                                 double scale) {
    check(static_cast<int64_t>(views.size()) == nv, "project_sample_scalar: view count");
    std::vector<double> out(centers.size() * static_cast<size_t>(c), 0.0);
    for (size_t i = 0; i < centers.size(); ++i) {
        const geo::Vec3& p = centers[i];
        std::vector<double> acc(static_cast<size_t>(c), 0.0);
        int64_t nvis = 0;
        for (int64_t v = 0; v < nv; ++v) {
            const auto& cam = views[static_cast<size_t>(v)];
            geo::Vec3 pc = geo::mul(cam.R, p) + cam.t;
            if (pc[2] <= cam.near) continue;
            double u = cam.fx * pc[0] / pc[2] + cam.cx, vv = cam.fy * pc[1] / pc[2] + cam.cy;
            if (u < 0 || u > static_cast<double>(cam.width - 1) || vv < 0 ||
                vv > static_cast<double>(cam.height - 1))
                continue;
            ++nvis;
            double mu = std::clamp((u + 0.5) / scale - 0.5, 0.0, static_cast<double>(w - 1));
            double mv = std::clamp((vv + 0.5) / scale - 0.5, 0.0, static_cast<double>(h - 1));
            int64_t x0 = static_cast<int64_t>(std::floor(mu)), y0 = static_cast<int64_t>(std::floor(mv));
            int64_t x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
            double fx = mu - static_cast<double>(x0), fy = mv - static_cast<double>(y0);
            for (int64_t ch = 0; ch < c; ++ch) {
                auto px = [&](int64_t y, int64_t x) {
                    return map[static_cast<size_t>(((v * c + ch) * h + y) * w + x)];
                };
                acc[static_cast<size_t>(ch)] += (1 - fx) * (1 - fy) * px(y0, x0) + fx * (1 - fy) * px(y0, x1) +
                                                (1 - fx) * fy * px(y1, x0) + fx * fy * px(y1, x1);
            }
        }
        if (nvis > 0)
            for (int64_t ch = 0; ch < c; ++ch)
                out[i * static_cast<size_t>(c) + static_cast<size_t>(ch)] =
                    acc[static_cast<size_t>(ch)] / static_cast<double>(nvis);
    }
    return out;
}

}  // namespace tmg::ref
