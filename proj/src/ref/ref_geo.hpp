#pragma once

// Independent scalar formulations of the geometry operations, used as test
// oracles. They deliberately take different routes: homogeneous matrices for
// the camera paths, explicit matrix products for box rotation, and plain
// Monte Carlo for overlap volumes.

#include "geo/box.hpp"
#include "geo/camera.hpp"
#include "rng.hpp"

namespace tmg::ref {

// Camera -> world via the 4x4 inverse extrinsic [R^T, -R^T t; 0 1].
inline geo::Vec3 unproject_pixel(const geo::CameraView& view, int64_t u, int64_t v, double d) {
    geo::Mat3 rt = geo::transpose(view.R);
    geo::Vec3 shift = geo::mul(rt, view.t);
    double m[4][4] = {{rt[0], rt[1], rt[2], -shift[0]},
                      {rt[3], rt[4], rt[5], -shift[1]},
                      {rt[6], rt[7], rt[8], -shift[2]},
                      {0, 0, 0, 1}};
    double cam[4] = {(double(u) - view.cx) / view.fx * d, (double(v) - view.cy) / view.fy * d, d, 1};
    geo::Vec3 world{};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) world[r] += m[r][c] * cam[c];
    return world;
}

// World -> pixel via the 3x4 projection P = K [R | t].
inline geo::ProjectedPoint project_point(const geo::CameraView& view, const geo::Vec3& p) {
    double k[3][3] = {{view.fx, 0, view.cx}, {0, view.fy, view.cy}, {0, 0, 1}};
    double rt[3][4] = {{view.R[0], view.R[1], view.R[2], view.t[0]},
                       {view.R[3], view.R[4], view.R[5], view.t[1]},
                       {view.R[6], view.R[7], view.R[8], view.t[2]}};
    double proj[3][4] = {};
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c)
            for (int i = 0; i < 3; ++i) proj[r][c] += k[r][i] * rt[i][c];
    double h[3] = {};
    for (int r = 0; r < 3; ++r)
        h[r] = proj[r][0] * p[0] + proj[r][1] * p[1] + proj[r][2] * p[2] + proj[r][3];
    geo::ProjectedPoint out;
    out.z = h[2];
    if (h[2] <= view.near) return out;
    out.u = h[0] / h[2];
    out.v = h[1] / h[2];
    out.visible = out.u >= 0 && out.u <= double(view.width - 1) && out.v >= 0 &&
                  out.v <= double(view.height - 1);
    return out;
}

// Corners from the explicit product Rz * Rx * Ry of three separately built
// rotation matrices (the main path uses the expanded nine-term form).
inline std::array<geo::Vec3, 8> box_corners_composed(const geo::OrientedBox9& b) {
    geo::Mat3 r = geo::mul(geo::rot_z(b.angles[0]), geo::mul(geo::rot_x(b.angles[1]), geo::rot_y(b.angles[2])));
    std::array<geo::Vec3, 8> out;
    for (int i = 0; i < 8; ++i) {
        geo::Vec3 local{(i & 1 ? 0.5 : -0.5) * b.size[0], (i & 2 ? 0.5 : -0.5) * b.size[1],
                        (i & 4 ? 0.5 : -0.5) * b.size[2]};
        out[i] = b.center + geo::mul(r, local);
    }
    return out;
}

// Plain Monte Carlo IoU: uniform points in box a, membership in b tested
// against b's axis directions (columns of its rotation).
inline double iou9_mc(const geo::OrientedBox9& a, const geo::OrientedBox9& b, int64_t samples,
                      uint64_t seed) {
    geo::Mat3 ra = geo::box_rotation(a), rb = geo::box_rotation(b);
    geo::Vec3 bx{rb[0], rb[3], rb[6]}, by{rb[1], rb[4], rb[7]}, bz{rb[2], rb[5], rb[8]};
    Rng rng(seed);
    int64_t hits = 0;
    for (int64_t i = 0; i < samples; ++i) {
        geo::Vec3 local{(rng.uniform() - 0.5) * a.size[0], (rng.uniform() - 0.5) * a.size[1],
                        (rng.uniform() - 0.5) * a.size[2]};
        geo::Vec3 d = a.center + geo::mul(ra, local) - b.center;
        if (std::abs(geo::dot(d, bx)) <= 0.5 * b.size[0] && std::abs(geo::dot(d, by)) <= 0.5 * b.size[1] &&
            std::abs(geo::dot(d, bz)) <= 0.5 * b.size[2])
            ++hits;
    }
    double va = a.size[0] * a.size[1] * a.size[2];
    double vb = b.size[0] * b.size[1] * b.size[2];
    double inter = va * double(hits) / double(samples);
    return inter / (va + vb - inter);
}

}  // namespace tmg::ref
