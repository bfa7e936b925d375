#pragma once

#include <cstdint>
#include <vector>

#include "geo/linalg.hpp"

namespace tmg::geo {

struct PointCloud {
    std::vector<Vec3> positions;
    std::vector<std::array<float, 3>> colors;  // empty or one entry per position
};

// Pinhole camera: +x right, +y down, +z forward. R and t map world to camera
// coordinates (p_cam = R p + t); pixels follow u = fx x/z + cx, v = fy y/z + cy.
struct CameraView {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    Mat3 R = mat3_identity();
    Vec3 t{0, 0, 0};
    int64_t width = 0, height = 0;
    std::vector<float> rgb;    // height*width*3, values in [0,1]
    std::vector<float> depth;  // height*width meters, 0 = invalid
    double near = 0.05;

    void check_valid() const {
        check(fx != 0 && fy != 0, "camera: zero focal length");
        check(width > 0 && height > 0, "camera: empty image");
        check(near > 0, "camera: near plane must be positive");
        check(is_rotation(R), "camera: extrinsic rotation is not orthonormal");
        check(depth.size() == size_t(width * height), "camera: depth size mismatch");
        check(rgb.empty() || rgb.size() == size_t(width * height * 3), "camera: rgb size mismatch");
    }
};

struct ProjectedPoint {
    double u = 0, v = 0;
    double z = 0;  // camera-frame depth
    bool visible = false;
};

// Lift every valid-depth pixel on the stride lattice to a world-space point.
// Camera point for pixel (u,v) at depth d is ((u-cx)/fx*d, (v-cy)/fy*d, d);
// world = R^T (p_cam - t). Carries pixel color when rgb is present.
inline PointCloud unproject(const CameraView& view, int64_t stride = 1) {
    view.check_valid();
    check(stride >= 1, "unproject: stride must be >= 1");
    PointCloud pc;
    bool with_color = !view.rgb.empty();
    for (int64_t v = 0; v < view.height; v += stride)
        for (int64_t u = 0; u < view.width; u += stride) {
            double d = view.depth[v * view.width + u];
            check(d >= 0 && std::isfinite(d), "unproject: negative or non-finite depth");
            if (d == 0) continue;
            Vec3 cam{(double(u) - view.cx) / view.fx * d, (double(v) - view.cy) / view.fy * d, d};
            pc.positions.push_back(mul_t(view.R, cam - view.t));
            if (with_color) {
                const float* px = &view.rgb[(v * view.width + u) * 3];
                pc.colors.push_back({px[0], px[1], px[2]});
            }
        }
    return pc;
}

// A point is visible iff it is in front of the near plane and its pixel lands
// inside [0, W-1] x [0, H-1]. (u,v) of invisible points must not be read.
// Out-of-bounds points are masked, never clamped.
inline std::vector<ProjectedPoint> project(const std::vector<Vec3>& points, const CameraView& view) {
    view.check_valid();
    std::vector<ProjectedPoint> out(points.size());
    for (size_t i = 0; i < points.size(); ++i) {
        Vec3 cam = mul(view.R, points[i]) + view.t;
        ProjectedPoint& p = out[i];
        p.z = cam[2];
        if (cam[2] <= view.near) continue;
        p.u = view.fx * cam[0] / cam[2] + view.cx;
        p.v = view.fy * cam[1] / cam[2] + view.cy;
        p.visible = p.u >= 0 && p.u <= double(view.width - 1) && p.v >= 0 && p.v <= double(view.height - 1);
    }
    return out;
}

}  // namespace tmg::geo
