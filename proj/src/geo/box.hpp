#pragma once

#include <cstdint>

#include "geo/linalg.hpp"

namespace tmg::geo {

// 9-DOF oriented box: center, size (l,w,h along local x,y,z), and intrinsic
// Z-X-Y Euler angles. Angles are stored wrapped to (-pi, pi].
struct OrientedBox9 {
    Vec3 center{0, 0, 0};
    Vec3 size{1, 1, 1};
    Vec3 angles{0, 0, 0};  // (alpha, beta, gamma)
};

inline OrientedBox9 make_box(const Vec3& center, const Vec3& size, const Vec3& angles) {
    for (int i = 0; i < 3; ++i) {
        check(std::isfinite(center[i]) && std::isfinite(size[i]) && std::isfinite(angles[i]),
              "box: non-finite field");
        check(size[i] > 0, "box: size must be strictly positive");
    }
    return {center, size, {wrap_pi(angles[0]), wrap_pi(angles[1]), wrap_pi(angles[2])}};
}

inline Mat3 box_rotation(const OrientedBox9& b) { return euler_zxy(b.angles[0], b.angles[1], b.angles[2]); }

// Corner i uses sign (-,+)[bit] of the half extent per axis: bit0 -> x,
// bit1 -> y, bit2 -> z. Corner 0 is (-l/2,-w/2,-h/2) locally, corner 7 all +.
inline std::array<Vec3, 8> box_corners(const OrientedBox9& b) {
    Mat3 r = box_rotation(b);
    std::array<Vec3, 8> out;
    for (int i = 0; i < 8; ++i) {
        Vec3 local{(i & 1 ? 0.5 : -0.5) * b.size[0], (i & 2 ? 0.5 : -0.5) * b.size[1],
                   (i & 4 ? 0.5 : -0.5) * b.size[2]};
        out[i] = b.center + mul(r, local);
    }
    return out;
}

inline bool box_contains(const OrientedBox9& b, const Mat3& r, const Vec3& p) {
    Vec3 q = mul_t(r, p - b.center);
    return std::abs(q[0]) <= 0.5 * b.size[0] && std::abs(q[1]) <= 0.5 * b.size[1] &&
           std::abs(q[2]) <= 0.5 * b.size[2];
}

inline bool box_contains(const OrientedBox9& b, const Vec3& p) {
    return box_contains(b, box_rotation(b), p);
}

// Rigid transform p -> q p + shift applied to the box (q must be a rotation).
inline OrientedBox9 transformed(const OrientedBox9& b, const Mat3& q, const Vec3& shift) {
    Mat3 r = mul(q, box_rotation(b));
    Vec3 e = euler_zxy_from_matrix(r);
    return make_box(mul(q, b.center) + shift, b.size, e);
}

namespace detail {

// Van der Corput radical inverse; bases 2,3,5 give the 3D Halton sequence.
inline double radical_inverse(uint64_t i, uint64_t base) {
    double inv = 1.0 / double(base), f = inv, r = 0.0;
    while (i) {
        r += f * double(i % base);
        f *= inv;
        i /= base;
    }
    return r;
}

}  // namespace detail

// Overlap of two oriented boxes. Identical boxes short-circuit to 1. When both
// rotations are exactly zero the axis-aligned overlap is computed in closed
// form. Otherwise the intersection volume is estimated with a low-discrepancy
// Halton point set filling box a; the seed offsets the sequence start, so a
// given (a, b, samples, seed) always produces the same value. Disjoint
// bounding spheres return 0 without sampling.
inline double iou9(const OrientedBox9& a, const OrientedBox9& b, int64_t samples = 16384,
                   uint64_t seed = 0) {
    check(samples >= 1024, "iou9: need at least 1024 samples");
    bool same = true;
    for (int i = 0; i < 3 && same; ++i)
        same = a.center[i] == b.center[i] && a.size[i] == b.size[i] && a.angles[i] == b.angles[i];
    if (same) return 1.0;

    double va = a.size[0] * a.size[1] * a.size[2];
    double vb = b.size[0] * b.size[1] * b.size[2];

    double ra = 0.5 * norm(a.size), rb = 0.5 * norm(b.size);
    if (norm(a.center - b.center) > ra + rb) return 0.0;

    double inter;
    bool axis_aligned = true;
    for (int i = 0; i < 3; ++i)
        axis_aligned = axis_aligned && a.angles[i] == 0.0 && b.angles[i] == 0.0;
    if (axis_aligned) {
        inter = 1.0;
        for (int i = 0; i < 3; ++i) {
            double lo = std::max(a.center[i] - 0.5 * a.size[i], b.center[i] - 0.5 * b.size[i]);
            double hi = std::min(a.center[i] + 0.5 * a.size[i], b.center[i] + 0.5 * b.size[i]);
            inter *= std::max(0.0, hi - lo);
        }
    } else {
        Mat3 rot_a = box_rotation(a), rot_b = box_rotation(b);
        uint64_t start = 1 + seed % 1000003;
        int64_t hits = 0;
        for (int64_t i = 0; i < samples; ++i) {
            uint64_t k = start + uint64_t(i);
            Vec3 local{(detail::radical_inverse(k, 2) - 0.5) * a.size[0],
                       (detail::radical_inverse(k, 3) - 0.5) * a.size[1],
                       (detail::radical_inverse(k, 5) - 0.5) * a.size[2]};
            if (box_contains(b, rot_b, a.center + mul(rot_a, local))) ++hits;
        }
        inter = va * double(hits) / double(samples);
    }
    double u = va + vb - inter;
    return std::clamp(inter / u, 0.0, 1.0);
}

}  // namespace tmg::geo
