#pragma once

#include <array>
#include <cmath>

#include "common.hpp"

namespace tmg::geo {

struct Vec3 : std::array<double, 3> {};
struct Mat3 : std::array<double, 9> {};  // row-major

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }

inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }

inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

inline Mat3 mat3_identity() { return {1, 0, 0, 0, 1, 0, 0, 0, 1}; }

inline Vec3 mul(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

inline Mat3 mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a[3 * i + k] * b[3 * k + j];
            c[3 * i + j] = s;
        }
    return c;
}

inline Mat3 transpose(const Mat3& m) {
    return {m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]};
}

// Rows of m are orthonormal, so the transpose is the inverse.
inline Vec3 mul_t(const Mat3& m, const Vec3& v) {
    return {m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
            m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
            m[2] * v[0] + m[5] * v[1] + m[8] * v[2]};
}

inline double det(const Mat3& m) {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

inline Mat3 rot_x(double a) {
    double c = std::cos(a), s = std::sin(a);
    return {1, 0, 0, 0, c, -s, 0, s, c};
}

inline Mat3 rot_y(double a) {
    double c = std::cos(a), s = std::sin(a);
    return {c, 0, s, 0, 1, 0, -s, 0, c};
}

inline Mat3 rot_z(double a) {
    double c = std::cos(a), s = std::sin(a);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

// Intrinsic Z-X-Y rotation: R = Rz(alpha) * Rx(beta) * Ry(gamma), expanded.
inline Mat3 euler_zxy(double alpha, double beta, double gamma) {
    double ca = std::cos(alpha), sa = std::sin(alpha);
    double cb = std::cos(beta), sb = std::sin(beta);
    double cg = std::cos(gamma), sg = std::sin(gamma);
    return {ca * cg - sa * sb * sg, -sa * cb, ca * sg + sa * sb * cg,
            sa * cg + ca * sb * sg, ca * cb,  sa * sg - ca * sb * cg,
            -cb * sg,               sb,       cb * cg};
}

// Recover (alpha, beta, gamma) with R = Rz(alpha)*Rx(beta)*Ry(gamma).
// At the gimbal-lock singularity (|cos beta| ~ 0) only alpha±gamma is
// determined; gamma is pinned to 0 there.
inline Vec3 euler_zxy_from_matrix(const Mat3& m) {
    double sb = std::clamp(m[7], -1.0, 1.0);
    double beta = std::asin(sb);
    if (std::abs(sb) > 1.0 - 1e-9) {
        double a = std::atan2(m[3], m[0]);  // alpha+gamma (beta=+pi/2) or alpha-gamma (-pi/2)
        return {a, beta, 0.0};
    }
    double alpha = std::atan2(-m[1], m[4]);
    double gamma = std::atan2(-m[6], m[8]);
    return {alpha, beta, gamma};
}

// Wrap to (-pi, pi]; -pi maps to +pi.
inline double wrap_pi(double a) {
    constexpr double pi = 3.14159265358979323846;
    double r = std::fmod(a + pi, 2.0 * pi);
    if (r <= 0.0) r += 2.0 * pi;
    return r - pi;
}

inline bool is_rotation(const Mat3& m, double tol = 1e-5) {
    Mat3 g = mul(m, transpose(m));
    Mat3 id = mat3_identity();
    for (int i = 0; i < 9; ++i)
        if (std::abs(g[i] - id[i]) > tol) return false;
    return std::abs(det(m) - 1.0) <= tol;
}

}  // namespace tmg::geo
