#pragma once

// Rotation / orientation / pose interpolation math. Everything here is double
// precision: the orthonormality checks downstream want 1e-9, which single
// precision cannot deliver.

#include <cmath>
#include <string>
#include <vector>

#include "pedgen/common.hpp"

namespace pedgen::geo {

inline constexpr double kPi = 3.14159265358979323846;
// below this dot-product gap from 1.0 the slerp denominator is unusable
inline constexpr double kSlerpParallel = 1e-7;

struct Vec3 {
    double x = 0, y = 0, z = 0;

    double norm() const { return std::sqrt(x * x + y * y + z * z); }
    bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
inline Vec3 operator*(double s, const Vec3& v) { return {s * v.x, s * v.y, s * v.z}; }
inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

struct Quat {
    double w = 1, x = 0, y = 0, z = 0;

    double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
    Quat normalized() const {
        double n = norm();
        if (n < 1e-300) throw InvalidArgument("quaternion: zero norm");
        return {w / n, x / n, y / n, z / n};
    }
};

inline double dot(const Quat& a, const Quat& b) {
    return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

// row-major 3x3
struct Mat3 {
    double m[9] = {1, 0, 0, 0, 1, 0, 0, 0, 1};

    double& at(int r, int c) { return m[r * 3 + c]; }
    double at(int r, int c) const { return m[r * 3 + c]; }

    Vec3 apply(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z, m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }
};

inline Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            double s = 0;
            for (int k = 0; k < 3; ++k) s += a.at(i, k) * b.at(k, j);
            r.at(i, j) = s;
        }
    return r;
}

// R = I + sinθ [n]x + (1-cosθ) [n]x^2, θ = |a|, n = a/θ; θ = 0 gives exactly I.
inline Mat3 rodrigues(const Vec3& a) {
    if (!a.finite()) throw InvalidArgument("rodrigues: non-finite input");
    double theta = a.norm();
    if (theta == 0.0) return Mat3{};
    double nx = a.x / theta, ny = a.y / theta, nz = a.z / theta;
    double s = std::sin(theta);
    double hs = std::sin(0.5 * theta);
    double c1 = 2.0 * hs * hs;  // 1 - cosθ without cancellation
    Mat3 r;
    r.m[0] = 1.0 + c1 * (nx * nx - 1.0);
    r.m[1] = -s * nz + c1 * nx * ny;
    r.m[2] = s * ny + c1 * nx * nz;
    r.m[3] = s * nz + c1 * nx * ny;
    r.m[4] = 1.0 + c1 * (ny * ny - 1.0);
    r.m[5] = -s * nx + c1 * ny * nz;
    r.m[6] = -s * ny + c1 * nx * nz;
    r.m[7] = s * nx + c1 * ny * nz;
    r.m[8] = 1.0 + c1 * (nz * nz - 1.0);
    return r;
}

// third column of rodrigues(root): where the rotated +z (the body's facing
// direction) ends up
inline Vec3 orientation_vector(const Vec3& root) {
    Mat3 r = rodrigues(root);
    return {r.m[2], r.m[5], r.m[8]};
}

inline Quat axis_angle_to_quat(const Vec3& a) {
    if (!a.finite()) throw InvalidArgument("axis_angle_to_quat: non-finite input");
    double theta = a.norm();
    if (theta == 0.0) return Quat{1, 0, 0, 0};
    double h = 0.5 * theta;
    double k = std::sin(h) / theta;
    return {std::cos(h), k * a.x, k * a.y, k * a.z};
}

// canonicalizes to w >= 0 so round-trips are deterministic
inline Vec3 quat_to_axis_angle(const Quat& q_in) {
    Quat q = q_in.normalized();
    if (q.w < 0) q = {-q.w, -q.x, -q.y, -q.z};
    double vnorm = std::sqrt(q.x * q.x + q.y * q.y + q.z * q.z);
    if (vnorm < 1e-300) return Vec3{};
    double theta = 2.0 * std::atan2(vnorm, q.w);
    double k = theta / vnorm;
    return {k * q.x, k * q.y, k * q.z};
}

inline Quat slerp(const Quat& q1_in, const Quat& q2_in, double alpha) {
    if (alpha < 0.0 || alpha > 1.0) throw InvalidArgument("slerp: alpha outside [0,1]");
    Quat q1 = q1_in, q2 = q2_in;
    double d = dot(q1, q2);
    if (d < 0) {  // shortest path
        q2 = {-q2.w, -q2.x, -q2.y, -q2.z};
        d = -d;
    }
    if (d > 1.0 - kSlerpParallel) {
        // nearly parallel: nlerp, sinθ would be ~0
        Quat r{(1 - alpha) * q1.w + alpha * q2.w, (1 - alpha) * q1.x + alpha * q2.x,
               (1 - alpha) * q1.y + alpha * q2.y, (1 - alpha) * q1.z + alpha * q2.z};
        return r.normalized();
    }
    double theta = std::acos(std::min(1.0, std::max(-1.0, d)));
    double st = std::sin(theta);
    double s1 = std::sin((1.0 - alpha) * theta) / st;
    double s2 = std::sin(alpha * theta) / st;
    return {s1 * q1.w + s2 * q2.w, s1 * q1.x + s2 * q2.x, s1 * q1.y + s2 * q2.y,
            s1 * q1.z + s2 * q2.z};
}

struct PoseParams {
    Vec3 global_orient;             // axis-angle
    std::vector<double> body_pose;  // per-joint axis-angle triples
    std::vector<double> shape;
    Vec3 translation;
};

inline PoseParams interpolate_pose(const PoseParams& p1, const PoseParams& p2, double alpha) {
    if (p1.body_pose.size() != p2.body_pose.size() || p1.shape.size() != p2.shape.size())
        throw InvalidArgument("interpolate_pose: dimension mismatch");
    if (alpha == 0.0) return p1;
    if (alpha == 1.0) return p2;
    PoseParams out;
    Quat q = slerp(axis_angle_to_quat(p1.global_orient), axis_angle_to_quat(p2.global_orient),
                   alpha);
    out.global_orient = quat_to_axis_angle(q);
    out.body_pose.resize(p1.body_pose.size());
    for (size_t i = 0; i < p1.body_pose.size(); ++i)
        out.body_pose[i] = (1.0 - alpha) * p1.body_pose[i] + alpha * p2.body_pose[i];
    out.shape.resize(p1.shape.size());
    for (size_t i = 0; i < p1.shape.size(); ++i)
        out.shape[i] = (1.0 - alpha) * p1.shape[i] + alpha * p2.shape[i];
    out.translation = (1.0 - alpha) * p1.translation + alpha * p2.translation;
    return out;
}

inline std::vector<PoseParams> pose_sequence(const PoseParams& p_start, const PoseParams& p_end,
                                             int frames) {
    if (frames < 2) throw InvalidArgument("pose_sequence: frames must be >= 2");
    std::vector<PoseParams> seq;
    seq.reserve(size_t(frames));
    for (int k = 0; k < frames; ++k)
        seq.push_back(interpolate_pose(p_start, p_end, double(k) / double(frames - 1)));
    return seq;
}

inline double viewpoint_score(const Vec3& a, const Vec3& b) {
    if (!a.finite() || !b.finite()) throw InvalidArgument("viewpoint_score: non-finite input");
    return dot(a, b);
}

}  // namespace pedgen::geo
