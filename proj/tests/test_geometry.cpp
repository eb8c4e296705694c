#include <catch_amalgamated.hpp>

#include <cmath>

#include "pedgen/common.hpp"
#include "pedgen/geometry.hpp"

using namespace pedgen;
using namespace pedgen::geo;

namespace {

// Independent oracle: rotate v by unit quaternion q via q * (0,v) * conj(q).
// Shares no code with rodrigues(); used to cross-check matrix columns.
Vec3 quat_rotate(const Quat& q, const Vec3& v) {
    double w = q.w, x = q.x, y = q.y, z = q.z;
    // t = 2 * (qv x v)
    double tx = 2.0 * (y * v.z - z * v.y);
    double ty = 2.0 * (z * v.x - x * v.z);
    double tz = 2.0 * (x * v.y - y * v.x);
    return {v.x + w * tx + (y * tz - z * ty), v.y + w * ty + (z * tx - x * tz),
            v.z + w * tz + (x * ty - y * tx)};
}

Vec3 random_axis_angle(Rng& rng, double max_theta = 3.1) {
    // direction from normals, magnitude uniform
    Vec3 n{rng.normal(), rng.normal(), rng.normal()};
    double nn = n.norm();
    if (nn < 1e-6) return {0, 0, max_theta};
    double theta = rng.uniform(0.0, max_theta);
    return {theta * n.x / nn, theta * n.y / nn, theta * n.z / nn};
}

double max_abs_diff(const Mat3& a, const Mat3& b) {
    double m = 0;
    for (int i = 0; i < 9; ++i) m = std::max(m, std::abs(a.m[i] - b.m[i]));
    return m;
}

double det3(const Mat3& r) {
    return r.m[0] * (r.m[4] * r.m[8] - r.m[5] * r.m[7]) -
           r.m[1] * (r.m[3] * r.m[8] - r.m[5] * r.m[6]) +
           r.m[2] * (r.m[3] * r.m[7] - r.m[4] * r.m[6]);
}

double rotation_angle_between(const Quat& a, const Quat& b) {
    double d = std::abs(dot(a, b));
    return 2.0 * std::acos(std::min(1.0, d));
}

}  // namespace

TEST_CASE("rodrigues zero rotation is exactly identity") {
    Mat3 r = rodrigues({0, 0, 0});
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) REQUIRE(r.at(i, j) == (i == j ? 1.0 : 0.0));
}

TEST_CASE("rodrigues quarter turn about y maps +z to +x") {
    Mat3 r = rodrigues({0, kPi / 2, 0});
    Vec3 v = r.apply({0, 0, 1});
    REQUIRE(std::abs(v.x - 1.0) < 1e-12);
    REQUIRE(std::abs(v.y) < 1e-12);
    REQUIRE(std::abs(v.z) < 1e-12);
}

TEST_CASE("rodrigues rejects non-finite input") {
    REQUIRE_THROWS_AS(rodrigues({std::nan(""), 0, 0}), InvalidArgument);
    REQUIRE_THROWS_AS(rodrigues({0, std::numeric_limits<double>::infinity(), 0}), InvalidArgument);
}

TEST_CASE("rodrigues is orthonormal with unit determinant and matches quaternion oracle") {
    Rng rng(0x5eed001);
    for (int trial = 0; trial < 1000; ++trial) {
        Vec3 a = random_axis_angle(rng);
        Mat3 r = rodrigues(a);

        // R^T R = I within 1e-9
        Mat3 rt;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) rt.at(i, j) = r.at(j, i);
        Mat3 rtr = matmul(rt, r);
        Mat3 eye;
        REQUIRE(max_abs_diff(rtr, eye) < 1e-9);
        REQUIRE(std::abs(det3(r) - 1.0) < 1e-9);

        // columns = rotated basis vectors per the quaternion oracle
        Quat q = axis_angle_to_quat(a);
        Vec3 basis[3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
        for (int j = 0; j < 3; ++j) {
            Vec3 expect = quat_rotate(q, basis[j]);
            REQUIRE(std::abs(r.at(0, j) - expect.x) < 1e-9);
            REQUIRE(std::abs(r.at(1, j) - expect.y) < 1e-9);
            REQUIRE(std::abs(r.at(2, j) - expect.z) < 1e-9);
        }
    }
}

TEST_CASE("orientation_vector trivial cases") {
    Vec3 v0 = orientation_vector({0, 0, 0});
    REQUIRE(v0.x == 0.0);
    REQUIRE(v0.y == 0.0);
    REQUIRE(v0.z == 1.0);

    Vec3 v1 = orientation_vector({0, kPi / 2, 0});
    REQUIRE(std::abs(v1.x - 1.0) < 1e-12);
    REQUIRE(std::abs(v1.y) < 1e-12);
    REQUIRE(std::abs(v1.z) < 1e-12);
}

TEST_CASE("orientation_vector equals rotation applied to +z") {
    Rng rng(0x5eed002);
    for (int trial = 0; trial < 200; ++trial) {
        Vec3 a = random_axis_angle(rng);
        Vec3 v = orientation_vector(a);
        Vec3 expect = rodrigues(a).apply({0, 0, 1});
        REQUIRE(std::abs(v.x - expect.x) < 1e-15);
        REQUIRE(std::abs(v.y - expect.y) < 1e-15);
        REQUIRE(std::abs(v.z - expect.z) < 1e-15);
        REQUIRE(std::abs(v.norm() - 1.0) < 1e-9);
    }
}

TEST_CASE("axis-angle to quaternion trivial cases") {
    Quat q0 = axis_angle_to_quat({0, 0, 0});
    REQUIRE(q0.w == 1.0);
    REQUIRE(q0.x == 0.0);
    REQUIRE(q0.y == 0.0);
    REQUIRE(q0.z == 0.0);

    Quat q1 = axis_angle_to_quat({0, kPi / 2, 0});
    REQUIRE(std::abs(q1.w - std::cos(kPi / 4)) < 1e-15);
    REQUIRE(std::abs(q1.y - std::sin(kPi / 4)) < 1e-15);
    REQUIRE(std::abs(q1.x) < 1e-15);
    REQUIRE(std::abs(q1.z) < 1e-15);
}

TEST_CASE("quaternion round trip preserves the rotation") {
    Rng rng(0x5eed003);
    for (int trial = 0; trial < 1000; ++trial) {
        Vec3 a = random_axis_angle(rng);
        Quat q = axis_angle_to_quat(a);
        REQUIRE(std::abs(q.norm() - 1.0) < 1e-12);
        Vec3 back = quat_to_axis_angle(q);
        REQUIRE(max_abs_diff(rodrigues(a), rodrigues(back)) < 1e-9);
    }
}

TEST_CASE("quaternion extraction canonicalizes to w >= 0") {
    Rng rng(0x5eed004);
    for (int trial = 0; trial < 200; ++trial) {
        Vec3 a = random_axis_angle(rng);
        Quat q = axis_angle_to_quat(a);
        Quat neg{-q.w, -q.x, -q.y, -q.z};
        Vec3 b1 = quat_to_axis_angle(q);
        Vec3 b2 = quat_to_axis_angle(neg);
        REQUIRE(std::abs(b1.x - b2.x) < 1e-12);
        REQUIRE(std::abs(b1.y - b2.y) < 1e-12);
        REQUIRE(std::abs(b1.z - b2.z) < 1e-12);
    }
}

TEST_CASE("zero quaternion is rejected") {
    REQUIRE_THROWS_AS(quat_to_axis_angle({0, 0, 0, 0}), InvalidArgument);
}

TEST_CASE("slerp endpoints are exact") {
    Rng rng(0x5eed005);
    for (int trial = 0; trial < 100; ++trial) {
        Quat q1 = axis_angle_to_quat(random_axis_angle(rng));
        Quat q2 = axis_angle_to_quat(random_axis_angle(rng));
        Quat r0 = slerp(q1, q2, 0.0);
        REQUIRE(std::abs(r0.w - q1.w) < 1e-15);
        REQUIRE(std::abs(r0.x - q1.x) < 1e-15);
        REQUIRE(std::abs(r0.y - q1.y) < 1e-15);
        REQUIRE(std::abs(r0.z - q1.z) < 1e-15);
        // alpha = 1 returns q2 post shortest-path flip: same rotation either way
        Quat r1 = slerp(q1, q2, 1.0);
        REQUIRE(std::abs(std::abs(dot(r1, q2)) - 1.0) < 1e-12);
    }
}

TEST_CASE("slerp same-axis midpoint gives 45 degrees about y") {
    Quat q1{1, 0, 0, 0};
    Quat q2 = axis_angle_to_quat({0, kPi / 2, 0});
    Quat mid = slerp(q1, q2, 0.5);
    REQUIRE(std::abs(mid.w - 0.92388) < 1e-5);
    REQUIRE(std::abs(mid.x) < 1e-12);
    REQUIRE(std::abs(mid.y - 0.38268) < 1e-5);
    REQUIRE(std::abs(mid.z) < 1e-12);
}

TEST_CASE("slerp output is unit norm and same-axis angles are linear") {
    Rng rng(0x5eed006);
    for (int trial = 0; trial < 200; ++trial) {
        Vec3 axis = random_axis_angle(rng, 1.0);
        double nn = axis.norm();
        if (nn < 1e-9) continue;
        Vec3 unit{axis.x / nn, axis.y / nn, axis.z / nn};
        double t1 = rng.uniform(0.0, 1.0), t2 = rng.uniform(1.5, 3.0);
        Quat q1 = axis_angle_to_quat(t1 * unit);
        Quat q2 = axis_angle_to_quat(t2 * unit);
        double alpha = rng.uniform(0.0, 1.0);
        Quat r = slerp(q1, q2, alpha);
        REQUIRE(std::abs(r.norm() - 1.0) < 1e-12);
        double expect_angle = (1 - alpha) * t1 + alpha * t2;
        Vec3 back = quat_to_axis_angle(r);
        REQUIRE(std::abs(back.norm() - expect_angle) < 1e-9);
    }
}

TEST_CASE("slerp takes the shortest path when the dot product is negative") {
    Rng rng(0x5eed007);
    int negated_pairs = 0;
    for (int trial = 0; trial < 500; ++trial) {
        Quat q1 = axis_angle_to_quat(random_axis_angle(rng));
        Quat q2 = axis_angle_to_quat(random_axis_angle(rng));
        if (dot(q1, q2) >= 0) q2 = {-q2.w, -q2.x, -q2.y, -q2.z};
        ++negated_pairs;
        double d = std::abs(dot(q1, q2));
        double half_arc = rotation_angle_between(q1, q2);
        for (double alpha : {0.25, 0.5, 0.75}) {
            Quat r = slerp(q1, q2, alpha);
            // interpolant never swings further from q1 than the short arc
            REQUIRE(rotation_angle_between(q1, r) <= half_arc + 1e-9);
            // flipping the sign of q2 must not change the represented rotation
            Quat q2f{-q2.w, -q2.x, -q2.y, -q2.z};
            Quat rf = slerp(q1, q2f, alpha);
            REQUIRE(std::abs(std::abs(dot(r, rf)) - 1.0) < 1e-12);
        }
        (void)d;
    }
    REQUIRE(negated_pairs == 500);
}

TEST_CASE("slerp near-parallel inputs fall back without blowing up") {
    Quat q1 = axis_angle_to_quat({0.3, 0.2, 0.1});
    Quat q2 = axis_angle_to_quat({0.3 + 1e-9, 0.2, 0.1});
    for (double alpha : {0.0, 0.3, 0.7, 1.0}) {
        Quat r = slerp(q1, q2, alpha);
        REQUIRE(std::isfinite(r.w));
        REQUIRE(std::abs(r.norm() - 1.0) < 1e-12);
    }
    // exactly equal inputs
    Quat r = slerp(q1, q1, 0.5);
    REQUIRE(std::abs(std::abs(dot(r, q1)) - 1.0) < 1e-12);
}

TEST_CASE("slerp rejects alpha outside [0,1]") {
    Quat q{1, 0, 0, 0};
    REQUIRE_THROWS_AS(slerp(q, q, -0.1), InvalidArgument);
    REQUIRE_THROWS_AS(slerp(q, q, 1.1), InvalidArgument);
}

namespace {
PoseParams make_pose(Rng& rng, size_t joints = 4, size_t shape_dim = 3) {
    PoseParams p;
    p.global_orient = random_axis_angle(rng);
    p.body_pose.resize(joints * 3);
    for (auto& v : p.body_pose) v = rng.uniform(-1.0, 1.0);
    p.shape.resize(shape_dim);
    for (auto& v : p.shape) v = rng.uniform(-2.0, 2.0);
    p.translation = {rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)};
    return p;
}
}  // namespace

TEST_CASE("interpolate_pose is the identity at the endpoints") {
    Rng rng(0x5eed008);
    PoseParams p1 = make_pose(rng), p2 = make_pose(rng);
    PoseParams a0 = interpolate_pose(p1, p2, 0.0);
    PoseParams a1 = interpolate_pose(p1, p2, 1.0);
    REQUIRE(a0.global_orient.x == p1.global_orient.x);
    REQUIRE(a0.body_pose == p1.body_pose);
    REQUIRE(a0.shape == p1.shape);
    REQUIRE(a0.translation.z == p1.translation.z);
    REQUIRE(a1.global_orient.y == p2.global_orient.y);
    REQUIRE(a1.body_pose == p2.body_pose);
}

TEST_CASE("interpolate_pose linear fields follow the linear rule") {
    PoseParams p1, p2;
    p1.translation = {0, 0, 0};
    p2.translation = {2, 0, 0};
    PoseParams q = interpolate_pose(p1, p2, 0.25);
    REQUIRE(q.translation.x == 0.5);
    REQUIRE(q.translation.y == 0.0);

    // midpoint of linear fields is the arithmetic mean, exactly
    Rng rng(0x5eed009);
    PoseParams a = make_pose(rng), b = make_pose(rng);
    PoseParams mid = interpolate_pose(a, b, 0.5);
    for (size_t i = 0; i < a.body_pose.size(); ++i)
        REQUIRE(mid.body_pose[i] == 0.5 * a.body_pose[i] + 0.5 * b.body_pose[i]);
    for (size_t i = 0; i < a.shape.size(); ++i)
        REQUIRE(mid.shape[i] == 0.5 * a.shape[i] + 0.5 * b.shape[i]);
}

TEST_CASE("interpolate_pose global orient matches slerp on the same axis") {
    PoseParams p1, p2;
    p1.global_orient = {0, 0, 0};
    p2.global_orient = {0, kPi / 2, 0};
    PoseParams mid = interpolate_pose(p1, p2, 0.5);
    REQUIRE(std::abs(mid.global_orient.y - kPi / 4) < 1e-12);
    REQUIRE(std::abs(mid.global_orient.x) < 1e-12);
}

TEST_CASE("interpolate_pose rejects mismatched dimensions") {
    Rng rng(0x5eed00a);
    PoseParams p1 = make_pose(rng, 4), p2 = make_pose(rng, 5);
    REQUIRE_THROWS_AS(interpolate_pose(p1, p2, 0.5), InvalidArgument);
}

TEST_CASE("pose_sequence endpoints and midpoint") {
    Rng rng(0x5eed00b);
    PoseParams p1 = make_pose(rng), p2 = make_pose(rng);

    auto two = pose_sequence(p1, p2, 2);
    REQUIRE(two.size() == 2);
    REQUIRE(two[0].body_pose == p1.body_pose);
    REQUIRE(two[1].body_pose == p2.body_pose);

    auto three = pose_sequence(p1, p2, 3);
    PoseParams mid = interpolate_pose(p1, p2, 0.5);
    REQUIRE(three[1].body_pose == mid.body_pose);
    REQUIRE(three[1].global_orient.x == mid.global_orient.x);

    REQUIRE_THROWS_AS(pose_sequence(p1, p2, 1), InvalidArgument);
}

TEST_CASE("pose_sequence rotation angle progresses monotonically on a shared axis") {
    PoseParams p1, p2;
    p1.global_orient = {0, 0.2, 0};
    p2.global_orient = {0, 2.8, 0};
    auto seq = pose_sequence(p1, p2, 9);
    double prev = -1;
    for (const auto& p : seq) {
        double angle = p.global_orient.norm();
        REQUIRE(angle > prev);
        prev = angle;
    }
}

TEST_CASE("viewpoint_score is the plain dot product") {
    REQUIRE(viewpoint_score({0, 0, 1}, {0, 0, 1}) == 1.0);
    REQUIRE(viewpoint_score({0, 0, 1}, {0, 0, -1}) == -1.0);
    double s = viewpoint_score({0, 0, 1}, {0, std::sin(kPi / 3), std::cos(kPi / 3)});
    REQUIRE(std::abs(s - 0.5) < 1e-12);
}
