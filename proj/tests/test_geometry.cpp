#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "escape/geometry.hpp"
#include "escape/rng.hpp"

using namespace escape;

namespace {

CameraProjection from_matrix(std::array<double, 12> m) {
    CameraProjection c;
    c.p = m;
    return c;
}

// Independent oracle: plain 3x4 * 4x1 homogeneous multiply.
std::optional<PixelPoint> oracle_project(const std::array<double, 12>& p, const Vec3& v) {
    double h[3];
    for (int r = 0; r < 3; ++r)
        h[r] = p[r * 4 + 0] * v.x + p[r * 4 + 1] * v.y + p[r * 4 + 2] * v.z + p[r * 4 + 3];
    if (h[2] <= 0.0) return std::nullopt;
    return PixelPoint{h[0] / h[2], h[1] / h[2], h[2]};
}

}  // namespace

TEST_CASE("focal length from fov") {
    auto cam = camera_projection_from_pose(AgentPose{0, 0, 0, 0}, 60.0, 300, 300, 1.5);
    // f appears in p[0] column combos; recover it via a pure-right offset point.
    // Simpler: recompute the closed form and check the matrix entry p[0*4+1]
    // at yaw 0: row0 = f*r + cx*fw with r=(0,-1,0), fw=(1,0,0) at tilt 0.
    CHECK(cam.p[1] == doctest::Approx(-259.8076).epsilon(1e-6));
}

TEST_CASE("straight-ahead point projects to the image center") {
    double h = 1.5;
    auto cam = camera_projection_from_pose(AgentPose{0, 0, 0, 0}, 60.0, 300, 300, h);
    auto px = project_point(cam, Vec3{1.0, 0.0, h});
    REQUIRE(px.has_value());
    CHECK(px->u == doctest::Approx(149.5).epsilon(1e-9));
    CHECK(px->v == doctest::Approx(149.5).epsilon(1e-9));
    CHECK(px->depth == doctest::Approx(1.0));
}

TEST_CASE("yaw 90 camera equals yaw 0 camera on the rotated world") {
    auto cam0 = camera_projection_from_pose(AgentPose{0, 0, 0, 30}, 60.0, 64, 64, 1.5);
    auto cam90 = camera_projection_from_pose(AgentPose{0, 0, 90, 30}, 60.0, 64, 64, 1.5);
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        Vec3 p{rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(0, 2)};
        // rotate world by -90 deg about z: (x,y) -> (y, -x)
        Vec3 q{p.y, -p.x, p.z};
        auto a = project_point(cam90, p);
        auto b = project_point(cam0, q);
        REQUIRE(a.has_value() == b.has_value());
        if (a) {
            CHECK(a->u == doctest::Approx(b->u).epsilon(1e-9));
            CHECK(a->v == doctest::Approx(b->v).epsilon(1e-9));
            CHECK(a->depth == doctest::Approx(b->depth).epsilon(1e-9));
        }
    }
}

TEST_CASE("identity camera and behind gate") {
    auto cam = from_matrix({1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0});
    auto ahead = project_point(cam, Vec3{0, 0, 1});
    REQUIRE(ahead.has_value());
    CHECK(ahead->u == doctest::Approx(0.0));
    CHECK(ahead->v == doctest::Approx(0.0));
    CHECK(ahead->depth == doctest::Approx(1.0));
    CHECK(!project_point(cam, Vec3{0, 0, -1}).has_value());
}

TEST_CASE("projection agrees with the homogeneous oracle on 1000 random pairs") {
    Rng rng(123);
    for (int i = 0; i < 1000; ++i) {
        std::array<double, 12> m;
        for (double& v : m) v = rng.normal();
        Vec3 p{rng.normal() * 3, rng.normal() * 3, rng.normal() * 3};
        auto a = project_point(from_matrix(m), p);
        auto b = oracle_project(m, p);
        REQUIRE(a.has_value() == b.has_value());
        if (a) {
            CHECK(std::abs(a->u - b->u) <= 1e-12 * std::max(1.0, std::abs(b->u)));
            CHECK(std::abs(a->v - b->v) <= 1e-12 * std::max(1.0, std::abs(b->v)));
        }
    }
}

TEST_CASE("in_frustum half-open bounds") {
    PixelPoint center{32.0, 32.0, 1.0};
    CHECK(in_frustum(center, 64, 64));
    CHECK(!in_frustum(std::nullopt, 64, 64));
    CHECK(!in_frustum(PixelPoint{64.0, 10.0, 1.0}, 64, 64));
    CHECK(!in_frustum(PixelPoint{10.0, 10.0, -1.0}, 64, 64));
    CHECK(in_frustum(PixelPoint{0.0, 0.0, 0.5}, 64, 64));
}

TEST_CASE("pillar reference points") {
    auto one = pillar_reference_points(0, 0, PillarConfig{1, 0.0, 2.0}, 0.25);
    REQUIRE(one.size() == 1);
    CHECK(one[0].z == doctest::Approx(1.0));
    CHECK(one[0].x == doctest::Approx(0.125));
    CHECK(one[0].y == doctest::Approx(0.125));

    auto four = pillar_reference_points(3, 7, PillarConfig{4, 0.0, 1.8}, 0.25);
    REQUIRE(four.size() == 4);
    CHECK(four[0].z == doctest::Approx(0.225));
    CHECK(four[1].z == doctest::Approx(0.675));
    CHECK(four[2].z == doctest::Approx(1.125));
    CHECK(four[3].z == doctest::Approx(1.575));
    CHECK(four[0].x == doctest::Approx((3 + 0.5) * 0.25));
    CHECK(four[0].y == doctest::Approx((7 + 0.5) * 0.25));
}

TEST_CASE("pose updates are closed over navigation actions") {
    Rng rng(9);
    AgentPose pose{1.0, 1.0, 0, 45};
    for (int i = 0; i < 5000; ++i) {
        switch (rng.uniform_int(5)) {
            case 0: pose = moved_ahead(pose, 0.25); break;
            case 1: pose = rotated_left(pose); break;
            case 2: pose = rotated_right(pose); break;
            case 3:
                if (auto t = tilted(pose, kTiltStepDeg)) pose = *t;
                break;
            default:
                if (auto t = tilted(pose, -kTiltStepDeg)) pose = *t;
                break;
        }
        CHECK((pose.yaw_deg == 0 || pose.yaw_deg == 90 || pose.yaw_deg == 180 || pose.yaw_deg == 270));
        CHECK(pose.tilt_deg >= kTiltMinDeg);
        CHECK(pose.tilt_deg <= kTiltMaxDeg);
        // positions stay exact multiples of the step
        CHECK(pose.x == std::round(pose.x / 0.25) * 0.25);
        CHECK(pose.y == std::round(pose.y / 0.25) * 0.25);
    }
    // out-of-range tilt is rejected with pose unchanged
    AgentPose p2{0, 0, 0, kTiltMaxDeg};
    CHECK(!tilted(p2, kTiltStepDeg).has_value());
}

TEST_CASE("four rotations return the original yaw") {
    AgentPose pose{0, 0, 90, 45};
    AgentPose p = pose;
    for (int i = 0; i < 4; ++i) p = rotated_right(p);
    CHECK(p.yaw_deg == pose.yaw_deg);
}
