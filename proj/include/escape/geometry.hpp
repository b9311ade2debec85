#pragma once

#include <array>
#include <optional>
#include <utility>
#include <vector>

namespace escape {

// Conventions, fixed project-wide: right-handed world frame with z up, grid
// axes aligned to the room. Yaw 0 looks along +x and increases
// counter-clockwise (90 -> +y); tilt is camera pitch below the horizon in
// degrees. Pose updates are exact accumulations of discrete action deltas.
struct AgentPose {
    double x = 0.0;  // meters
    double y = 0.0;  // meters
    int yaw_deg = 0;   // one of {0, 90, 180, 270}
    int tilt_deg = 45;
};

inline constexpr int kTiltStepDeg = 15;
inline constexpr int kTiltMinDeg = -30;
inline constexpr int kTiltMaxDeg = 60;

// Exact heading components for cardinal yaws, each in {-1, 0, 1}.
std::pair<double, double> heading_vector(int yaw_deg);

AgentPose rotated_left(const AgentPose& pose);
AgentPose rotated_right(const AgentPose& pose);
AgentPose moved_ahead(const AgentPose& pose, double step_m);
// nullopt when the tilt would leave [kTiltMinDeg, kTiltMaxDeg]; the caller
// keeps the pose unchanged in that case.
std::optional<AgentPose> tilted(const AgentPose& pose, int delta_deg);

// World -> image map of Eq. "z' [u v 1]^T = P [x y z 1]^T": intrinsics times
// extrinsics, 3x4 row-major.
struct CameraProjection {
    std::array<double, 12> p{};
};

struct PixelPoint {
    double u = 0.0;  // column, pixels
    double v = 0.0;  // row, pixels
    double depth = 0.0;
};

struct PillarConfig {
    int n_ref = 4;
    double z_min = 0.0;
    double z_max = 1.8;
};

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;
};

// Pinhole camera at (pose.x, pose.y, camera_height): focal
// (W/2)/tan(fov/2), principal point at the pixel-center midpoint
// ((W-1)/2, (H-1)/2), u along the camera's right axis, v down.
CameraProjection camera_projection_from_pose(const AgentPose& pose, double fov_deg, int image_w,
                                             int image_h, double camera_height);

// Homogeneous multiply and perspective divide; nullopt when the depth factor
// is <= 0 (point behind the camera).
std::optional<PixelPoint> project_point(const CameraProjection& cam, const Vec3& pt);

// True iff depth > 0 and 0 <= u < W, 0 <= v < H (half-open).
bool in_frustum(const std::optional<PixelPoint>& px, int image_w, int image_h);

std::pair<double, double> cell_center(int gx, int gy, double grid_res);

// n_ref points at the cell center with z at uniform bin centers of
// [z_min, z_max].
std::vector<Vec3> pillar_reference_points(int gx, int gy, const PillarConfig& cfg, double grid_res);

}  // namespace escape
