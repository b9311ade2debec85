#include "escape/geometry.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace escape {

namespace {

constexpr double kDegToRad = std::numbers::pi / 180.0;

int normalize_yaw(int yaw) {
    int y = yaw % 360;
    if (y < 0) y += 360;
    return y;
}

}  // namespace

std::pair<double, double> heading_vector(int yaw_deg) {
    switch (normalize_yaw(yaw_deg)) {
        case 0: return {1.0, 0.0};
        case 90: return {0.0, 1.0};
        case 180: return {-1.0, 0.0};
        case 270: return {0.0, -1.0};
        default: throw std::invalid_argument("heading_vector: yaw must be a cardinal angle");
    }
}

AgentPose rotated_left(const AgentPose& pose) {
    AgentPose out = pose;
    out.yaw_deg = normalize_yaw(pose.yaw_deg + 90);
    return out;
}

AgentPose rotated_right(const AgentPose& pose) {
    AgentPose out = pose;
    out.yaw_deg = normalize_yaw(pose.yaw_deg + 270);
    return out;
}

AgentPose moved_ahead(const AgentPose& pose, double step_m) {
    auto [dx, dy] = heading_vector(pose.yaw_deg);
    AgentPose out = pose;
    out.x += dx * step_m;
    out.y += dy * step_m;
    return out;
}

std::optional<AgentPose> tilted(const AgentPose& pose, int delta_deg) {
    int t = pose.tilt_deg + delta_deg;
    if (t < kTiltMinDeg || t > kTiltMaxDeg) return std::nullopt;
    AgentPose out = pose;
    out.tilt_deg = t;
    return out;
}

CameraProjection camera_projection_from_pose(const AgentPose& pose, double fov_deg, int image_w,
                                             int image_h, double camera_height) {
    if (!(fov_deg > 0.0 && fov_deg < 180.0))
        throw std::invalid_argument("camera_projection_from_pose: fov must be in (0, 180)");
    double f = (image_w / 2.0) / std::tan(fov_deg * kDegToRad / 2.0);
    double cx = (image_w - 1) / 2.0;
    double cy = (image_h - 1) / 2.0;

    double psi = pose.yaw_deg * kDegToRad;
    double theta = pose.tilt_deg * kDegToRad;
    double cp = std::cos(psi), sp = std::sin(psi);
    double ct = std::cos(theta), st = std::sin(theta);

    // Rows of world->camera rotation: right, image-down, forward.
    double r[3] = {sp, -cp, 0.0};
    double d[3] = {-cp * st, -sp * st, -ct};
    double fw[3] = {cp * ct, sp * ct, -st};
    double c[3] = {pose.x, pose.y, camera_height};

    auto dot = [](const double* a, const double* b) {
        return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    };

    CameraProjection out;
    // K [R | -R c] with K = [[f,0,cx],[0,f,cy],[0,0,1]].
    for (int j = 0; j < 3; ++j) {
        out.p[0 * 4 + j] = f * r[j] + cx * fw[j];
        out.p[1 * 4 + j] = f * d[j] + cy * fw[j];
        out.p[2 * 4 + j] = fw[j];
    }
    out.p[0 * 4 + 3] = -(f * dot(r, c) + cx * dot(fw, c));
    out.p[1 * 4 + 3] = -(f * dot(d, c) + cy * dot(fw, c));
    out.p[2 * 4 + 3] = -dot(fw, c);
    return out;
}

std::optional<PixelPoint> project_point(const CameraProjection& cam, const Vec3& pt) {
    const auto& p = cam.p;
    double xh = p[0] * pt.x + p[1] * pt.y + p[2] * pt.z + p[3];
    double yh = p[4] * pt.x + p[5] * pt.y + p[6] * pt.z + p[7];
    double zh = p[8] * pt.x + p[9] * pt.y + p[10] * pt.z + p[11];
    if (zh <= 0.0) return std::nullopt;
    return PixelPoint{xh / zh, yh / zh, zh};
}

bool in_frustum(const std::optional<PixelPoint>& px, int image_w, int image_h) {
    if (!px.has_value() || px->depth <= 0.0) return false;
    return px->u >= 0.0 && px->u < static_cast<double>(image_w) && px->v >= 0.0 &&
           px->v < static_cast<double>(image_h);
}

std::pair<double, double> cell_center(int gx, int gy, double grid_res) {
    return {(gx + 0.5) * grid_res, (gy + 0.5) * grid_res};
}

std::vector<Vec3> pillar_reference_points(int gx, int gy, const PillarConfig& cfg, double grid_res) {
    if (cfg.n_ref < 1 || !(cfg.z_min < cfg.z_max))
        throw std::invalid_argument("pillar_reference_points: bad pillar config");
    auto [x, y] = cell_center(gx, gy, grid_res);
    std::vector<Vec3> pts;
    pts.reserve(static_cast<size_t>(cfg.n_ref));
    double span = cfg.z_max - cfg.z_min;
    for (int i = 0; i < cfg.n_ref; ++i) {
        double z = cfg.z_min + (i + 0.5) * span / cfg.n_ref;
        pts.push_back(Vec3{x, y, z});
    }
    return pts;
}

}  // namespace escape
