#include <cmath>
#include <numbers>
#include <limits>
#include <unordered_map>

#include "escape/microworld.hpp"

namespace escape {

namespace {

constexpr double kRayEps = 1e-9;

struct Box {
    double x0, x1, y0, y1, z0, z1;
    int category;
    int16_t instance;  // instance id or pixel sentinel
    int cell;
};

struct Hit {
    double t = std::numeric_limits<double>::infinity();
    int category = -1;
    int16_t instance = kPixelNone;
    int cell = -1;
};

// Rendered height interval; an open container drops to a half-height slab so
// its contents are exposed.
void render_interval(const ObjectInstance& inst, double& z0, double& z1) {
    if (category_openable(inst.category)) {
        z0 = 0.0;
        z1 = inst.open ? kContainerHeight / 2.0 : kContainerHeight;
    } else if (category_surface(inst.category)) {
        z0 = 0.0;
        z1 = kSurfaceHeight;
    } else {
        z0 = inst.z0;
        z1 = inst.z1;
    }
}

bool ray_box(const Vec3& o, const Vec3& d, const Box& b, double& t_enter) {
    double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
    const double lo[3] = {b.x0, b.y0, b.z0};
    const double hi[3] = {b.x1, b.y1, b.z1};
    const double oo[3] = {o.x, o.y, o.z};
    const double dd[3] = {d.x, d.y, d.z};
    for (int a = 0; a < 3; ++a) {
        if (std::abs(dd[a]) < 1e-15) {
            if (oo[a] < lo[a] || oo[a] > hi[a]) return false;
            continue;
        }
        double ta = (lo[a] - oo[a]) / dd[a];
        double tb = (hi[a] - oo[a]) / dd[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    if (t1 <= kRayEps || t0 <= kRayEps) return false;  // behind or camera inside
    t_enter = t0;
    return true;
}

}  // namespace

ObservationFrame render(const Room& room, const AgentState& agent, const WorldConfig& cfg, int t) {
    const int n = cfg.image_size;
    ObservationFrame frame;
    frame.semantic.assign(static_cast<size_t>(n * n), kSemanticNone);
    frame.instance.assign(static_cast<size_t>(n * n), kPixelNone);
    frame.cell.assign(static_cast<size_t>(n * n), -1);
    frame.pose = agent.pose;
    frame.projection =
        camera_projection_from_pose(agent.pose, cfg.fov_deg, n, n, cfg.camera_height);
    frame.t = t;

    // Camera basis matching camera_projection_from_pose.
    double psi = agent.pose.yaw_deg * std::numbers::pi / 180.0;
    double theta = agent.pose.tilt_deg * std::numbers::pi / 180.0;
    double cp = std::cos(psi), sp = std::sin(psi);
    double ct = std::cos(theta), st = std::sin(theta);
    Vec3 right{sp, -cp, 0.0};
    Vec3 down{-cp * st, -sp * st, -ct};
    Vec3 fwd{cp * ct, sp * ct, -st};
    Vec3 origin{agent.pose.x, agent.pose.y, cfg.camera_height};
    double f = (n / 2.0) / std::tan(cfg.fov_deg * std::numbers::pi / 360.0);
    double cx = (n - 1) / 2.0, cy = (n - 1) / 2.0;

    // Boxes per cell for the grid walk.
    std::unordered_map<int, std::vector<Box>> cell_boxes;
    const double res = room.grid_res;
    for (int gy = 0; gy < room.grid_h; ++gy)
        for (int gx = 0; gx < room.grid_w; ++gx)
            if (room.is_wall(gx, gy)) {
                int cell = room.cell_index(gx, gy);
                cell_boxes[cell].push_back(Box{gx * res, (gx + 1) * res, gy * res, (gy + 1) * res,
                                               0.0, kWallHeight, CatWall, kPixelWall, cell});
            }
    for (const auto& inst : room.instances) {
        if (room.instance_hidden(inst)) continue;
        double z0, z1;
        render_interval(inst, z0, z1);
        int cell = room.cell_index(inst.gx, inst.gy);
        double x0 = inst.gx * res, x1 = (inst.gx + 1) * res;
        double y0 = inst.gy * res, y1 = (inst.gy + 1) * res;
        if (inst.placement == Placement::OnSurface || inst.placement == Placement::Inside) {
            // place each child in its own quadrant so stacked items stay visible
            double hx = res / 2, hy = res / 2;
            x0 += (inst.slot & 1) * hx;
            y0 += ((inst.slot >> 1) & 1) * hy;
            x1 = x0 + hx;
            y1 = y0 + hy;
        }
        cell_boxes[cell].push_back(Box{x0, x1, y0, y1, z0, z1, inst.category,
                                       static_cast<int16_t>(inst.id), cell});
    }

    const double room_w = room.grid_w * res;
    const double room_h = room.grid_h * res;

    for (int py = 0; py < n; ++py) {
        for (int px = 0; px < n; ++px) {
            double su = (px - cx) / f;
            double sv = (py - cy) / f;
            Vec3 dir{fwd.x + su * right.x + sv * down.x, fwd.y + su * right.y + sv * down.y,
                     fwd.z + su * right.z + sv * down.z};

            Hit best;
            // Floor plane candidate.
            if (dir.z < -1e-12) {
                double tf = -origin.z / dir.z;
                double hx = origin.x + tf * dir.x;
                double hy = origin.y + tf * dir.y;
                if (hx >= 0.0 && hx < room_w && hy >= 0.0 && hy < room_h) {
                    int gx = static_cast<int>(hx / res);
                    int gy = static_cast<int>(hy / res);
                    best = Hit{tf, CatFloor, kPixelFloor, room.cell_index(gx, gy)};
                }
            }

            // Grid walk over the cells the ray crosses.
            int gx = static_cast<int>(std::floor(origin.x / res));
            int gy = static_cast<int>(std::floor(origin.y / res));
            int step_x = dir.x > 0 ? 1 : (dir.x < 0 ? -1 : 0);
            int step_y = dir.y > 0 ? 1 : (dir.y < 0 ? -1 : 0);
            double t_max_x = std::numeric_limits<double>::infinity();
            double t_max_y = std::numeric_limits<double>::infinity();
            double t_delta_x = std::numeric_limits<double>::infinity();
            double t_delta_y = std::numeric_limits<double>::infinity();
            if (step_x != 0) {
                double next = (gx + (step_x > 0 ? 1 : 0)) * res;
                t_max_x = (next - origin.x) / dir.x;
                t_delta_x = res / std::abs(dir.x);
            }
            if (step_y != 0) {
                double next = (gy + (step_y > 0 ? 1 : 0)) * res;
                t_max_y = (next - origin.y) / dir.y;
                t_delta_y = res / std::abs(dir.y);
            }

            double cell_entry = 0.0;
            int guard = 2 * (room.grid_w + room.grid_h) + 4;
            while (guard-- > 0) {
                if (room.in_bounds(gx, gy)) {
                    auto it = cell_boxes.find(room.cell_index(gx, gy));
                    if (it != cell_boxes.end()) {
                        for (const Box& b : it->second) {
                            double te;
                            if (ray_box(origin, dir, b, te) && te < best.t)
                                best = Hit{te, b.category, b.instance, b.cell};
                        }
                    }
                } else if (cell_entry > 0.0) {
                    break;  // left the room
                }
                if (cell_entry > best.t) break;
                if (t_max_x < t_max_y) {
                    cell_entry = t_max_x;
                    t_max_x += t_delta_x;
                    gx += step_x;
                } else if (t_max_y < std::numeric_limits<double>::infinity()) {
                    cell_entry = t_max_y;
                    t_max_y += t_delta_y;
                    gy += step_y;
                } else {
                    break;  // ray is vertical
                }
            }

            if (best.category >= 0) {
                size_t idx = static_cast<size_t>(py * n + px);
                frame.semantic[idx] = static_cast<uint8_t>(best.category);
                frame.instance[idx] = best.instance;
                frame.cell[idx] = static_cast<int16_t>(best.cell);
            }
        }
    }
    return frame;
}

}  // namespace escape
