#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "escape/harness.hpp"
#include "escape/training.hpp"

namespace py = pybind11;
using namespace escape;

namespace {

py::array_t<double> projection_matrix(double x, double y, int yaw, int tilt, double fov, int w,
                                      int h, double camera_height) {
    CameraProjection cam =
        camera_projection_from_pose(AgentPose{x, y, yaw, tilt}, fov, w, h, camera_height);
    py::array_t<double> out({3, 4});
    std::copy(cam.p.begin(), cam.p.end(), out.mutable_data());
    return out;
}

py::object project(py::array_t<double, py::array::c_style | py::array::forcecast> p, double x,
                   double y, double z) {
    if (p.size() != 12) throw std::invalid_argument("projection matrix must have 12 entries");
    CameraProjection cam;
    std::copy(p.data(), p.data() + 12, cam.p.begin());
    auto px = project_point(cam, Vec3{x, y, z});
    if (!px.has_value()) return py::none();
    return py::make_tuple(px->u, px->v, px->depth);
}

py::object bilinear(py::array_t<double, py::array::c_style | py::array::forcecast> map,
                    py::array_t<double, py::array::c_style | py::array::forcecast> points) {
    if (map.ndim() != 3) throw std::invalid_argument("map must be [h,w,c]");
    if (points.ndim() != 2 || points.shape(1) != 2) throw std::invalid_argument("points must be [n,2]");
    Tensor m = Tensor::from_data({map.shape(0), map.shape(1), map.shape(2)},
                                 std::vector<double>(map.data(), map.data() + map.size()));
    Tensor pts = Tensor::from_data({points.shape(0), 2},
                                   std::vector<double>(points.data(), points.data() + points.size()));
    Tensor out = bilinear_sample(m, pts);
    py::array_t<double> result({out.extent(0), out.extent(1)});
    std::copy(out.data().begin(), out.data().end(), result.mutable_data());
    return result;
}

py::object bfs(py::array_t<uint8_t, py::array::c_style | py::array::forcecast> free,
               std::pair<int, int> start, std::vector<std::pair<int, int>> goals) {
    if (free.ndim() != 2) throw std::invalid_argument("free must be [h,w]");
    NavigableMap nav;
    nav.h = static_cast<int>(free.shape(0));
    nav.w = static_cast<int>(free.shape(1));
    nav.free.assign(free.data(), free.data() + free.size());
    std::vector<Cell> goal_cells;
    for (auto [r, c] : goals) goal_cells.push_back(Cell{r, c});
    auto path = bfs_path(nav, Cell{start.first, start.second}, goal_cells);
    if (!path.has_value()) return py::none();
    py::list out;
    for (const Cell& cell : *path) out.append(py::make_tuple(cell.row, cell.col));
    return out;
}

py::list subgoals(const std::string& task_type, const std::string& object_name,
                  const std::string& receptacle, bool slice) {
    TaskSpec task;
    bool known = false;
    for (TaskType t : {TaskType::PickPlace, TaskType::PlaceTwo, TaskType::HeatPlace})
        if (task_type == task_type_name(t)) {
            task.type = t;
            known = true;
        }
    if (!known) throw std::invalid_argument("unknown task type: " + task_type);
    task.object_target = category_from_name(object_name);
    task.receptacle = category_from_name(receptacle);
    task.slice = slice;
    py::list out;
    for (const SubTask& st : expand_subgoals(task))
        out.append(py::make_tuple(verb_name(st.verb), category_name(st.target)));
    return out;
}

py::dict metrics_from_dicts(const std::vector<py::dict>& episodes) {
    std::vector<EpisodeLog> logs;
    for (const py::dict& d : episodes) {
        EpisodeLog log;
        log.success = d["success"].cast<bool>();
        log.gc_met = d["gc_met"].cast<int>();
        log.gc_total = d["gc_total"].cast<int>();
        log.expert_length = d["expert_length"].cast<int>();
        log.agent_length = d["agent_length"].cast<int>();
        if (d.contains("failure")) log.failure = d["failure"].cast<std::string>();
        logs.push_back(std::move(log));
    }
    MetricsReport r = compute_metrics(logs);
    py::dict out;
    out["SR"] = r.sr;
    out["GC"] = r.gc;
    out["PLWSR"] = r.plwsr;
    out["PLWGC"] = r.plwgc;
    out["EF"] = r.ef.has_value() ? py::object(py::float_(*r.ef)) : py::object(py::none());
    out["episodes"] = r.episodes;
    return out;
}

py::dict room_summary(uint64_t seed) {
    EpisodeSetup setup = gen_episode(seed);
    py::dict out;
    out["grid"] = py::make_tuple(setup.room.grid_h, setup.room.grid_w);
    out["task_type"] = task_type_name(setup.task.type);
    out["object"] = category_name(setup.task.object_target);
    out["receptacle"] = category_name(setup.task.receptacle);
    py::list instances;
    for (const auto& inst : setup.room.instances)
        instances.append(py::make_tuple(category_name(inst.category), inst.gx, inst.gy));
    out["instances"] = instances;
    py::array_t<uint8_t> walls({setup.room.grid_h, setup.room.grid_w});
    std::copy(setup.room.wall.begin(), setup.room.wall.end(), walls.mutable_data());
    out["walls"] = walls;
    return out;
}

py::array_t<uint8_t> render_semantic(uint64_t seed, double x, double y, int yaw, int tilt) {
    EpisodeSetup setup = gen_episode(seed);
    WorldConfig cfg;
    AgentState agent{AgentPose{x, y, yaw, tilt}, -1};
    ObservationFrame frame = render(setup.room, agent, cfg);
    py::array_t<uint8_t> out({cfg.image_size, cfg.image_size});
    std::copy(frame.semantic.begin(), frame.semantic.end(), out.mutable_data());
    return out;
}

py::dict grad_check(uint64_t seed, int seeds, double tol) {
    GradVerifyReport report = verify_gradients(seed, seeds, tol);
    py::dict out;
    out["pass"] = report.pass;
    py::dict comps;
    for (const auto& c : report.components) {
        py::dict entry;
        entry["max_rel_err"] = c.max_rel_err;
        entry["pass"] = c.pass;
        comps[c.name.c_str()] = entry;
    }
    out["components"] = comps;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Grid-based episodic spatial memory pipeline: projection, planning, "
              "metrics, and gradient verification primitives";

    m.attr("__version__") = "0.1.0";
    m.attr("NUM_CATEGORIES") = kNumCategories;

    m.def("bce", &bce, py::arg("prob"), py::arg("label"),
          "Binary cross-entropy with the 1e-7 clamp");
    m.def("bilinear_sample", &bilinear, py::arg("map"), py::arg("points"),
          "Bilinear samples of a [h,w,c] map at (u,v) points; out of bounds -> zeros");
    m.def("camera_projection_from_pose", &projection_matrix, py::arg("x"), py::arg("y"),
          py::arg("yaw_deg"), py::arg("tilt_deg"), py::arg("fov_deg") = 60.0,
          py::arg("image_w") = 64, py::arg("image_h") = 64, py::arg("camera_height") = 1.5,
          "3x4 world-to-image projection matrix for an agent pose");
    m.def("project_point", &project, py::arg("projection"), py::arg("x"), py::arg("y"),
          py::arg("z"), "(u, v, depth) or None when the point is behind the camera");
    m.def("pillar_reference_points",
          [](int gx, int gy, int n_ref, double z_min, double z_max, double grid_res) {
              auto pts = pillar_reference_points(gx, gy, PillarConfig{n_ref, z_min, z_max}, grid_res);
              py::array_t<double> out({static_cast<py::ssize_t>(pts.size()), static_cast<py::ssize_t>(3)});
              double* data = out.mutable_data();
              for (size_t i = 0; i < pts.size(); ++i) {
                  data[i * 3 + 0] = pts[i].x;
                  data[i * 3 + 1] = pts[i].y;
                  data[i * 3 + 2] = pts[i].z;
              }
              return out;
          },
          py::arg("gx"), py::arg("gy"), py::arg("n_ref") = 4, py::arg("z_min") = 0.0,
          py::arg("z_max") = 1.8, py::arg("grid_res") = 0.25);
    m.def("bfs_path", &bfs, py::arg("free"), py::arg("start"), py::arg("goals"),
          "Waypoints of the shortest 4-connected path, or None when unreachable");
    m.def("expand_subgoals", &subgoals, py::arg("task_type"), py::arg("object"),
          py::arg("receptacle"), py::arg("slice") = false);
    m.def("compute_metrics", &metrics_from_dicts, py::arg("episodes"),
          "SR/GC/PLWSR/PLWGC/EF over episode dicts");
    m.def("miou",
          [](py::array_t<uint8_t, py::array::c_style | py::array::forcecast> pred,
             py::array_t<uint8_t, py::array::c_style | py::array::forcecast> gt, int categories) {
              MiouResult r = miou(std::vector<uint8_t>(pred.data(), pred.data() + pred.size()),
                                  std::vector<uint8_t>(gt.data(), gt.data() + gt.size()), categories);
              return py::make_tuple(r.per_category, r.mean);
          },
          py::arg("pred"), py::arg("gt"), py::arg("categories"));
    m.def("gen_room", &room_summary, py::arg("seed"));
    m.def("render_semantic", &render_semantic, py::arg("seed"), py::arg("x"), py::arg("y"),
          py::arg("yaw_deg"), py::arg("tilt_deg") = 45);
    m.def("verify_gradients", &grad_check, py::arg("seed") = 1, py::arg("seeds") = 3,
          py::arg("tol") = 1e-5);
    m.def("category_names", [] {
        py::list names;
        for (int k = 0; k < kNumCategories; ++k) names.append(category_name(k));
        return names;
    });
}
