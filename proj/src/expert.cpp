#include "escape/expert.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

namespace escape {

namespace {

struct Solver {
    Room room;
    AgentState agent;
    const WorldConfig& cfg;
    TaskSpec task;
    ExpertTrajectory out;
    std::vector<uint8_t> cum_label;
    int t = 0;
    bool failed = false;

    Solver(const EpisodeSetup& setup, const WorldConfig& cfg_in)
        : room(setup.room), agent(setup.agent), cfg(cfg_in), task(setup.task) {
        cum_label.assign(static_cast<size_t>(room.grid_h * room.grid_w * kNumCategories), 0);
    }

    int cell_of(double x, double y) const {
        return room.cell_index(static_cast<int>(std::floor(x / room.grid_res)),
                               static_cast<int>(std::floor(y / room.grid_res)));
    }

    ExpertFrame make_frame(const ObservationFrame& obs) {
        for (size_t i = 0; i < obs.semantic.size(); ++i) {
            int cell = obs.cell[i];
            uint8_t cat = obs.semantic[i];
            if (cell >= 0 && cat < kNumCategories)
                cum_label[static_cast<size_t>(cell) * kNumCategories + cat] = 1;
        }
        ExpertFrame frame;
        frame.obs = obs;
        frame.map_label = cum_label;
        frame.image_masks.resize(obs.semantic.size() * kNumCategories);
        for (int k = 0; k < kNumCategories; ++k)
            for (size_t i = 0; i < obs.semantic.size(); ++i)
                frame.image_masks[static_cast<size_t>(k) * obs.semantic.size() + i] =
                    obs.semantic[i] == k ? 1 : 0;
        frame.manip = true_manipulability(room, agent, obs, cfg);
        return frame;
    }

    Outcome act(Action action) {
        ObservationFrame obs = render(room, agent, cfg, t);
        out.frames.push_back(make_frame(obs));
        Outcome outcome = step_env(room, agent, action, cfg);
        out.actions.push_back(std::move(action));
        ++t;
        return outcome;
    }

    void scan() {
        for (int i = 0; i < cfg.scan_rotations; ++i) act(Action{ActionKind::RotateRight, {}});
    }

    void rotate_to(int yaw) {
        int diff = (yaw - agent.pose.yaw_deg + 360) % 360;
        if (diff == 90) {
            act(Action{ActionKind::RotateLeft, {}});
        } else if (diff == 180) {
            act(Action{ActionKind::RotateRight, {}});
            act(Action{ActionKind::RotateRight, {}});
        } else if (diff == 270) {
            act(Action{ActionKind::RotateRight, {}});
        }
    }

    // BFS distances over the true navigable map from the agent's cell.
    std::vector<int> nav_distances() const {
        auto nav = room.navigable_truth();
        std::vector<int> dist(nav.size(), -1);
        std::queue<int> queue;
        int start = cell_of(agent.pose.x, agent.pose.y);
        dist[static_cast<size_t>(start)] = 0;
        queue.push(start);
        while (!queue.empty()) {
            int cur = queue.front();
            queue.pop();
            int gx = cur % room.grid_w, gy = cur / room.grid_w;
            const int dx[4] = {0, 1, 0, -1}, dy[4] = {-1, 0, 1, 0};
            for (int k = 0; k < 4; ++k) {
                int nx = gx + dx[k], ny = gy + dy[k];
                if (!room.in_bounds(nx, ny)) continue;
                int ni = room.cell_index(nx, ny);
                if (dist[static_cast<size_t>(ni)] >= 0 || !nav[static_cast<size_t>(ni)]) continue;
                dist[static_cast<size_t>(ni)] = dist[static_cast<size_t>(cur)] + 1;
                queue.push(ni);
            }
        }
        return dist;
    }

    std::optional<std::vector<int>> path_to(int goal_cell) const {
        auto nav = room.navigable_truth();
        std::vector<int> parent(nav.size(), -1);
        std::vector<int> dist(nav.size(), -1);
        std::queue<int> queue;
        int start = cell_of(agent.pose.x, agent.pose.y);
        if (start == goal_cell) return std::vector<int>{};
        dist[static_cast<size_t>(start)] = 0;
        queue.push(start);
        while (!queue.empty()) {
            int cur = queue.front();
            queue.pop();
            if (cur == goal_cell) break;
            int gx = cur % room.grid_w, gy = cur / room.grid_w;
            const int dx[4] = {0, 1, 0, -1}, dy[4] = {-1, 0, 1, 0};
            for (int k = 0; k < 4; ++k) {
                int nx = gx + dx[k], ny = gy + dy[k];
                if (!room.in_bounds(nx, ny)) continue;
                int ni = room.cell_index(nx, ny);
                if (dist[static_cast<size_t>(ni)] >= 0 || !nav[static_cast<size_t>(ni)]) continue;
                dist[static_cast<size_t>(ni)] = dist[static_cast<size_t>(cur)] + 1;
                parent[static_cast<size_t>(ni)] = cur;
                queue.push(ni);
            }
        }
        if (dist[static_cast<size_t>(goal_cell)] < 0) return std::nullopt;
        std::vector<int> path;
        for (int cur = goal_cell; cur != start; cur = parent[static_cast<size_t>(cur)])
            path.push_back(cur);
        std::reverse(path.begin(), path.end());
        return path;
    }

    // Candidate facing yaws toward the instance, primary axis first.
    std::vector<int> facings(int from_cell, const ObjectInstance& inst) const {
        int gx = from_cell % room.grid_w, gy = from_cell / room.grid_w;
        int dx = inst.gx - gx, dy = inst.gy - gy;
        int x_yaw = dx >= 0 ? 0 : 180;
        int y_yaw = dy >= 0 ? 90 : 270;
        if (std::abs(dx) >= std::abs(dy)) return {x_yaw, y_yaw};
        return {y_yaw, x_yaw};
    }

    bool visible_from(int cell, int yaw, int instance_id) const {
        AgentState probe = agent;
        auto [x, y] = cell_center(cell % room.grid_w, cell / room.grid_w, room.grid_res);
        probe.pose.x = x;
        probe.pose.y = y;
        probe.pose.yaw_deg = yaw;
        ObservationFrame frame = render(room, probe, cfg);
        for (int16_t id : frame.instance)
            if (id == instance_id) return true;
        return false;
    }

    // Best (stand cell, yaw) for interacting with the instance: nearest free
    // cell in manipulation range that actually sees it.
    std::optional<std::pair<int, int>> stand_spot(const ObjectInstance& inst) const {
        auto dist = nav_distances();
        struct Candidate {
            int prox, d, cell;
        };
        std::vector<Candidate> cands;
        for (int gy = std::max(0, inst.gy - cfg.manip_range_cells);
             gy <= std::min(room.grid_h - 1, inst.gy + cfg.manip_range_cells); ++gy)
            for (int gx = std::max(0, inst.gx - cfg.manip_range_cells);
                 gx <= std::min(room.grid_w - 1, inst.gx + cfg.manip_range_cells); ++gx) {
                int cell = room.cell_index(gx, gy);
                int agent_cell = cell_of(agent.pose.x, agent.pose.y);
                bool standable = room.cell_free_truth(gx, gy) || cell == agent_cell;
                if (!standable || dist[static_cast<size_t>(cell)] < 0) continue;
                int prox = std::max(std::abs(gx - inst.gx), std::abs(gy - inst.gy));
                cands.push_back({prox, dist[static_cast<size_t>(cell)], cell});
            }
        // stand as close to the target as possible, then minimize travel
        std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
            if (a.prox != b.prox) return a.prox < b.prox;
            return a.d != b.d ? a.d < b.d : a.cell < b.cell;
        });
        for (const Candidate& c : cands) {
            for (int yaw : facings(c.cell, inst)) {
                if (visible_from(c.cell, yaw, inst.id)) return std::make_pair(c.cell, yaw);
            }
        }
        return std::nullopt;
    }

    bool walk_to(int cell) {
        auto path = path_to(cell);
        if (!path.has_value()) return false;
        for (int next : *path) {
            int gx = next % room.grid_w, gy = next / room.grid_w;
            int cur = cell_of(agent.pose.x, agent.pose.y);
            int dx = gx - cur % room.grid_w, dy = gy - cur / room.grid_w;
            int yaw = dx == 1 ? 0 : dx == -1 ? 180 : dy == 1 ? 90 : 270;
            rotate_to(yaw);
            if (!act(Action{ActionKind::MoveAhead, {}}).ok()) return false;
        }
        return true;
    }

    bool interact(ActionKind kind, int instance_id) {
        ObservationFrame probe = render(room, agent, cfg);
        auto mask = instance_mask(probe, instance_id);
        bool any = false;
        for (uint8_t m : mask) any = any || m;
        if (!any) return false;
        return act(Action{kind, std::move(mask)}).ok();
    }

    // Nearest live instance of a category by stand-cell distance.
    const ObjectInstance* nearest_instance(int category, bool exclude_held) {
        auto dist = nav_distances();
        const ObjectInstance* best = nullptr;
        int best_d = 1 << 30;
        for (const auto& inst : room.instances) {
            if (inst.category != category) continue;
            if (exclude_held && inst.placement == Placement::Carried) continue;
            int d = 1 << 30;
            for (int gy = std::max(0, inst.gy - cfg.manip_range_cells);
                 gy <= std::min(room.grid_h - 1, inst.gy + cfg.manip_range_cells); ++gy)
                for (int gx = std::max(0, inst.gx - cfg.manip_range_cells);
                     gx <= std::min(room.grid_w - 1, inst.gx + cfg.manip_range_cells); ++gx) {
                    int cell = room.cell_index(gx, gy);
                    if (dist[static_cast<size_t>(cell)] >= 0 && room.cell_free_truth(gx, gy))
                        d = std::min(d, dist[static_cast<size_t>(cell)]);
                }
            int acell = cell_of(agent.pose.x, agent.pose.y);
            if (std::max(std::abs(inst.gx - acell % room.grid_w),
                         std::abs(inst.gy - acell / room.grid_w)) <= cfg.manip_range_cells)
                d = std::min(d, 0);
            if (d < best_d || (d == best_d && best && inst.id < best->id)) {
                best_d = d;
                best = &inst;
            }
        }
        return best;
    }

    bool approach(const ObjectInstance& inst) {
        auto spot = stand_spot(inst);
        if (!spot.has_value()) return false;
        if (!walk_to(spot->first)) return false;
        rotate_to(spot->second);
        return true;
    }

    bool do_pickup(int category) {
        const ObjectInstance* inst = nearest_instance(category, true);
        if (!inst) return false;
        int id = inst->id;
        const ObjectInstance* container =
            inst->placement == Placement::Inside ? room.instance(inst->parent) : nullptr;
        if (container && !container->open) {
            int cid = container->id;
            if (!approach(*room.instance(cid))) return false;
            if (!interact(ActionKind::Open, cid)) return false;
        }
        const ObjectInstance* live = room.instance(id);
        if (!approach(*live)) return false;
        return interact(ActionKind::PickUp, id);
    }

    bool do_put(int category) {
        const ObjectInstance* recep = nearest_instance(category, false);
        if (!recep) return false;
        int id = recep->id;
        if (!approach(*recep)) return false;
        if (category_openable(recep->category) && !room.instance(id)->open) {
            if (!interact(ActionKind::Open, id)) return false;
        }
        return interact(ActionKind::Put, id);
    }

    bool do_heat(int category) {
        const ObjectInstance* mw = nearest_instance(category, false);
        if (!mw || agent.held < 0) return false;
        int held_id = agent.held;
        int id = mw->id;
        if (!approach(*mw)) return false;
        if (!room.instance(id)->open && !interact(ActionKind::Open, id)) return false;
        if (!interact(ActionKind::Put, id)) return false;
        if (!interact(ActionKind::Close, id)) return false;
        if (!interact(ActionKind::ToggleOn, id)) return false;
        if (!interact(ActionKind::ToggleOff, id)) return false;
        if (!interact(ActionKind::Open, id)) return false;
        if (!interact(ActionKind::PickUp, held_id)) return false;
        return interact(ActionKind::Close, id);
    }

    bool do_goto(int category) {
        const ObjectInstance* inst = nearest_instance(category, true);
        if (!inst) return false;
        return approach(*inst);
    }

    bool do_slice(int category) {
        const ObjectInstance* inst = nearest_instance(category, true);
        if (!inst) return false;
        int id = inst->id;
        if (!approach(*inst)) return false;
        return interact(ActionKind::Slice, id);
    }

    bool run_subtask(const SubTask& st) {
        switch (st.verb) {
            case Verb::GotoLocation: return do_goto(st.target);
            case Verb::PickUp: return do_pickup(st.target);
            case Verb::Put: return do_put(st.target);
            case Verb::Slice: return do_slice(st.target);
            case Verb::Heat: return do_heat(st.target);
            default: return false;  // Cool/Clean/Toggle have no desk-scale tasks
        }
    }

    ExpertTrajectory solve() {
        scan();
        for (const SubTask& st : expand_subgoals(task)) {
            // drop the knife before a pickup if it is still in hand
            if (st.verb == Verb::PickUp && agent.held >= 0) {
                if (!do_put(task.receptacle)) return std::move(out);
            }
            if (!run_subtask(st)) return std::move(out);
        }
        act(Action{ActionKind::Stop, {}});
        GoalCheck gc = check_goal_conditions(room, task);
        out.success = gc.met == gc.total;
        return std::move(out);
    }
};

}  // namespace

ExpertTrajectory expert_trajectory(const EpisodeSetup& setup, const WorldConfig& cfg) {
    Solver solver(setup, cfg);
    return solver.solve();
}

EpisodeSetup gen_solvable_episode(uint64_t seed, const WorldConfig& cfg,
                                  ExpertTrajectory* trajectory) {
    for (uint64_t attempt = 0; attempt < 128; ++attempt) {
        EpisodeSetup setup = gen_episode(seed + attempt * 0x632BE59BD9B4E019ULL);
        ExpertTrajectory traj = expert_trajectory(setup, cfg);
        if (traj.success) {
            if (trajectory) *trajectory = std::move(traj);
            return setup;
        }
    }
    throw std::runtime_error("gen_solvable_episode: no solvable episode found");
}

}  // namespace escape
