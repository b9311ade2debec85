#include "escape/policy.hpp"

#include <algorithm>
#include <cmath>
#include <queue>
#include <stdexcept>

namespace escape {

const char* plan_origin_name(PlanOrigin o) {
    switch (o) {
        case PlanOrigin::Exploration: return "exploration";
        case PlanOrigin::GlobalPlanner: return "global_planner";
        case PlanOrigin::Fallback: return "fallback";
    }
    return "?";
}

NavigableMap navigable_map(const std::vector<double>& probs, int grid_h, int grid_w, int categories,
                           int floor_category, double tau) {
    NavigableMap nav;
    nav.h = grid_h;
    nav.w = grid_w;
    nav.free.assign(static_cast<size_t>(grid_h * grid_w), 0);
    for (int cell = 0; cell < grid_h * grid_w; ++cell) {
        const double* p = probs.data() + static_cast<size_t>(cell) * categories;
        bool free = p[floor_category] >= tau;
        for (int k = 0; k < categories && free; ++k)
            if (k != floor_category && p[k] >= tau) free = false;
        nav.free[static_cast<size_t>(cell)] = free ? 1 : 0;
    }
    return nav;
}

namespace {

// N, E, S, W in (row, col) deltas; row 0 is the -y edge.
constexpr int kDr[4] = {-1, 0, 1, 0};
constexpr int kDc[4] = {0, 1, 0, -1};

}  // namespace

std::optional<std::vector<Cell>> bfs_path(const NavigableMap& nav, Cell start,
                                          const std::vector<Cell>& goals) {
    if (goals.empty()) return std::nullopt;
    std::vector<uint8_t> is_goal(static_cast<size_t>(nav.h * nav.w), 0);
    for (const Cell& g : goals) {
        if (g.row < 0 || g.row >= nav.h || g.col < 0 || g.col >= nav.w) continue;
        is_goal[static_cast<size_t>(g.row * nav.w + g.col)] = 1;
    }
    if (is_goal[static_cast<size_t>(start.row * nav.w + start.col)]) return std::vector<Cell>{};

    std::vector<int> parent(static_cast<size_t>(nav.h * nav.w), -1);
    std::vector<int> dist(static_cast<size_t>(nav.h * nav.w), -1);
    std::queue<int> queue;
    int start_idx = start.row * nav.w + start.col;
    dist[static_cast<size_t>(start_idx)] = 0;
    queue.push(start_idx);

    int best_goal = -1, best_dist = -1;
    while (!queue.empty()) {
        int cur = queue.front();
        queue.pop();
        int row = cur / nav.w, col = cur % nav.w;
        if (best_dist >= 0 && dist[static_cast<size_t>(cur)] > best_dist) break;
        if (is_goal[static_cast<size_t>(cur)]) {
            // among equal-distance goals pick the lowest (row, col)
            if (best_goal < 0 || cur < best_goal) {
                best_goal = cur;
                best_dist = dist[static_cast<size_t>(cur)];
            }
            continue;
        }
        for (int k = 0; k < 4; ++k) {
            int nr = row + kDr[k], nc = col + kDc[k];
            if (nr < 0 || nr >= nav.h || nc < 0 || nc >= nav.w) continue;
            int ni = nr * nav.w + nc;
            if (dist[static_cast<size_t>(ni)] >= 0) continue;
            if (!nav.free[static_cast<size_t>(ni)]) continue;
            dist[static_cast<size_t>(ni)] = dist[static_cast<size_t>(cur)] + 1;
            parent[static_cast<size_t>(ni)] = cur;
            queue.push(ni);
        }
    }
    if (best_goal < 0) return std::nullopt;

    std::vector<Cell> path;
    for (int cur = best_goal; cur != start_idx; cur = parent[static_cast<size_t>(cur)])
        path.push_back(Cell{cur / nav.w, cur % nav.w});
    std::reverse(path.begin(), path.end());
    return path;
}

std::optional<Cell> explore_target(const NavigableMap& nav, Cell agent, Rng& rng) {
    // flood fill the reachable free component from the agent
    std::vector<uint8_t> seen(static_cast<size_t>(nav.h * nav.w), 0);
    std::vector<int> stack{agent.row * nav.w + agent.col};
    seen[static_cast<size_t>(stack[0])] = 1;
    std::vector<int> reachable;
    while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        if (nav.free[static_cast<size_t>(cur)]) reachable.push_back(cur);
        int row = cur / nav.w, col = cur % nav.w;
        for (int k = 0; k < 4; ++k) {
            int nr = row + kDr[k], nc = col + kDc[k];
            if (nr < 0 || nr >= nav.h || nc < 0 || nc >= nav.w) continue;
            int ni = nr * nav.w + nc;
            if (!seen[static_cast<size_t>(ni)] && nav.free[static_cast<size_t>(ni)]) {
                seen[static_cast<size_t>(ni)] = 1;
                stack.push_back(ni);
            }
        }
    }
    std::sort(reachable.begin(), reachable.end());
    if (reachable.empty()) return std::nullopt;
    int pick = reachable[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(reachable.size())))];
    return Cell{pick / nav.w, pick % nav.w};
}

GlobalPlanResult global_plan(const std::vector<double>& probs, int grid_h, int grid_w,
                             int categories, const NavigableMap& nav, int target_category,
                             Cell agent, const SubTask& goal, double tau, int radius_cells,
                             const std::set<Cell>& excluded_targets) {
    GlobalPlanResult result;
    double best = -1.0;
    Cell target{-1, -1};
    for (int row = 0; row < grid_h; ++row)
        for (int col = 0; col < grid_w; ++col) {
            if (excluded_targets.count(Cell{row, col})) continue;
            double p = probs[static_cast<size_t>((row * grid_w + col) * categories + target_category)];
            if (p > best + 1e-12) {  // lexicographic tie-break via scan order
                best = p;
                target = Cell{row, col};
            }
        }
    if (target.row < 0 || best < tau) {
        result.status = PlanStatus::NotFound;
        return result;
    }

    std::vector<Cell> goals;
    for (int row = std::max(0, target.row - radius_cells);
         row <= std::min(grid_h - 1, target.row + radius_cells); ++row)
        for (int col = std::max(0, target.col - radius_cells);
             col <= std::min(grid_w - 1, target.col + radius_cells); ++col)
            if (nav.is_free(row, col) || (Cell{row, col} == agent)) goals.push_back(Cell{row, col});

    auto path = bfs_path(nav, agent, goals);
    if (!path.has_value()) {
        result.status = PlanStatus::Unreachable;
        return result;
    }
    result.status = PlanStatus::Ok;
    result.plan.waypoints = std::move(*path);
    result.plan.target_cell = target;
    result.plan.goal = goal;
    result.plan.origin = PlanOrigin::GlobalPlanner;
    return result;
}

PolicyState::PolicyState(std::vector<SubTask> subtasks, PolicyConfig cfg, uint64_t rng_seed)
    : cfg_(cfg), pending_(subtasks.begin(), subtasks.end()), rng_(rng_seed) {}

Cell PolicyState::agent_cell(const AgentPose& pose) const {
    return Cell{static_cast<int>(std::floor(pose.y / cfg_.grid_res)),
                static_cast<int>(std::floor(pose.x / cfg_.grid_res))};
}

NavigableMap PolicyState::belief_nav(const PolicyInputs& in, Cell agent) const {
    NavigableMap nav = navigable_map(*in.map_probs, in.grid_h, in.grid_w, in.categories, CatFloor, cfg_.tau);
    for (const Cell& b : blocked_)
        if (b.row >= 0 && b.row < nav.h && b.col >= 0 && b.col < nav.w)
            nav.free[static_cast<size_t>(b.row * nav.w + b.col)] = 0;
    nav.free[static_cast<size_t>(agent.row * nav.w + agent.col)] = 1;  // own cell is always standable
    return nav;
}

void PolicyState::begin_script(const SubTask& st) {
    script_.clear();
    switch (st.verb) {
        case Verb::PickUp:
            script_.push_back({ActionKind::PickUp, st.target});
            break;
        case Verb::Put:
            if (category_openable(st.target)) script_.push_back({ActionKind::Open, st.target});
            script_.push_back({ActionKind::Put, st.target});
            break;
        case Verb::Slice:
            script_.push_back({ActionKind::Slice, st.target});
            break;
        case Verb::Toggle:
            script_.push_back({ActionKind::ToggleOn, st.target});
            break;
        case Verb::Heat:
            script_.push_back({ActionKind::Open, st.target});
            script_.push_back({ActionKind::Put, st.target});
            script_.push_back({ActionKind::Close, st.target});
            script_.push_back({ActionKind::ToggleOn, st.target});
            script_.push_back({ActionKind::ToggleOff, st.target});
            script_.push_back({ActionKind::Open, st.target});
            script_.push_back({ActionKind::PickUp, held_category_});
            script_.push_back({ActionKind::Close, st.target});
            break;
        case Verb::Cool:
        case Verb::Clean:
        case Verb::GotoLocation:
            // GotoLocation completes via the monitor; Cool/Clean have no
            // desk-scale targets and fall back to navigation-only behavior.
            break;
    }
    plan_.reset();  // preemption discards the remaining waypoints
}

void PolicyState::advance_subtask() {
    if (!pending_.empty()) pending_.pop_front();
    plan_.reset();
    script_.clear();
    scan_rotations_left_ = 0;
}

std::optional<Action> PolicyState::navigation_toward(const PolicyInputs& in, Cell agent) {
    if (!plan_.has_value()) return std::nullopt;
    auto& wps = plan_->waypoints;
    while (!wps.empty() && wps.front() == agent) wps.erase(wps.begin());
    if (wps.empty()) return std::nullopt;
    Cell next = wps.front();
    // replan if the believed map no longer allows the next hop
    NavigableMap nav = belief_nav(in, agent);
    if (!nav.is_free(next.row, next.col)) {
        plan_.reset();
        return std::nullopt;
    }
    int dr = next.row - agent.row, dc = next.col - agent.col;
    if (std::abs(dr) + std::abs(dc) != 1) {  // stale plan, not adjacent anymore
        plan_.reset();
        return std::nullopt;
    }
    int desired = dc == 1 ? 0 : dc == -1 ? 180 : dr == 1 ? 90 : 270;
    int diff = (desired - in.pose.yaw_deg + 360) % 360;
    if (diff == 0) return Action{ActionKind::MoveAhead, {}};
    if (diff == 90) return Action{ActionKind::RotateLeft, {}};
    return Action{ActionKind::RotateRight, {}};  // 180 and 270 both turn right
}

PolicyDecision PolicyState::next_action(const PolicyInputs& in) {
    if (done() || stop_emitted_) {
        stop_emitted_ = true;
        return {Action{ActionKind::Stop, {}}, PlanOrigin::GlobalPlanner};
    }
    Cell agent = agent_cell(in.pose);
    const auto& bits = *in.monitor_bits;

    // auto-complete GotoLocation sub-tasks once the target is in range
    while (!pending_.empty() && script_.empty() && pending_.front().verb == Verb::GotoLocation &&
           bits[static_cast<size_t>(pending_.front().target)]) {
        advance_subtask();
    }
    if (pending_.empty() && script_.empty()) {
        stop_emitted_ = true;
        return {Action{ActionKind::Stop, {}}, PlanOrigin::GlobalPlanner};
    }

    // (1a) a started interaction script continues to completion
    if (!script_.empty()) {
        const ScriptStep& step = script_.front();
        auto mask = in.mask_for(step.mask_category);
        if (mask.has_value()) return {Action{step.kind, std::move(*mask)}, PlanOrigin::GlobalPlanner};
        script_.clear();  // grounding lost the target: hierarchical fallback
        plan_.reset();
    }

    SubTask st = pending_.front();

    // held-hands recovery: a PickUp sub-task cannot start while something is
    // held (knife after slicing); drop it on the task receptacle first
    if (st.verb == Verb::PickUp && held_category_ >= 0) {
        for (const SubTask& later : pending_) {
            if (later.verb == Verb::Put) {
                pending_.push_front(SubTask{Verb::Put, later.target});
                st = pending_.front();
                break;
            }
        }
    }

    // (1b) reactive preemption: monitor bit plus an available mask
    bool verb_ready = st.verb != Verb::PickUp || held_category_ < 0;
    bool plan_exhausted = !plan_.has_value() || plan_->waypoints.empty();
    bool may_interact = cfg_.use_aep || plan_exhausted;
    if (st.verb != Verb::GotoLocation && may_interact && verb_ready &&
        bits[static_cast<size_t>(st.target)]) {
        auto mask = in.mask_for(st.target);
        if (mask.has_value()) {
            begin_script(st);
            if (!script_.empty()) {
                const ScriptStep& step = script_.front();
                auto m2 = step.mask_category == st.target ? std::move(mask) : in.mask_for(step.mask_category);
                if (m2.has_value()) return {Action{step.kind, std::move(*m2)}, PlanOrigin::GlobalPlanner};
                script_.clear();
            }
        }
    }

    // (2) follow the active plan
    if (auto nav_action = navigation_toward(in, agent)) {
        scan_rotations_left_ = 0;
        return {std::move(*nav_action), plan_->origin};
    }

    // plan exhausted but no interaction fired: rescan on the spot, then
    // disbelieve the target cell
    if (plan_.has_value() && plan_->waypoints.empty()) {
        if (scan_rotations_left_ == 0 && plan_->origin == PlanOrigin::GlobalPlanner) {
            scan_rotations_left_ = 3;
            return {Action{ActionKind::RotateRight, {}}, PlanOrigin::Fallback};
        }
        if (scan_rotations_left_ > 0) {
            --scan_rotations_left_;
            if (scan_rotations_left_ > 0)
                return {Action{ActionKind::RotateRight, {}}, PlanOrigin::Fallback};
        }
        if (plan_->origin == PlanOrigin::GlobalPlanner) disproved_.insert(plan_->target_cell);
        plan_.reset();
    }

    NavigableMap nav = belief_nav(in, agent);

    // (3) target located in the map: proactive global plan
    auto global = global_plan(*in.map_probs, in.grid_h, in.grid_w, in.categories, nav, st.target,
                              agent, st, cfg_.tau, cfg_.goal_radius_cells, disproved_);
    if (global.status == PlanStatus::Ok) {
        plan_ = std::move(global.plan);
        if (auto nav_action = navigation_toward(in, agent))
            return {std::move(*nav_action), plan_->origin};
        // already inside the goal region: rescan
        scan_rotations_left_ = 3;
        return {Action{ActionKind::RotateRight, {}}, PlanOrigin::Fallback};
    }

    // (4) random exploration over reachable navigable cells
    if (auto target = explore_target(nav, agent, rng_)) {
        auto path = bfs_path(nav, agent, {*target});
        if (path.has_value() && !path->empty()) {
            plan_ = Plan{std::move(*path), *target, st, PlanOrigin::Exploration};
            if (auto nav_action = navigation_toward(in, agent))
                return {std::move(*nav_action), PlanOrigin::Exploration};
        }
    }
    // nothing reachable: rotate in place to refresh the memory
    return {Action{ActionKind::RotateRight, {}}, PlanOrigin::Fallback};
}

void PolicyState::observe_outcome(const Action& action, const Outcome& outcome,
                                  const AgentPose& pose) {
    if (action.kind == ActionKind::MoveAhead && outcome.kind == OutcomeKind::Collision) {
        AgentPose ahead = moved_ahead(pose, cfg_.grid_res);
        blocked_.insert(agent_cell(ahead));
        plan_.reset();
        return;
    }
    if (!action_is_interaction(action.kind) || script_.empty()) return;

    const ScriptStep& step = script_.front();
    if (step.kind != action.kind) return;
    if (outcome.ok()) {
        if (action.kind == ActionKind::PickUp) held_category_ = step.mask_category;
        if (action.kind == ActionKind::Put) held_category_ = -1;
        script_.pop_front();
        if (script_.empty()) advance_subtask();
        return;
    }
    // redundant open/close/toggle states are skipped, real failures abort
    if (outcome.reason.rfind("already_", 0) == 0) {
        script_.pop_front();
        if (script_.empty()) advance_subtask();
        return;
    }
    script_.clear();
    plan_.reset();  // hierarchical fallback replans from scratch
}

}  // namespace escape
