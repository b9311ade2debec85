#pragma once

#include <deque>
#include <functional>
#include <optional>
#include <set>
#include <vector>

#include "escape/microworld.hpp"
#include "escape/rng.hpp"

namespace escape {

struct NavigableMap {
    int h = 0, w = 0;
    std::vector<uint8_t> free;
    bool is_free(int row, int col) const {
        return row >= 0 && row < h && col >= 0 && col < w && free[static_cast<size_t>(row * w + col)] != 0;
    }
};

// A cell is navigable iff the thresholded map shows floor and nothing else.
NavigableMap navigable_map(const std::vector<double>& probs, int grid_h, int grid_w, int categories,
                           int floor_category, double tau);

struct Cell {
    int row = 0, col = 0;
    bool operator==(const Cell&) const = default;
    auto operator<=>(const Cell&) const = default;
};

// Shortest 4-connected path from start to the nearest goal. Neighbors expand
// in N,E,S,W order; among equal-distance goals the lowest (row,col) wins. The
// start cell is treated as free. Returns the waypoints excluding the start
// (empty when already at a goal) or nullopt when no goal is reachable.
std::optional<std::vector<Cell>> bfs_path(const NavigableMap& nav, Cell start,
                                          const std::vector<Cell>& goals);

// Uniform draw over the free cells reachable from the agent.
std::optional<Cell> explore_target(const NavigableMap& nav, Cell agent, Rng& rng);

enum class PlanOrigin { Exploration, GlobalPlanner, Fallback };
const char* plan_origin_name(PlanOrigin o);

struct Plan {
    std::vector<Cell> waypoints;
    Cell target_cell;
    SubTask goal;
    PlanOrigin origin = PlanOrigin::GlobalPlanner;
};

enum class PlanStatus { Ok, NotFound, Unreachable };

struct GlobalPlanResult {
    PlanStatus status = PlanStatus::NotFound;
    Plan plan;
};

// Highest-probability cell of the target category (threshold tau, lexicographic
// tie-break), goal set = free cells within the Chebyshev radius, BFS route.
GlobalPlanResult global_plan(const std::vector<double>& probs, int grid_h, int grid_w,
                             int categories, const NavigableMap& nav, int target_category,
                             Cell agent, const SubTask& goal, double tau, int radius_cells,
                             const std::set<Cell>& excluded_targets = {});

struct PolicyConfig {
    double tau = 0.5;
    int goal_radius_cells = 4;  // 1 m at 0.25 m cells
    int image_size = 64;
    double grid_res = 0.25;
    bool use_aep = true;  // reactive preemption on; off reproduces the no-AEP ablation
};

// Per-step inputs assembled by the episode runner.
struct PolicyInputs {
    AgentPose pose;
    const std::vector<double>* map_probs = nullptr;  // [H*W*K]
    int grid_h = 0, grid_w = 0, categories = 0;
    const std::vector<uint8_t>* monitor_bits = nullptr;  // [K]
    // Non-empty binary interaction mask for a category, or nullopt when
    // grounding has no mask available.
    std::function<std::optional<std::vector<uint8_t>>(int category)> mask_for;
};

struct PolicyDecision {
    Action action;
    PlanOrigin origin = PlanOrigin::Exploration;
};

// The per-episode execution state: pending sub-tasks, active plan, running
// interaction script, collision belief, and the exploration stream.
class PolicyState {
public:
    PolicyState(std::vector<SubTask> subtasks, PolicyConfig cfg, uint64_t rng_seed);

    PolicyDecision next_action(const PolicyInputs& in);
    // Must be called with the pose the action was issued from.
    void observe_outcome(const Action& action, const Outcome& outcome, const AgentPose& pose);

    bool done() const { return pending_.empty() && script_.empty(); }
    size_t subtasks_remaining() const { return pending_.size(); }
    const std::optional<Plan>& plan() const { return plan_; }
    const std::set<Cell>& blocked() const { return blocked_; }
    int held_category() const { return held_category_; }

private:
    struct ScriptStep {
        ActionKind kind;
        int mask_category;
    };

    Cell agent_cell(const AgentPose& pose) const;
    void begin_script(const SubTask& st);
    void advance_subtask();
    NavigableMap belief_nav(const PolicyInputs& in, Cell agent) const;
    std::optional<Action> navigation_toward(const PolicyInputs& in, Cell agent);

    PolicyConfig cfg_;
    std::deque<SubTask> pending_;
    std::deque<ScriptStep> script_;
    std::optional<Plan> plan_;
    std::set<Cell> blocked_;       // collision belief, monotone for the episode
    std::set<Cell> disproved_;     // planned targets that were not actually there
    Rng rng_;
    int held_category_ = -1;
    int scan_rotations_left_ = 0;  // on-the-spot rescan after an exhausted plan
    bool stop_emitted_ = false;
};

}  // namespace escape
