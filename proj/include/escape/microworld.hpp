#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "escape/geometry.hpp"
#include "escape/rng.hpp"

namespace escape {

// Desk-scale category set: floor, wall, and eight object types. Table and
// shelf are open-top surfaces; microwave and bin are openable containers.
inline constexpr int kNumCategories = 10;
enum Category : int {
    CatFloor = 0,
    CatWall = 1,
    CatTable = 2,
    CatShelf = 3,
    CatMicrowave = 4,
    CatBin = 5,
    CatApple = 6,
    CatEgg = 7,
    CatKnife = 8,
    CatCd = 9,
};

const char* category_name(int cat);
int category_from_name(const std::string& name);
bool category_pickupable(int cat);
bool category_receptacle(int cat);
bool category_surface(int cat);
bool category_openable(int cat);
bool category_toggleable(int cat);
bool category_sliceable(int cat);
bool category_heatable(int cat);

enum class Placement { OnFloor, OnSurface, Inside, Carried };

// Height intervals used by the renderer; the pillar sampler's bin centers
// intersect all of them.
inline constexpr double kWallHeight = 1.8;
inline constexpr double kSurfaceHeight = 0.6;
inline constexpr double kContainerHeight = 0.9;

struct ObjectInstance {
    int id = -1;
    int category = CatApple;
    int gx = 0, gy = 0;
    double z0 = 0.0, z1 = 0.45;
    Placement placement = Placement::OnFloor;
    int parent = -1;  // instance id when OnSurface / Inside
    int slot = 0;     // sub-cell quadrant for placed objects, keeps stacked items visible
    bool heated = false, cooled = false, cleaned = false, sliced = false;
    bool open = false, toggled = false;
};

struct Room {
    int grid_h = 20, grid_w = 20;
    double grid_res = 0.25;
    std::vector<uint8_t> wall;  // grid_h * grid_w, row-major (gy outer)
    std::vector<ObjectInstance> instances;
    uint64_t seed = 0;

    int cell_index(int gx, int gy) const { return gy * grid_w + gx; }
    bool in_bounds(int gx, int gy) const {
        return gx >= 0 && gx < grid_w && gy >= 0 && gy < grid_h;
    }
    bool is_wall(int gx, int gy) const { return wall[static_cast<size_t>(cell_index(gx, gy))] != 0; }
    const ObjectInstance* instance(int id) const;
    ObjectInstance* instance(int id);
    // Inside a closed container, or carried by the agent.
    bool instance_hidden(const ObjectInstance& inst) const;
    // True navigability: no wall and no grounded instance in the cell.
    bool cell_free_truth(int gx, int gy) const;
    std::vector<uint8_t> navigable_truth() const;
    // Observable multi-hot for a cell (hidden contents excluded).
    std::vector<uint8_t> true_cell_multihot(int gx, int gy) const;
    bool structurally_equal(const Room& other) const;
};

struct AgentState {
    AgentPose pose;
    int held = -1;  // instance id
};

enum class ActionKind {
    MoveAhead,
    RotateRight,
    RotateLeft,
    LookUp,
    LookDown,
    PickUp,
    Put,
    Open,
    Close,
    ToggleOn,
    ToggleOff,
    Slice,
    Stop,
};

const char* action_name(ActionKind kind);
bool action_is_navigation(ActionKind kind);
bool action_is_interaction(ActionKind kind);

struct Action {
    ActionKind kind = ActionKind::Stop;
    std::vector<uint8_t> mask;  // image_size^2, interactions only
};

enum class OutcomeKind { Ok, Collision, InteractionFailed };

struct Outcome {
    OutcomeKind kind = OutcomeKind::Ok;
    std::string reason;
    bool ok() const { return kind == OutcomeKind::Ok; }
};

struct WorldConfig {
    int image_size = 64;
    double fov_deg = 60.0;
    double camera_height = 1.5;
    double step_m = 0.25;
    int manip_range_cells = 6;       // 1.5 m at 0.25 m cells
    double mask_overlap_min = 0.30;  // of the instance's rendered pixels
    int scan_rotations = 4;
};

// Sentinel pixel values for the per-pixel instance image.
inline constexpr int16_t kPixelNone = -1;
inline constexpr int16_t kPixelFloor = -2;
inline constexpr int16_t kPixelWall = -3;
inline constexpr uint8_t kSemanticNone = 255;

struct ObservationFrame {
    std::vector<uint8_t> semantic;  // category id per pixel, 255 = background
    std::vector<int16_t> instance;  // instance id per pixel, or sentinel
    std::vector<int16_t> cell;      // grid cell index the pixel ray hit, -1 = none
    AgentPose pose;
    CameraProjection projection;
    int t = 0;
};

// Semantic raycast through the cell-box world; painter's order comes from the
// nearest ray hit. Contents of closed containers and the carried object are
// not rendered.
ObservationFrame render(const Room& room, const AgentState& agent, const WorldConfig& cfg, int t = 0);

// Applies one action. MoveAhead into a blocked cell reports a collision and
// leaves the pose unchanged; interactions resolve the mask to the instance
// owning the plurality of masked pixels (minimum overlap applies) and then
// check the action's preconditions. State transitions are atomic.
Outcome step_env(Room& room, AgentState& agent, const Action& action, const WorldConfig& cfg);

// --- tasks -------------------------------------------------------------

enum class TaskType { PickPlace, PlaceTwo, HeatPlace };
const char* task_type_name(TaskType t);

struct TaskSpec {
    TaskType type = TaskType::PickPlace;
    int object_target = CatApple;
    int receptacle = CatTable;
    int movable_receptacle = -1;  // unused by the desk-scale task types
    bool slice = false;
};

enum class Verb { GotoLocation, PickUp, Put, Slice, Toggle, Heat, Cool, Clean };
const char* verb_name(Verb v);

struct SubTask {
    Verb verb = Verb::PickUp;
    int target = CatApple;
};

// Template expansion per task type; the slice flag prepends
// (PickUp knife, Slice object).
std::vector<SubTask> expand_subgoals(const TaskSpec& task);

struct GoalCheck {
    int met = 0;
    int total = 0;
};

GoalCheck check_goal_conditions(const Room& room, const TaskSpec& task);

// Oracle manipulability: bit k set iff some interaction on a visible,
// in-range instance of category k would succeed in the current state.
std::vector<uint8_t> true_manipulability(const Room& room, const AgentState& agent,
                                         const ObservationFrame& frame, const WorldConfig& cfg);

bool instance_in_range(const Room& room, const AgentState& agent, const ObjectInstance& inst,
                       const WorldConfig& cfg);

// --- generation ---------------------------------------------------------

struct EpisodeSetup {
    Room room;
    TaskSpec task;
    AgentState agent;
};

// Deterministic procedural room: border walls, optional interior wall stubs,
// 2-5 receptacles, 3-10 objects, connected free space.
Room gen_room(uint64_t seed);

// Room plus a solvable task and a start pose.
EpisodeSetup gen_episode(uint64_t seed);

std::vector<uint8_t> instance_mask(const ObservationFrame& frame, int instance_id);
std::vector<uint8_t> category_mask(const ObservationFrame& frame, int category);

}  // namespace escape
