#include "escape/microworld.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <stdexcept>
#include <unordered_map>

namespace escape {

namespace {

const char* kCategoryNames[kNumCategories] = {
    "floor", "wall", "table", "shelf", "microwave", "bin", "apple", "egg", "knife", "cd",
};

// z interval for a freshly placed object by placement kind.
void place_height(ObjectInstance& inst) {
    switch (inst.placement) {
        case Placement::OnFloor:
            inst.z0 = 0.0;
            inst.z1 = 0.45;
            break;
        case Placement::OnSurface:
            inst.z0 = kSurfaceHeight;
            inst.z1 = kSurfaceHeight + 0.45;
            break;
        case Placement::Inside:
            inst.z0 = kContainerHeight / 2.0;
            inst.z1 = kContainerHeight;
            break;
        case Placement::Carried:
            inst.z0 = inst.z1 = 0.0;
            break;
    }
}

}  // namespace

const char* category_name(int cat) {
    if (cat < 0 || cat >= kNumCategories) throw std::invalid_argument("category_name: bad category");
    return kCategoryNames[cat];
}

int category_from_name(const std::string& name) {
    for (int i = 0; i < kNumCategories; ++i)
        if (name == kCategoryNames[i]) return i;
    throw std::invalid_argument("category_from_name: unknown category '" + name + "'");
}

bool category_pickupable(int cat) {
    return cat == CatApple || cat == CatEgg || cat == CatKnife || cat == CatCd;
}
bool category_receptacle(int cat) {
    return cat == CatTable || cat == CatShelf || cat == CatMicrowave || cat == CatBin;
}
bool category_surface(int cat) { return cat == CatTable || cat == CatShelf; }
bool category_openable(int cat) { return cat == CatMicrowave || cat == CatBin; }
bool category_toggleable(int cat) { return cat == CatMicrowave; }
bool category_sliceable(int cat) { return cat == CatApple; }
bool category_heatable(int cat) { return cat == CatApple || cat == CatEgg; }

const ObjectInstance* Room::instance(int id) const {
    for (const auto& inst : instances)
        if (inst.id == id) return &inst;
    return nullptr;
}

ObjectInstance* Room::instance(int id) {
    for (auto& inst : instances)
        if (inst.id == id) return &inst;
    return nullptr;
}

bool Room::instance_hidden(const ObjectInstance& inst) const {
    if (inst.placement == Placement::Carried) return true;
    if (inst.placement == Placement::Inside) {
        const ObjectInstance* parent = instance(inst.parent);
        return parent == nullptr || !parent->open;
    }
    return false;
}

bool Room::cell_free_truth(int gx, int gy) const {
    if (!in_bounds(gx, gy) || is_wall(gx, gy)) return false;
    for (const auto& inst : instances) {
        if (inst.placement == Placement::Carried) continue;
        if (inst.gx != gx || inst.gy != gy) continue;
        if (category_receptacle(inst.category) || inst.placement == Placement::OnFloor) return false;
    }
    return true;
}

std::vector<uint8_t> Room::navigable_truth() const {
    std::vector<uint8_t> out(static_cast<size_t>(grid_h * grid_w), 0);
    for (int gy = 0; gy < grid_h; ++gy)
        for (int gx = 0; gx < grid_w; ++gx)
            out[static_cast<size_t>(cell_index(gx, gy))] = cell_free_truth(gx, gy) ? 1 : 0;
    return out;
}

std::vector<uint8_t> Room::true_cell_multihot(int gx, int gy) const {
    std::vector<uint8_t> out(kNumCategories, 0);
    if (!in_bounds(gx, gy)) return out;
    if (is_wall(gx, gy)) {
        out[CatWall] = 1;
        return out;
    }
    out[CatFloor] = 1;
    for (const auto& inst : instances) {
        if (inst.gx == gx && inst.gy == gy && !instance_hidden(inst)) out[inst.category] = 1;
    }
    return out;
}

bool Room::structurally_equal(const Room& other) const {
    if (grid_h != other.grid_h || grid_w != other.grid_w || grid_res != other.grid_res) return false;
    if (wall != other.wall || instances.size() != other.instances.size()) return false;
    for (size_t i = 0; i < instances.size(); ++i) {
        const auto& a = instances[i];
        const auto& b = other.instances[i];
        if (a.id != b.id || a.category != b.category || a.gx != b.gx || a.gy != b.gy ||
            a.placement != b.placement || a.parent != b.parent || a.open != b.open ||
            a.slot != b.slot || a.z0 != b.z0 || a.z1 != b.z1)
            return false;
    }
    return true;
}

const char* action_name(ActionKind kind) {
    switch (kind) {
        case ActionKind::MoveAhead: return "MoveAhead";
        case ActionKind::RotateRight: return "RotateRight";
        case ActionKind::RotateLeft: return "RotateLeft";
        case ActionKind::LookUp: return "LookUp";
        case ActionKind::LookDown: return "LookDown";
        case ActionKind::PickUp: return "PickUp";
        case ActionKind::Put: return "Put";
        case ActionKind::Open: return "Open";
        case ActionKind::Close: return "Close";
        case ActionKind::ToggleOn: return "ToggleOn";
        case ActionKind::ToggleOff: return "ToggleOff";
        case ActionKind::Slice: return "Slice";
        case ActionKind::Stop: return "Stop";
    }
    return "?";
}

bool action_is_navigation(ActionKind kind) {
    switch (kind) {
        case ActionKind::MoveAhead:
        case ActionKind::RotateRight:
        case ActionKind::RotateLeft:
        case ActionKind::LookUp:
        case ActionKind::LookDown: return true;
        default: return false;
    }
}

bool action_is_interaction(ActionKind kind) {
    return !action_is_navigation(kind) && kind != ActionKind::Stop;
}

namespace {

struct AgentCell {
    int gx, gy;
};

AgentCell agent_cell(const Room& room, const AgentState& agent) {
    return AgentCell{static_cast<int>(std::floor(agent.pose.x / room.grid_res)),
                     static_cast<int>(std::floor(agent.pose.y / room.grid_res))};
}

// Resolves an interaction mask to an instance id: plurality of masked pixels,
// minimum fractional overlap with the instance's rendered pixels.
struct MaskResolution {
    int instance_id = -1;
    std::string failure;  // empty on success
};

MaskResolution resolve_mask(const Room& room, const ObservationFrame& frame,
                            const std::vector<uint8_t>& mask, const WorldConfig& cfg) {
    if (mask.size() != frame.instance.size()) return {-1, "malformed_mask"};
    std::unordered_map<int, int> masked_count;
    std::unordered_map<int, int> total_count;
    for (size_t i = 0; i < mask.size(); ++i) {
        int16_t id = frame.instance[i];
        if (id < 0) continue;
        ++total_count[id];
        if (mask[i]) ++masked_count[id];
    }
    if (masked_count.empty()) return {-1, "no_target"};
    int best = -1, best_count = 0;
    for (const auto& [id, count] : masked_count) {
        if (count > best_count || (count == best_count && (best == -1 || id < best))) {
            best = id;
            best_count = count;
        }
    }
    int total = total_count[best];
    if (total <= 0 || static_cast<double>(best_count) < cfg.mask_overlap_min * total)
        return {-1, "ambiguous"};
    if (!room.instance(best)) return {-1, "no_target"};
    return {best, ""};
}

Outcome fail(const std::string& reason) {
    return Outcome{OutcomeKind::InteractionFailed, reason};
}

}  // namespace

bool instance_in_range(const Room& room, const AgentState& agent, const ObjectInstance& inst,
                       const WorldConfig& cfg) {
    AgentCell c = agent_cell(room, agent);
    int d = std::max(std::abs(inst.gx - c.gx), std::abs(inst.gy - c.gy));
    return d <= cfg.manip_range_cells;
}

Outcome step_env(Room& room, AgentState& agent, const Action& action, const WorldConfig& cfg) {
    switch (action.kind) {
        case ActionKind::MoveAhead: {
            AgentPose next = moved_ahead(agent.pose, cfg.step_m);
            int gx = static_cast<int>(std::floor(next.x / room.grid_res));
            int gy = static_cast<int>(std::floor(next.y / room.grid_res));
            if (!room.cell_free_truth(gx, gy)) return Outcome{OutcomeKind::Collision, "blocked"};
            agent.pose = next;
            return {};
        }
        case ActionKind::RotateRight:
            agent.pose = rotated_right(agent.pose);
            return {};
        case ActionKind::RotateLeft:
            agent.pose = rotated_left(agent.pose);
            return {};
        case ActionKind::LookUp: {
            auto t = tilted(agent.pose, -kTiltStepDeg);
            if (!t) return fail("tilt_limit");
            agent.pose = *t;
            return {};
        }
        case ActionKind::LookDown: {
            auto t = tilted(agent.pose, kTiltStepDeg);
            if (!t) return fail("tilt_limit");
            agent.pose = *t;
            return {};
        }
        case ActionKind::Stop:
            return {};
        default:
            break;
    }

    // Interactions: resolve the mask against the authoritative current frame.
    ObservationFrame frame = render(room, agent, cfg);
    MaskResolution res = resolve_mask(room, frame, action.mask, cfg);
    if (res.instance_id < 0) {
        if (res.failure == "malformed_mask") throw std::invalid_argument("step_env: malformed mask");
        return fail(res.failure);
    }
    ObjectInstance* target = room.instance(res.instance_id);
    if (!instance_in_range(room, agent, *target, cfg)) return fail("out_of_range");

    switch (action.kind) {
        case ActionKind::PickUp: {
            if (!category_pickupable(target->category)) return fail("not_pickupable");
            if (agent.held >= 0) return fail("hands_full");
            target->placement = Placement::Carried;
            target->parent = -1;
            place_height(*target);
            agent.held = target->id;
            return {};
        }
        case ActionKind::Put: {
            if (agent.held < 0) return fail("nothing_held");
            if (!category_receptacle(target->category)) return fail("not_receptacle");
            if (category_openable(target->category) && !target->open) return fail("closed");
            ObjectInstance* held = room.instance(agent.held);
            int children = 0;
            for (const auto& inst : room.instances)
                if (inst.parent == target->id && inst.placement != Placement::Carried) ++children;
            held->gx = target->gx;
            held->gy = target->gy;
            held->parent = target->id;
            held->slot = children % 4;
            held->placement = category_surface(target->category) ? Placement::OnSurface : Placement::Inside;
            place_height(*held);
            agent.held = -1;
            return {};
        }
        case ActionKind::Open: {
            if (!category_openable(target->category)) return fail("not_openable");
            if (target->open) return fail("already_open");
            target->open = true;
            return {};
        }
        case ActionKind::Close: {
            if (!category_openable(target->category)) return fail("not_openable");
            if (!target->open) return fail("already_closed");
            target->open = false;
            return {};
        }
        case ActionKind::ToggleOn: {
            if (!category_toggleable(target->category)) return fail("not_toggleable");
            if (target->toggled) return fail("already_on");
            if (target->open) return fail("open_while_toggling");
            target->toggled = true;
            // A closed, running microwave heats its contents.
            for (auto& inst : room.instances)
                if (inst.placement == Placement::Inside && inst.parent == target->id) inst.heated = true;
            return {};
        }
        case ActionKind::ToggleOff: {
            if (!category_toggleable(target->category)) return fail("not_toggleable");
            if (!target->toggled) return fail("already_off");
            target->toggled = false;
            return {};
        }
        case ActionKind::Slice: {
            if (!category_sliceable(target->category)) return fail("not_sliceable");
            const ObjectInstance* held = agent.held >= 0 ? room.instance(agent.held) : nullptr;
            if (!held || held->category != CatKnife) return fail("no_knife");
            if (target->sliced) return fail("already_sliced");
            target->sliced = true;
            return {};
        }
        default:
            return fail("bad_action");
    }
}

const char* task_type_name(TaskType t) {
    switch (t) {
        case TaskType::PickPlace: return "pick_place";
        case TaskType::PlaceTwo: return "place_two";
        case TaskType::HeatPlace: return "heat_place";
    }
    return "?";
}

const char* verb_name(Verb v) {
    switch (v) {
        case Verb::GotoLocation: return "GotoLocation";
        case Verb::PickUp: return "PickUp";
        case Verb::Put: return "Put";
        case Verb::Slice: return "Slice";
        case Verb::Toggle: return "Toggle";
        case Verb::Heat: return "Heat";
        case Verb::Cool: return "Cool";
        case Verb::Clean: return "Clean";
    }
    return "?";
}

std::vector<SubTask> expand_subgoals(const TaskSpec& task) {
    std::vector<SubTask> subs;
    if (task.slice) {
        subs.push_back({Verb::PickUp, CatKnife});
        subs.push_back({Verb::Slice, task.object_target});
    }
    switch (task.type) {
        case TaskType::PickPlace:
            subs.push_back({Verb::PickUp, task.object_target});
            subs.push_back({Verb::Put, task.receptacle});
            break;
        case TaskType::PlaceTwo:
            subs.push_back({Verb::PickUp, task.object_target});
            subs.push_back({Verb::GotoLocation, task.object_target});
            subs.push_back({Verb::Put, task.receptacle});
            subs.push_back({Verb::PickUp, task.object_target});
            subs.push_back({Verb::Put, task.receptacle});
            break;
        case TaskType::HeatPlace:
            subs.push_back({Verb::PickUp, task.object_target});
            subs.push_back({Verb::Heat, CatMicrowave});
            subs.push_back({Verb::Put, task.receptacle});
            break;
    }
    return subs;
}

GoalCheck check_goal_conditions(const Room& room, const TaskSpec& task) {
    auto on_receptacle = [&](const ObjectInstance& inst) {
        if (inst.placement != Placement::OnSurface && inst.placement != Placement::Inside) return false;
        const ObjectInstance* parent = room.instance(inst.parent);
        return parent != nullptr && parent->category == task.receptacle;
    };

    GoalCheck gc;
    switch (task.type) {
        case TaskType::PickPlace: {
            if (task.slice) {
                bool sliced = false, placed_sliced = false;
                for (const auto& inst : room.instances) {
                    if (inst.category != task.object_target) continue;
                    if (inst.sliced) sliced = true;
                    if (inst.sliced && on_receptacle(inst)) placed_sliced = true;
                }
                gc.total = 2;
                gc.met = (sliced ? 1 : 0) + (placed_sliced ? 1 : 0);
            } else {
                bool placed = false;
                for (const auto& inst : room.instances)
                    if (inst.category == task.object_target && on_receptacle(inst)) placed = true;
                gc.total = 1;
                gc.met = placed ? 1 : 0;
            }
            break;
        }
        case TaskType::PlaceTwo: {
            int placed = 0;
            for (const auto& inst : room.instances)
                if (inst.category == task.object_target && on_receptacle(inst)) ++placed;
            gc.total = 2;
            gc.met = std::min(placed, 2);
            break;
        }
        case TaskType::HeatPlace: {
            bool heated = false, placed_heated = false;
            for (const auto& inst : room.instances) {
                if (inst.category != task.object_target) continue;
                if (inst.heated) heated = true;
                if (inst.heated && on_receptacle(inst)) placed_heated = true;
            }
            gc.total = 2;
            gc.met = (heated ? 1 : 0) + (placed_heated ? 1 : 0);
            break;
        }
    }
    return gc;
}

std::vector<uint8_t> true_manipulability(const Room& room, const AgentState& agent,
                                         const ObservationFrame& frame, const WorldConfig& cfg) {
    std::vector<uint8_t> visible_ids(room.instances.size(), 0);
    for (int16_t id : frame.instance) {
        if (id >= 0 && static_cast<size_t>(id) < visible_ids.size()) visible_ids[id] = 1;
    }
    std::vector<uint8_t> bits(kNumCategories, 0);
    const ObjectInstance* held = agent.held >= 0 ? room.instance(agent.held) : nullptr;
    for (const auto& inst : room.instances) {
        if (!visible_ids[static_cast<size_t>(inst.id)]) continue;
        if (!instance_in_range(room, agent, inst, cfg)) continue;
        bool can = false;
        if (category_pickupable(inst.category)) {
            if (agent.held < 0) can = true;
            if (category_sliceable(inst.category) && !inst.sliced && held && held->category == CatKnife)
                can = true;
        }
        if (category_receptacle(inst.category)) {
            if (held && (!category_openable(inst.category) || inst.open)) can = true;  // Put
            if (category_openable(inst.category)) can = true;                          // Open / Close
            if (category_toggleable(inst.category) && !inst.open) can = true;          // ToggleOn/Off
        }
        if (can) bits[static_cast<size_t>(inst.category)] = 1;
    }
    return bits;
}

std::vector<uint8_t> instance_mask(const ObservationFrame& frame, int instance_id) {
    std::vector<uint8_t> mask(frame.instance.size(), 0);
    for (size_t i = 0; i < frame.instance.size(); ++i)
        if (frame.instance[i] == instance_id) mask[i] = 1;
    return mask;
}

std::vector<uint8_t> category_mask(const ObservationFrame& frame, int category) {
    std::vector<uint8_t> mask(frame.semantic.size(), 0);
    for (size_t i = 0; i < frame.semantic.size(); ++i)
        if (frame.semantic[i] == category) mask[i] = 1;
    return mask;
}

// ------------------------------------------------------------- generation

namespace {

bool connected_free_space(const Room& room) {
    auto free_cells = room.navigable_truth();
    int start = -1, total = 0;
    for (size_t i = 0; i < free_cells.size(); ++i)
        if (free_cells[i]) {
            ++total;
            if (start < 0) start = static_cast<int>(i);
        }
    if (total == 0) return false;
    std::vector<uint8_t> seen(free_cells.size(), 0);
    std::vector<int> stack{start};
    seen[static_cast<size_t>(start)] = 1;
    int visited = 0;
    while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        ++visited;
        int gx = cur % room.grid_w, gy = cur / room.grid_w;
        const int dx[4] = {0, 1, 0, -1};
        const int dy[4] = {-1, 0, 1, 0};
        for (int k = 0; k < 4; ++k) {
            int nx = gx + dx[k], ny = gy + dy[k];
            if (!room.in_bounds(nx, ny)) continue;
            int ni = room.cell_index(nx, ny);
            if (free_cells[static_cast<size_t>(ni)] && !seen[static_cast<size_t>(ni)]) {
                seen[static_cast<size_t>(ni)] = 1;
                stack.push_back(ni);
            }
        }
    }
    return visited == total;
}

// A free interior cell not already taken by an instance.
int pick_free_cell(const Room& room, Rng& rng) {
    std::vector<int> cells;
    for (int gy = 1; gy < room.grid_h - 1; ++gy)
        for (int gx = 1; gx < room.grid_w - 1; ++gx)
            if (room.cell_free_truth(gx, gy)) cells.push_back(room.cell_index(gx, gy));
    if (cells.empty()) return -1;
    return cells[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(cells.size())))];
}

Room try_gen_room(uint64_t seed) {
    Room room;
    room.seed = seed;
    room.wall.assign(static_cast<size_t>(room.grid_h * room.grid_w), 0);
    Rng rng(seed);

    for (int gy = 0; gy < room.grid_h; ++gy)
        for (int gx = 0; gx < room.grid_w; ++gx)
            if (gx == 0 || gy == 0 || gx == room.grid_w - 1 || gy == room.grid_h - 1)
                room.wall[static_cast<size_t>(room.cell_index(gx, gy))] = 1;

    // Interior wall stubs give the renderer occluders and the planner detours.
    int n_stubs = static_cast<int>(rng.uniform_int(3));  // 0..2
    for (int s = 0; s < n_stubs; ++s) {
        bool horizontal = rng.uniform_int(2) == 0;
        int len = 2 + static_cast<int>(rng.uniform_int(3));
        int gx = 3 + static_cast<int>(rng.uniform_int(room.grid_w - 6));
        int gy = 3 + static_cast<int>(rng.uniform_int(room.grid_h - 6));
        for (int k = 0; k < len; ++k) {
            int x = horizontal ? gx + k : gx;
            int y = horizontal ? gy : gy + k;
            if (room.in_bounds(x, y) && x > 0 && y > 0 && x < room.grid_w - 1 && y < room.grid_h - 1)
                room.wall[static_cast<size_t>(room.cell_index(x, y))] = 1;
        }
    }

    int next_id = 0;
    auto add_instance = [&](int category, int cell, Placement placement, int parent) {
        ObjectInstance inst;
        inst.id = next_id++;
        inst.category = category;
        inst.gx = cell % room.grid_w;
        inst.gy = cell / room.grid_w;
        inst.placement = placement;
        inst.parent = parent;
        if (parent >= 0) {
            int children = 0;
            for (const auto& other : room.instances)
                if (other.parent == parent) ++children;
            inst.slot = children % 4;
        }
        if (category_receptacle(category)) {
            inst.z0 = 0.0;
            inst.z1 = category_openable(category) ? kContainerHeight : kSurfaceHeight;
        } else {
            place_height(inst);
        }
        room.instances.push_back(inst);
        return inst.id;
    };

    // Receptacles: always one microwave and one surface so every task type is
    // placeable, then extras.
    int n_recep = 2 + static_cast<int>(rng.uniform_int(4));  // 2..5
    const int recep_pool[4] = {CatTable, CatShelf, CatMicrowave, CatBin};
    std::vector<int> recep_cats{CatMicrowave, CatTable};
    while (static_cast<int>(recep_cats.size()) < n_recep)
        recep_cats.push_back(recep_pool[rng.uniform_int(4)]);
    for (int cat : recep_cats) {
        int cell = pick_free_cell(room, rng);
        if (cell < 0) return Room{};
        add_instance(cat, cell, Placement::OnFloor, -1);
    }

    // Objects: floor, surface, or container placements.
    int n_obj = 3 + static_cast<int>(rng.uniform_int(8));  // 3..10
    const int obj_pool[4] = {CatApple, CatEgg, CatKnife, CatCd};
    for (int i = 0; i < n_obj; ++i) {
        int cat = obj_pool[rng.uniform_int(4)];
        int64_t mode = rng.uniform_int(100);
        if (mode < 60) {
            int cell = pick_free_cell(room, rng);
            if (cell < 0) return Room{};
            add_instance(cat, cell, Placement::OnFloor, -1);
        } else {
            std::vector<int> hosts;
            for (const auto& inst : room.instances) {
                bool want_surface = mode < 85;
                bool kind_ok = want_surface ? category_surface(inst.category)
                                            : category_openable(inst.category);
                if (!kind_ok) continue;
                int children = 0;
                for (const auto& other : room.instances)
                    if (other.parent == inst.id) ++children;
                if (children < 2) hosts.push_back(inst.id);
            }
            if (hosts.empty()) {
                int cell = pick_free_cell(room, rng);
                if (cell < 0) return Room{};
                add_instance(cat, cell, Placement::OnFloor, -1);
            } else {
                int host_id = hosts[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(hosts.size())))];
                const ObjectInstance* host = room.instance(host_id);
                int cell = room.cell_index(host->gx, host->gy);
                add_instance(cat, cell,
                             category_surface(host->category) ? Placement::OnSurface : Placement::Inside,
                             host_id);
            }
        }
    }

    if (!connected_free_space(room)) return Room{};
    return room;
}

}  // namespace

Room gen_room(uint64_t seed) {
    for (uint64_t attempt = 0; attempt < 64; ++attempt) {
        Room room = try_gen_room(seed + attempt * 0x9E3779B97F4A7C15ULL);
        if (!room.wall.empty()) {
            room.seed = seed;  // structural retries stay internal to the seed
            return room;
        }
    }
    throw std::runtime_error("gen_room: no valid layout found");
}

EpisodeSetup gen_episode(uint64_t seed) {
    Rng rng(seed ^ 0xA5A5A5A5DEADBEEFULL);
    Room room = gen_room(seed);

    auto count_cat = [&](int cat) {
        int n = 0;
        for (const auto& inst : room.instances)
            if (inst.category == cat) ++n;
        return n;
    };
    auto has_surface_recep = [&] {
        for (const auto& inst : room.instances)
            if (category_surface(inst.category)) return true;
        return false;
    };
    (void)has_surface_recep;

    // Pick the task type, then patch the room so the task is solvable.
    TaskType type;
    switch (rng.uniform_int(3)) {
        case 0: type = TaskType::PickPlace; break;
        case 1: type = TaskType::PlaceTwo; break;
        default: type = TaskType::HeatPlace; break;
    }
    const int obj_pool[4] = {CatApple, CatEgg, CatKnife, CatCd};
    int object_target = obj_pool[rng.uniform_int(4)];
    if (type == TaskType::HeatPlace) object_target = rng.uniform_int(2) == 0 ? CatApple : CatEgg;

    std::vector<int> recep_choices;
    for (const auto& inst : room.instances) {
        bool ok_recep = type == TaskType::HeatPlace ? category_surface(inst.category)
                                                    : category_receptacle(inst.category);
        if (ok_recep) recep_choices.push_back(inst.category);
    }
    int receptacle = recep_choices.empty()
                         ? CatTable
                         : recep_choices[static_cast<size_t>(
                               rng.uniform_int(static_cast<int64_t>(recep_choices.size())))];

    int needed = type == TaskType::PlaceTwo ? 2 : 1;
    int next_id = 0;
    for (const auto& inst : room.instances) next_id = std::max(next_id, inst.id + 1);
    Rng place_rng = rng.split(17);
    while (count_cat(object_target) < needed) {
        int cell = pick_free_cell(room, place_rng);
        if (cell < 0) throw std::runtime_error("gen_episode: no room for task object");
        ObjectInstance inst;
        inst.id = next_id++;
        inst.category = object_target;
        inst.gx = cell % room.grid_w;
        inst.gy = cell / room.grid_w;
        inst.placement = Placement::OnFloor;
        place_height(inst);
        room.instances.push_back(inst);
        if (!connected_free_space(room)) {
            room.instances.pop_back();
            --next_id;
            continue;
        }
    }

    TaskSpec task;
    task.type = type;
    task.object_target = object_target;
    task.receptacle = receptacle;
    task.slice = type == TaskType::PickPlace && object_target == CatApple &&
                 count_cat(CatKnife) > 0 && rng.uniform_int(4) == 0;

    AgentState agent;
    Rng start_rng = rng.split(23);
    int cell = pick_free_cell(room, start_rng);
    if (cell < 0) throw std::runtime_error("gen_episode: no free start cell");
    int gx = cell % room.grid_w, gy = cell / room.grid_w;
    auto [sx, sy] = cell_center(gx, gy, room.grid_res);
    agent.pose = AgentPose{sx, sy, static_cast<int>(start_rng.uniform_int(4)) * 90, 45};
    return EpisodeSetup{std::move(room), task, agent};
}

}  // namespace escape
