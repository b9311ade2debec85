#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "escape/microworld.hpp"

using namespace escape;

namespace {

// Hand-built 8x8 room: border walls, one table at (5,5), agent-friendly.
Room small_room() {
    Room room;
    room.grid_h = room.grid_w = 8;
    room.grid_res = 0.25;
    room.wall.assign(64, 0);
    for (int g = 0; g < 8; ++g) {
        room.wall[static_cast<size_t>(room.cell_index(g, 0))] = 1;
        room.wall[static_cast<size_t>(room.cell_index(g, 7))] = 1;
        room.wall[static_cast<size_t>(room.cell_index(0, g))] = 1;
        room.wall[static_cast<size_t>(room.cell_index(7, g))] = 1;
    }
    return room;
}

AgentState agent_at(const Room& room, int gx, int gy, int yaw, int tilt = 45) {
    auto [x, y] = cell_center(gx, gy, room.grid_res);
    return AgentState{AgentPose{x, y, yaw, tilt}, -1};
}

ObjectInstance make_inst(int id, int cat, int gx, int gy, Placement pl = Placement::OnFloor,
                         int parent = -1) {
    ObjectInstance inst;
    inst.id = id;
    inst.category = cat;
    inst.gx = gx;
    inst.gy = gy;
    inst.placement = pl;
    inst.parent = parent;
    if (category_receptacle(cat)) {
        inst.z0 = 0.0;
        inst.z1 = category_openable(cat) ? kContainerHeight : kSurfaceHeight;
    } else if (pl == Placement::OnFloor) {
        inst.z0 = 0.0;
        inst.z1 = 0.45;
    } else if (pl == Placement::OnSurface) {
        inst.z0 = kSurfaceHeight;
        inst.z1 = kSurfaceHeight + 0.45;
    } else {
        inst.z0 = kContainerHeight / 2;
        inst.z1 = kContainerHeight;
    }
    return inst;
}

int count_pixels(const ObservationFrame& f, int cat) {
    int n = 0;
    for (uint8_t s : f.semantic)
        if (s == cat) ++n;
    return n;
}

}  // namespace

TEST_CASE("empty room renders only floor and wall") {
    Room room = small_room();
    WorldConfig cfg;
    auto frame = render(room, agent_at(room, 3, 3, 0), cfg);
    std::set<uint8_t> cats(frame.semantic.begin(), frame.semantic.end());
    for (uint8_t c : cats) CHECK((c == CatFloor || c == CatWall || c == kSemanticNone));
    CHECK(count_pixels(frame, CatFloor) > 0);
    CHECK(count_pixels(frame, CatWall) > 0);
}

TEST_CASE("object ahead is rendered; contained object appears iff container open") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatBin, 5, 3));
    room.instances.push_back(make_inst(1, CatCd, 5, 3, Placement::Inside, 0));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 2, 3, 0);

    auto closed = render(room, agent, cfg);
    CHECK(count_pixels(closed, CatBin) > 0);
    CHECK(count_pixels(closed, CatCd) == 0);

    room.instances[0].open = true;
    auto open = render(room, agent, cfg);
    CHECK(count_pixels(open, CatCd) > 0);

    room.instances[0].open = false;
    auto reclosed = render(room, agent, cfg);
    CHECK(count_pixels(reclosed, CatCd) == 0);
}

TEST_CASE("pixel back-projection lands in the rendered cell") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatApple, 4, 3));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 2, 3, 0);
    auto frame = render(room, agent, cfg);
    REQUIRE(count_pixels(frame, CatApple) > 0);
    // The frame's cell image must agree with the apple's cell for apple pixels.
    for (int i = 0; i < cfg.image_size * cfg.image_size; ++i) {
        if (frame.semantic[static_cast<size_t>(i)] == CatApple)
            CHECK(frame.cell[static_cast<size_t>(i)] == room.cell_index(4, 3));
    }
}

TEST_CASE("move into wall collides and leaves pose unchanged") {
    Room room = small_room();
    WorldConfig cfg;
    AgentState agent = agent_at(room, 1, 3, 180);  // facing -x toward the wall
    AgentPose before = agent.pose;
    auto out = step_env(room, agent, Action{ActionKind::MoveAhead, {}}, cfg);
    CHECK(out.kind == OutcomeKind::Collision);
    CHECK(agent.pose.x == before.x);
    CHECK(agent.pose.y == before.y);

    agent.pose.yaw_deg = 0;  // open floor ahead
    auto ok = step_env(room, agent, Action{ActionKind::MoveAhead, {}}, cfg);
    CHECK(ok.ok());
    CHECK(agent.pose.x == doctest::Approx(before.x + 0.25));
}

TEST_CASE("pickup via mask succeeds; empty-floor mask fails") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatApple, 4, 3));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 2, 3, 0);
    auto frame = render(room, agent, cfg);

    auto mask = instance_mask(frame, 0);
    auto out = step_env(room, agent, Action{ActionKind::PickUp, mask}, cfg);
    CHECK(out.ok());
    CHECK(agent.held == 0);
    CHECK(room.instance(0)->placement == Placement::Carried);

    // Carried objects disappear from subsequent frames.
    auto after = render(room, agent, cfg);
    CHECK(count_pixels(after, CatApple) == 0);

    auto floor_mask = category_mask(after, CatFloor);
    auto fail = step_env(room, agent, Action{ActionKind::PickUp, floor_mask}, cfg);
    CHECK(fail.kind == OutcomeKind::InteractionFailed);
    CHECK(fail.reason == "no_target");
}

TEST_CASE("out-of-range interaction is rejected") {
    Room room = small_room();
    room.grid_h = room.grid_w = 20;
    room.wall.assign(400, 0);
    for (int g = 0; g < 20; ++g) {
        room.wall[static_cast<size_t>(room.cell_index(g, 0))] = 1;
        room.wall[static_cast<size_t>(room.cell_index(g, 19))] = 1;
        room.wall[static_cast<size_t>(room.cell_index(0, g))] = 1;
        room.wall[static_cast<size_t>(room.cell_index(19, g))] = 1;
    }
    room.instances.push_back(make_inst(0, CatApple, 12, 3));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 2, 3, 0);  // 10 cells away > 6
    auto frame = render(room, agent, cfg);
    REQUIRE(count_pixels(frame, CatApple) > 0);
    auto out = step_env(room, agent, Action{ActionKind::PickUp, instance_mask(frame, 0)}, cfg);
    CHECK(out.kind == OutcomeKind::InteractionFailed);
    CHECK(out.reason == "out_of_range");
}

TEST_CASE("heat sequence heats contents of a closed running microwave") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatMicrowave, 4, 3));
    room.instances.push_back(make_inst(1, CatEgg, 2, 4));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 2, 3, 0);

    auto grab = [&](int id, ActionKind kind) {
        auto frame = render(room, agent, cfg);
        auto mask = instance_mask(frame, id);
        return step_env(room, agent, Action{kind, mask}, cfg);
    };

    // Pick the egg (rotate toward +y first).
    step_env(room, agent, Action{ActionKind::RotateLeft, {}}, cfg);
    CHECK(grab(1, ActionKind::PickUp).ok());
    step_env(room, agent, Action{ActionKind::RotateRight, {}}, cfg);

    CHECK(grab(0, ActionKind::Open).ok());
    CHECK(grab(0, ActionKind::Put).ok());
    CHECK(room.instance(1)->placement == Placement::Inside);
    CHECK(grab(0, ActionKind::Close).ok());
    CHECK(grab(0, ActionKind::ToggleOn).ok());
    CHECK(room.instance(1)->heated);
    CHECK(grab(0, ActionKind::ToggleOff).ok());
    CHECK(grab(0, ActionKind::Open).ok());
    CHECK(grab(1, ActionKind::PickUp).ok());
    CHECK(grab(0, ActionKind::Close).ok());
    CHECK(agent.held == 1);
}

TEST_CASE("put requires an open container") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatBin, 4, 3));
    room.instances.push_back(make_inst(1, CatCd, 2, 4));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 2, 3, 90);
    auto f0 = render(room, agent, cfg);
    CHECK(step_env(room, agent, Action{ActionKind::PickUp, instance_mask(f0, 1)}, cfg).ok());
    step_env(room, agent, Action{ActionKind::RotateRight, {}}, cfg);

    auto f1 = render(room, agent, cfg);
    auto closed = step_env(room, agent, Action{ActionKind::Put, instance_mask(f1, 0)}, cfg);
    CHECK(closed.kind == OutcomeKind::InteractionFailed);
    CHECK(closed.reason == "closed");

    CHECK(step_env(room, agent, Action{ActionKind::Open, instance_mask(f1, 0)}, cfg).ok());
    auto f2 = render(room, agent, cfg);
    CHECK(step_env(room, agent, Action{ActionKind::Put, instance_mask(f2, 0)}, cfg).ok());
    CHECK(room.instance(1)->placement == Placement::Inside);
    CHECK(room.instance(1)->parent == 0);
}

TEST_CASE("subgoal templates match the task table") {
    TaskSpec pick{TaskType::PickPlace, CatApple, CatTable, -1, false};
    auto subs = expand_subgoals(pick);
    REQUIRE(subs.size() == 2);
    CHECK(subs[0].verb == Verb::PickUp);
    CHECK(subs[0].target == CatApple);
    CHECK(subs[1].verb == Verb::Put);
    CHECK(subs[1].target == CatTable);

    TaskSpec heat{TaskType::HeatPlace, CatEgg, CatTable, -1, false};
    auto hs = expand_subgoals(heat);
    REQUIRE(hs.size() == 3);
    CHECK(hs[0].verb == Verb::PickUp);
    CHECK(hs[1].verb == Verb::Heat);
    CHECK(hs[1].target == CatMicrowave);
    CHECK(hs[2].verb == Verb::Put);

    TaskSpec two{TaskType::PlaceTwo, CatApple, CatBin, -1, false};
    auto ts = expand_subgoals(two);
    REQUIRE(ts.size() == 5);
    CHECK(ts[0].verb == Verb::PickUp);
    CHECK(ts[1].verb == Verb::GotoLocation);
    CHECK(ts[2].verb == Verb::Put);
    CHECK(ts[3].verb == Verb::PickUp);
    CHECK(ts[4].verb == Verb::Put);

    TaskSpec sliced{TaskType::PickPlace, CatApple, CatTable, -1, true};
    auto ss = expand_subgoals(sliced);
    REQUIRE(ss.size() == 4);
    CHECK(ss[0].verb == Verb::PickUp);
    CHECK(ss[0].target == CatKnife);
    CHECK(ss[1].verb == Verb::Slice);
}

TEST_CASE("goal conditions give partial credit") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatTable, 5, 5));
    room.instances.push_back(make_inst(1, CatEgg, 2, 2));
    TaskSpec task{TaskType::HeatPlace, CatEgg, CatTable, -1, false};

    auto gc0 = check_goal_conditions(room, task);
    CHECK(gc0.met == 0);
    CHECK(gc0.total == 2);

    room.instances[1].heated = true;
    auto gc1 = check_goal_conditions(room, task);
    CHECK(gc1.met == 1);

    room.instances[1].placement = Placement::OnSurface;
    room.instances[1].parent = 0;
    auto gc2 = check_goal_conditions(room, task);
    CHECK(gc2.met == 2);

    TaskSpec pick{TaskType::PickPlace, CatEgg, CatTable, -1, false};
    Room fresh = small_room();
    fresh.instances.push_back(make_inst(0, CatTable, 5, 5));
    fresh.instances.push_back(make_inst(1, CatEgg, 2, 2));
    auto gcp = check_goal_conditions(fresh, pick);
    CHECK(gcp.met == 0);
    CHECK(gcp.total == 1);
}

TEST_CASE("oracle manipulability: ahead-and-visible sets the bit, walls clear it") {
    Room room = small_room();
    room.instances.push_back(make_inst(0, CatApple, 4, 3));
    WorldConfig cfg;
    AgentState agent = agent_at(room, 3, 3, 0);
    auto frame = render(room, agent, cfg);
    auto bits = true_manipulability(room, agent, frame, cfg);
    CHECK(bits[CatApple] == 1);

    // Wall between agent and apple: bit clears.
    Room blocked = small_room();
    blocked.wall[static_cast<size_t>(blocked.cell_index(4, 3))] = 1;
    blocked.instances.push_back(make_inst(0, CatApple, 5, 3));
    auto frame2 = render(blocked, agent, cfg);
    auto bits2 = true_manipulability(blocked, agent, frame2, cfg);
    CHECK(bits2[CatApple] == 0);
}

TEST_CASE("room generation is deterministic and connected") {
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        Room a = gen_room(seed);
        Room b = gen_room(seed);
        CHECK(a.structurally_equal(b));

        // flood-fill connectivity oracle
        auto nav = a.navigable_truth();
        int start = -1, total = 0;
        for (size_t i = 0; i < nav.size(); ++i)
            if (nav[i]) {
                ++total;
                if (start < 0) start = static_cast<int>(i);
            }
        REQUIRE(total > 0);
        std::vector<uint8_t> seen(nav.size(), 0);
        std::vector<int> stack{start};
        seen[static_cast<size_t>(start)] = 1;
        int visited = 0;
        while (!stack.empty()) {
            int cur = stack.back();
            stack.pop_back();
            ++visited;
            int gx = cur % a.grid_w, gy = cur / a.grid_w;
            const int dx[4] = {0, 1, 0, -1}, dy[4] = {-1, 0, 1, 0};
            for (int k = 0; k < 4; ++k) {
                int nx = gx + dx[k], ny = gy + dy[k];
                if (nx < 0 || ny < 0 || nx >= a.grid_w || ny >= a.grid_h) continue;
                int ni = a.cell_index(nx, ny);
                if (nav[static_cast<size_t>(ni)] && !seen[static_cast<size_t>(ni)]) {
                    seen[static_cast<size_t>(ni)] = 1;
                    stack.push_back(ni);
                }
            }
        }
        CHECK(visited == total);
    }
}

TEST_CASE("generated episodes have the task categories present") {
    for (uint64_t seed = 1; seed <= 50; ++seed) {
        EpisodeSetup setup = gen_episode(seed);
        int have_obj = 0, have_recep = 0;
        for (const auto& inst : setup.room.instances) {
            if (inst.category == setup.task.object_target) ++have_obj;
            if (inst.category == setup.task.receptacle) ++have_recep;
        }
        CHECK(have_obj >= (setup.task.type == TaskType::PlaceTwo ? 2 : 1));
        CHECK(have_recep >= 1);
        if (setup.task.type == TaskType::HeatPlace) {
            bool microwave = false;
            for (const auto& inst : setup.room.instances)
                if (inst.category == CatMicrowave) microwave = true;
            CHECK(microwave);
        }
    }
}

TEST_CASE("world-state invariants survive action fuzzing") {
    // 10^5 random actions across several rooms; checked invariants: at most
    // one held object, containment is single-parent, pose stays in range,
    // positions stay on the grid.
    Rng rng(2024);
    const int kRooms = 10;
    const int kActionsPerRoom = 10000;
    WorldConfig cfg;
    for (int r = 0; r < kRooms; ++r) {
        EpisodeSetup setup = gen_episode(5000 + static_cast<uint64_t>(r));
        Room room = setup.room;
        AgentState agent = setup.agent;
        for (int i = 0; i < kActionsPerRoom; ++i) {
            int choice = static_cast<int>(rng.uniform_int(12));
            Action action;
            action.kind = static_cast<ActionKind>(choice);
            if (action_is_interaction(action.kind)) {
                auto frame = render(room, agent, cfg);
                // random rectangle mask, sometimes an instance mask
                if (rng.uniform_int(2) == 0 && !room.instances.empty()) {
                    int id = room.instances[static_cast<size_t>(rng.uniform_int(
                                                static_cast<int64_t>(room.instances.size())))]
                                 .id;
                    action.mask = instance_mask(frame, id);
                } else {
                    action.mask.assign(static_cast<size_t>(cfg.image_size * cfg.image_size), 0);
                    int x0 = static_cast<int>(rng.uniform_int(cfg.image_size));
                    int y0 = static_cast<int>(rng.uniform_int(cfg.image_size));
                    int w = 1 + static_cast<int>(rng.uniform_int(16));
                    int h = 1 + static_cast<int>(rng.uniform_int(16));
                    for (int y = y0; y < std::min(y0 + h, cfg.image_size); ++y)
                        for (int x = x0; x < std::min(x0 + w, cfg.image_size); ++x)
                            action.mask[static_cast<size_t>(y * cfg.image_size + x)] = 1;
                }
            }
            step_env(room, agent, action, cfg);

            // invariants
            int held_count = 0;
            for (const auto& inst : room.instances) {
                if (inst.placement == Placement::Carried) ++held_count;
                if (inst.placement == Placement::Inside || inst.placement == Placement::OnSurface) {
                    const ObjectInstance* parent = room.instance(inst.parent);
                    REQUIRE(parent != nullptr);
                    REQUIRE(parent->id != inst.id);
                    REQUIRE(category_receptacle(parent->category));
                }
            }
            REQUIRE(held_count <= 1);
            REQUIRE((agent.held < 0 || room.instance(agent.held)->placement == Placement::Carried));
            REQUIRE((agent.pose.yaw_deg % 90 == 0));
            REQUIRE(agent.pose.tilt_deg >= kTiltMinDeg);
            REQUIRE(agent.pose.tilt_deg <= kTiltMaxDeg);
            REQUIRE(room.cell_free_truth(static_cast<int>(agent.pose.x / room.grid_res),
                                         static_cast<int>(agent.pose.y / room.grid_res)));
        }
    }
}
