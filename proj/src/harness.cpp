#include "escape/harness.hpp"
#include <atomic>

#include <cmath>
#include <fstream>
#include <future>
#include <json.hpp>

namespace escape {

std::optional<std::vector<uint8_t>> interaction_mask(const std::vector<double>& scores,
                                                     int image_size, double tau) {
    int best = -1;
    double best_score = -1.0;
    for (int i = 0; i < image_size * image_size; ++i) {
        double s = scores[static_cast<size_t>(i)];
        if (s >= tau && s > best_score) {
            best_score = s;
            best = i;
        }
    }
    if (best < 0) return std::nullopt;
    // flood fill the component of scores >= tau containing the argmax
    std::vector<uint8_t> mask(static_cast<size_t>(image_size * image_size), 0);
    std::vector<int> stack{best};
    mask[static_cast<size_t>(best)] = 1;
    while (!stack.empty()) {
        int cur = stack.back();
        stack.pop_back();
        int row = cur / image_size, col = cur % image_size;
        const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
            int nr = row + dr[k], nc = col + dc[k];
            if (nr < 0 || nr >= image_size || nc < 0 || nc >= image_size) continue;
            int ni = nr * image_size + nc;
            if (mask[static_cast<size_t>(ni)] || scores[static_cast<size_t>(ni)] < tau) continue;
            mask[static_cast<size_t>(ni)] = 1;
            stack.push_back(ni);
        }
    }
    return mask;
}

EpisodeLog run_episode(const EpisodeSetup& setup, int expert_length, PerceptionModel& perception,
                       MonitorModel* monitor, const HarnessConfig& cfg, uint64_t policy_seed) {
    Room room = setup.room;
    AgentState agent = setup.agent;
    const auto& pc_cfg = perception.config();

    EpisodeLog log;
    log.seed = setup.room.seed;
    log.task = setup.task;
    log.expert_length = expert_length;

    PolicyState policy(expand_subgoals(setup.task), cfg.policy, policy_seed);
    EpisodicMemory memory;
    bool has_memory = false;
    int t = 0;

    auto observe = [&]() {
        ObservationFrame obs = render(room, agent, cfg.world, t);
        StepResult sr = perception.memory_step(has_memory ? &memory : nullptr, obs);
        memory = sr.memory;
        has_memory = true;
        return std::make_pair(std::move(obs), std::move(sr));
    };

    auto record = [&](const Action& action, PlanOrigin origin, const Outcome& outcome,
                      const std::vector<uint8_t>& bits, const AgentPose& pose) {
        StepRecord s;
        s.t = t;
        s.pose = pose;
        s.action = action.kind;
        s.origin = origin;
        s.monitor_bits = bits;
        s.outcome = outcome.kind;
        s.reason = outcome.reason;
        log.steps.push_back(std::move(s));
        ++t;
    };

    // initial panoramic scan: four 90-degree rotations, each observed
    for (int i = 0; i < cfg.world.scan_rotations; ++i) {
        auto [obs, sr] = observe();
        AgentPose pose = agent.pose;
        Action action{ActionKind::RotateRight, {}};
        auto bits = cfg.oracle_monitor || monitor == nullptr
                        ? true_manipulability(room, agent, obs, cfg.world)
                        : monitor->predict(obs.semantic, sr.map.multi_hot(cfg.policy.tau),
                                           static_cast<int>(std::floor(pose.y / room.grid_res)),
                                           static_cast<int>(std::floor(pose.x / room.grid_res)));
        Outcome outcome = step_env(room, agent, action, cfg.world);
        record(action, PlanOrigin::Exploration, outcome, bits, pose);
    }

    while (t < cfg.step_budget) {
        auto [obs, sr] = observe();
        std::vector<double> probs = sr.map.probs_copy();
        std::vector<uint8_t> multihot = sr.map.multi_hot(cfg.policy.tau);

        std::vector<uint8_t> bits;
        if (cfg.oracle_monitor || monitor == nullptr) {
            bits = true_manipulability(room, agent, obs, cfg.world);
        } else {
            bits = monitor->predict(obs.semantic, multihot,
                                    static_cast<int>(std::floor(agent.pose.y / room.grid_res)),
                                    static_cast<int>(std::floor(agent.pose.x / room.grid_res)));
        }

        NoGradGuard guard;
        Tensor embeddings;  // computed lazily, shared across per-category masks
        auto mask_for = [&](int category) -> std::optional<std::vector<uint8_t>> {
            if (category < 0 || category >= pc_cfg.categories) return std::nullopt;
            if (cfg.gt_masks) {
                auto gt = category_mask(obs, category);
                bool any = false;
                for (uint8_t m : gt) any = any || m;
                if (!any) return std::nullopt;
                return gt;
            }
            auto pooled = perception.mask_pool(memory.m, multihot, category);
            if (!pooled.has_value()) return std::nullopt;  // no cells: policy falls back
            Tensor query = pc_cfg.static_query ? perception.static_object_query(category)
                                               : perception.object_query(*pooled);
            if (!embeddings.defined()) embeddings = perception.pixel_embeddings(sr.features);
            Tensor scores = perception.similarity_scores(query, embeddings);
            std::vector<double> score_data(scores.data().begin(), scores.data().end());
            return interaction_mask(score_data, pc_cfg.image_size, cfg.tau_mask);
        };

        PolicyInputs inputs;
        inputs.pose = agent.pose;
        inputs.map_probs = &probs;
        inputs.grid_h = room.grid_h;
        inputs.grid_w = room.grid_w;
        inputs.categories = pc_cfg.categories;
        inputs.monitor_bits = &bits;
        inputs.mask_for = mask_for;

        PolicyDecision decision = policy.next_action(inputs);
        AgentPose pose = agent.pose;
        if (decision.action.kind == ActionKind::Stop) {
            record(decision.action, decision.origin, Outcome{}, bits, pose);
            break;
        }
        Outcome outcome = step_env(room, agent, decision.action, cfg.world);
        policy.observe_outcome(decision.action, outcome, pose);
        record(decision.action, decision.origin, outcome, bits, pose);
    }

    GoalCheck gc = check_goal_conditions(room, setup.task);
    log.agent_length = static_cast<int>(log.steps.size());
    log.gc_met = gc.met;
    log.gc_total = gc.total;
    log.success = gc.met == gc.total;
    if (!log.success) log.failure = classify_failure(log);
    return log;
}

std::vector<EpisodeLog> run_episode_batch(const std::vector<EpisodeSetup>& setups,
                                          const std::vector<int>& expert_lengths,
                                          PerceptionModel& perception, MonitorModel* monitor,
                                          const HarnessConfig& cfg, uint64_t seed_base,
                                          int workers) {
    std::vector<EpisodeLog> logs(setups.size());
    if (workers <= 1 || setups.size() <= 1) {
        for (size_t i = 0; i < setups.size(); ++i)
            logs[i] = run_episode(setups[i], expert_lengths[i], perception, monitor, cfg,
                                  seed_base + i);
        return logs;
    }
    // episodes are independent; the checkpoint is shared read-only
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= setups.size()) break;
            logs[i] = run_episode(setups[i], expert_lengths[i], perception, monitor, cfg,
                                  seed_base + i);
        }
    };
    std::vector<std::future<void>> futures;
    for (int w = 0; w < workers; ++w) futures.push_back(std::async(std::launch::async, worker));
    for (auto& f : futures) f.get();
    return logs;
}

void export_scene_map(const std::filesystem::path& dir, const std::vector<double>& probs,
                      int grid_h, int grid_w, int categories, double resolution_m, bool pgm) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::json j;
    j["grid"] = {grid_h, grid_w};
    j["resolution_m"] = resolution_m;
    std::vector<std::string> names;
    for (int k = 0; k < categories; ++k) names.emplace_back(category_name(k));
    j["categories"] = names;
    for (int k = 0; k < categories; ++k) {
        std::vector<double> plane(static_cast<size_t>(grid_h * grid_w));
        for (int c = 0; c < grid_h * grid_w; ++c)
            plane[static_cast<size_t>(c)] = probs[static_cast<size_t>(c * categories + k)];
        j["probs"][names[static_cast<size_t>(k)]] = plane;
        if (pgm) {
            std::ofstream out(dir / (names[static_cast<size_t>(k)] + ".pgm"), std::ios::binary);
            out << "P5\n" << grid_w << " " << grid_h << "\n255\n";
            for (double v : plane) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
        }
    }
    std::ofstream(dir / "scene_map.json") << j.dump(2) << "\n";
}

void export_mask_pgm(const std::filesystem::path& path, const std::vector<double>& scores,
                     int image_size) {
    std::ofstream out(path, std::ios::binary);
    out << "P5\n" << image_size << " " << image_size << "\n255\n";
    for (double v : scores) out.put(static_cast<char>(std::lround(std::clamp(v, 0.0, 1.0) * 255)));
}

}  // namespace escape
