#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "escape/expert.hpp"
#include "escape/monitor.hpp"
#include "escape/perception.hpp"
#include "escape/policy.hpp"

namespace escape {

struct HarnessConfig {
    WorldConfig world;
    PolicyConfig policy;
    int step_budget = 400;
    bool oracle_monitor = false;  // ground-truth manipulability instead of the trained monitor
    bool gt_masks = false;        // simulator masks instead of grounding masks
    double tau_mask = 0.5;
};

struct StepRecord {
    int t = 0;
    AgentPose pose;
    ActionKind action = ActionKind::Stop;
    PlanOrigin origin = PlanOrigin::Exploration;
    std::vector<uint8_t> monitor_bits;
    OutcomeKind outcome = OutcomeKind::Ok;
    std::string reason;
};

struct EpisodeLog {
    uint64_t seed = 0;
    TaskSpec task;
    std::vector<StepRecord> steps;
    int agent_length = 0;
    int expert_length = 0;
    bool success = false;
    int gc_met = 0, gc_total = 0;
    std::string failure;  // empty on success
};

// Full pipeline rollout: panoramic scan, per-step memory update, monitor,
// grounding masks, adaptive policy, environment step; ends on Stop or budget.
EpisodeLog run_episode(const EpisodeSetup& setup, int expert_length, PerceptionModel& perception,
                       MonitorModel* monitor, const HarnessConfig& cfg, uint64_t policy_seed);

struct MetricsReport {
    double sr = 0.0, gc = 0.0, plwsr = 0.0, plwgc = 0.0;
    std::optional<double> ef;  // PLWSR / SR as the aggregate ratio; null when SR == 0
    std::map<std::string, double> failure_rates;
    int episodes = 0;
};

MetricsReport compute_metrics(const std::vector<EpisodeLog>& logs);

// Deterministic failure taxonomy for a failed episode; throws on success logs.
std::string classify_failure(const EpisodeLog& log);

// --- persistence ------------------------------------------------------------

// JSON-lines trace: a header record, then one record per step.
void write_episode_log(const std::filesystem::path& path, const EpisodeLog& log);
EpisodeLog read_episode_log(const std::filesystem::path& path);
std::string metrics_json(const MetricsReport& report);

// Scene-map export: JSON (dims, resolution, categories, row-major probs per
// category) plus one P5 graymap per category when pgm is set.
void export_scene_map(const std::filesystem::path& dir, const std::vector<double>& probs,
                      int grid_h, int grid_w, int categories, double resolution_m, bool pgm);

// Interaction-mask export: P5 graymap per (frame, category) with a JSON index.
void export_mask_pgm(const std::filesystem::path& path, const std::vector<double>& scores,
                     int image_size);

// Binary mask post-processing for interactions: the 4-connected component of
// scores >= tau containing the argmax score; empty when nothing clears tau.
std::optional<std::vector<uint8_t>> interaction_mask(const std::vector<double>& scores,
                                                     int image_size, double tau);

// Runs episodes (optionally on `workers` threads, episodes are independent)
// and returns logs in input order.
std::vector<EpisodeLog> run_episode_batch(const std::vector<EpisodeSetup>& setups,
                                          const std::vector<int>& expert_lengths,
                                          PerceptionModel& perception, MonitorModel* monitor,
                                          const HarnessConfig& cfg, uint64_t seed_base,
                                          int workers = 2);

}  // namespace escape
