#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "escape/dataset.hpp"
#include "escape/monitor.hpp"
#include "escape/perception.hpp"

namespace escape {

// Desk-scale training schedule. The paper-scale reference values (batch 64,
// lr 2e-4, 25 epochs on 8 GPUs; monitor lr 5e-5, batch 128, 40 epochs) are
// out of reach on a CPU; this config is what the harness actually runs.
struct TrainConfig {
    double lr = 2e-4;
    int batch = 8;  // windows (perception) or frames (monitor) per optimizer step
    int epochs = 10;
    double lambda = 1.0;  // image-loss balance in the joint objective
    uint64_t seed = 1;
    std::string precision = "f64";
    int bptt_window = 4;  // truncated backprop length over the memory chain
    double monitor_lr = 1e-3;
    int monitor_epochs = 10;

    std::map<std::string, std::string> as_entries() const;
};

struct TrainCurvePoint {
    int step = 0;
    double map_loss = 0.0;
    double img_loss = 0.0;
    double joint_loss = 0.0;
    double lr = 0.0;
};

struct TrainResult {
    std::vector<TrainCurvePoint> curve;
    double initial_loss = 0.0;
    double final_loss = 0.0;
};

// Joint perception training: sequential episode unrolls with the truncated
// window, AdamW updates, deterministic per seed. Writes a CSV log with
// columns {step, map_loss, img_loss, joint_loss, lr} when log_csv is given.
TrainResult train_perception(PerceptionModel& model, const std::vector<EpisodeRecord>& episodes,
                             const TrainConfig& cfg,
                             const std::optional<std::filesystem::path>& log_csv = std::nullopt);

TrainResult train_monitor(MonitorModel& model, const std::vector<EpisodeRecord>& episodes,
                          const TrainConfig& cfg,
                          const std::optional<std::filesystem::path>& log_csv = std::nullopt);

// --- evaluation -----------------------------------------------------------

struct MiouResult {
    std::vector<double> per_category;  // NaN for categories with empty union
    double mean = 0.0;
};

// IOU per category between two multi-hot fields of `categories` channels;
// categories with an empty union are excluded from the mean.
MiouResult miou(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int categories);

// Streaming intersection/union counts across frames.
class MiouAccumulator {
public:
    explicit MiouAccumulator(int categories) : inter_(categories, 0), uni_(categories, 0) {}
    void add(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt);
    MiouResult result() const;

private:
    std::vector<int64_t> inter_, uni_;
};

struct PerceptionEval {
    double map_miou = 0.0;
    double image_miou = 0.0;
};

// Rolls the memory over each held-out episode; map mIOU against the
// cumulative labels per frame, image mIOU of thresholded similarity masks
// against the ground-truth category masks.
PerceptionEval evaluate_perception(PerceptionModel& model,
                                   const std::vector<EpisodeRecord>& episodes);

struct MonitorEval {
    std::vector<double> f1;  // NaN where undefined (no positives either way)
    double min_f1 = 0.0;
    double mean_f1 = 0.0;
};

MonitorEval evaluate_monitor(MonitorModel& model, const std::vector<EpisodeRecord>& episodes);

// --- gradient verification --------------------------------------------------

struct GradVerifyComponent {
    std::string name;
    double max_rel_err = 0.0;
    int64_t coords = 0;
    bool pass = false;
};

struct GradVerifyReport {
    std::vector<GradVerifyComponent> components;
    bool pass = false;
    int seeds = 0;
    double tol = 0.0;
};

// Central-difference verification of every trainable sub-network on small
// random instances: bce head, deform_attn, OME block, MRU block, map head,
// grounding path, monitor. Instances are rerolled until well conditioned
// (no sampling point near a bilinear kink, no tiny-but-nonzero gradient
// coordinate below the double-precision noise floor of the quotient).
// `corrupt` injects a faulty backward into the named component (test hook).
GradVerifyReport verify_gradients(uint64_t seed, int n_seeds, double tol,
                                  const std::string& corrupt = "");

}  // namespace escape
