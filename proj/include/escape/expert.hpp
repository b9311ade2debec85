#pragma once

#include <vector>

#include "escape/microworld.hpp"

namespace escape {

// One supervised frame: the observation plus the labels derived from it.
// map_label is the cumulative multi-hot [H*W*K] (union of everything any
// frame up to and including this one observed); image_masks holds K binary
// planes of img^2; manip is the oracle manipulability vector.
struct ExpertFrame {
    ObservationFrame obs;
    std::vector<uint8_t> map_label;
    std::vector<uint8_t> image_masks;
    std::vector<uint8_t> manip;
};

struct ExpertTrajectory {
    std::vector<ExpertFrame> frames;  // frames[i] is the view actions[i] was chosen from
    std::vector<Action> actions;
    bool success = false;
    int length() const { return static_cast<int>(actions.size()); }
};

// Full-knowledge solver: panoramic scan, true-map BFS routes to the nearest
// visible stand cell, direct interactions with ground-truth masks. Emits the
// per-frame labels used to train perception and the monitor.
ExpertTrajectory expert_trajectory(const EpisodeSetup& setup, const WorldConfig& cfg);

// Deterministically walks derived seeds from `seed` until the generated
// episode is expert-solvable; returns that episode (and optionally the
// trajectory that solved it).
EpisodeSetup gen_solvable_episode(uint64_t seed, const WorldConfig& cfg,
                                  ExpertTrajectory* trajectory = nullptr);

}  // namespace escape
