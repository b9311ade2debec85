#pragma once

#include <filesystem>
#include <vector>

#include "escape/expert.hpp"

namespace escape {

struct EpisodeRecord {
    uint64_t seed = 0;
    TaskSpec task;
    int expert_length = 0;
    int grid_h = 20, grid_w = 20;
    int image_size = 64;
    int categories = kNumCategories;
    double grid_res = 0.25;
    std::vector<ExpertFrame> frames;
};

// On-disk episode: meta.json, frames.bin (magic "ESCDATA1", then per frame
// pose as 4 LE float64, projection as 12 LE float64, semantic image bytes,
// run-length-encoded map-label and image-mask bitmaps, manipulability bytes),
// labels.json with per-frame byte offsets.
void write_episode(const std::filesystem::path& dir, const EpisodeRecord& record);
EpisodeRecord load_episode(const std::filesystem::path& dir);

// Expert-solved episodes under out_dir/ep_{index:05}; deterministic per seed.
void gen_dataset(uint64_t seed, int n_episodes, const std::filesystem::path& out_dir,
                 const WorldConfig& cfg);

std::vector<std::filesystem::path> list_episode_dirs(const std::filesystem::path& dataset_dir);

// Run-length coding over 0/1 byte streams, exposed for tests.
std::vector<uint8_t> rle_encode(const std::vector<uint8_t>& bits);
std::vector<uint8_t> rle_decode(const std::vector<uint8_t>& encoded, size_t expected_size);

}  // namespace escape
