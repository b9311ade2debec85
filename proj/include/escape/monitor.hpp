#pragma once

#include <vector>

#include "escape/checkpoint.hpp"
#include "escape/microworld.hpp"
#include "escape/tensor.hpp"

namespace escape {

// Reactive local monitor: small conv nets over the egocentric semantic image
// and a map window centered on the agent, then a linear classifier emitting
// per-category manipulability logits.
struct MonitorConfig {
    int categories = kNumCategories;
    int image_size = 64;
    int crop = 15;  // map window edge, cells
    int grid_h = 20, grid_w = 20;
    int img_c1 = 12, img_c2 = 16, img_c3 = 24;
    int map_c = 16;
};

class MonitorModel {
public:
    MonitorModel(MonitorConfig cfg, uint64_t init_seed);

    const MonitorConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    // image_onehot [img,img,K], map_crop [crop,crop,K] -> [1,K] logits.
    Tensor logits(const Tensor& image_onehot, const Tensor& map_crop);

    // Crop of a multi-hot grid map centered on the agent cell, zero padded.
    Tensor crop_tensor(const std::vector<uint8_t>& map_multihot, int agent_row, int agent_col) const;

    // Thresholded sigmoid at 0.5.
    std::vector<uint8_t> predict(const std::vector<uint8_t>& semantic,
                                 const std::vector<uint8_t>& map_multihot, int agent_row,
                                 int agent_col);

private:
    MonitorConfig cfg_;
    ParamStore params_;
};

}  // namespace escape
