#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "escape/checkpoint.hpp"
#include "escape/geometry.hpp"
#include "escape/microworld.hpp"
#include "escape/tensor.hpp"

namespace escape {

// Desk-scale defaults: 20x20 grid, C=32, 64x64 semantic images, two feature
// levels, two stacked attention blocks of 4 heads x 4 sampling points.
struct PerceptionConfig {
    int grid_h = 20, grid_w = 20;
    int channels = 48;
    int categories = kNumCategories;
    int image_size = 64;
    int feat_channels = 32;
    std::vector<int> strides{4, 8};
    int n_blocks = 2;
    int n_heads = 4;
    int n_points = 4;  // per head; in OME these are the pillar's z anchors
    PillarConfig pillars{4, 0.0, 1.8};
    double grid_res = 0.25;
    double fov_deg = 60.0;
    double camera_height = 1.5;
    double tau = 0.5;          // multi-hot threshold
    double tau_mask = 0.5;     // interaction-mask threshold
    bool no_ome = false;       // ablation: skip observation encoding
    bool no_mru = false;       // ablation: memory from the current frame only
    bool static_query = false; // ablation: learned per-category query table
    std::string activation = "silu";

    int cells() const { return grid_h * grid_w; }
    int n_levels() const { return static_cast<int>(strides.size()); }
};

struct MultiLevelFeatures {
    std::vector<Tensor> levels;  // each [h_l, w_l, feat_channels]
    std::vector<int> strides;
};

struct EpisodicMemory {
    Tensor m;  // [H*W, C]
    int timestep = 0;
};

struct SceneMap {
    Tensor probs;  // [H*W, K], entries in (0,1)
    int grid_h = 0, grid_w = 0;
    int categories = 0;
    std::vector<uint8_t> multi_hot(double tau) const;
    std::vector<double> probs_copy() const;
};

struct StepResult {
    EpisodicMemory memory;
    SceneMap map;
    MultiLevelFeatures features;
};

// [img,img] category ids (255 = background) -> [img,img,K] one-hot constants.
Tensor image_to_onehot(const std::vector<uint8_t>& semantic, int image_size, int categories);

// Precomputed pillar-projection geometry for one camera: one row per cell
// with at least one reference point in the frustum. Each level holds that
// cell's n_ref z-anchor projections in level coordinates; points that fall
// outside the frustum are parked far out of bounds so they sample zero.
struct FrustumIndex {
    std::shared_ptr<std::vector<int64_t>> row2cell;
    std::vector<Tensor> level_anchors;  // level -> [(rows*n_ref), 2] constants
    std::shared_ptr<std::vector<uint8_t>> touched;  // per cell
    int64_t rows = 0;
};

class PerceptionModel {
public:
    PerceptionModel(PerceptionConfig cfg, uint64_t init_seed);

    const PerceptionConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

    MultiLevelFeatures backbone_features(const Tensor& obs_onehot);
    FrustumIndex frustum_index(const CameraProjection& cam) const;
    Tensor ome_update(int block, const Tensor& queries, const MultiLevelFeatures& feats,
                      const FrustumIndex& index);
    Tensor mru_update(int block, const Tensor& queries, const Tensor& memory_prev);
    Tensor map_head(const Tensor& memory);

    // backbone -> (OME -> MRU) blocks -> map head. `prev == nullptr` runs the
    // first-step bootstrap (MRU attends the encoded queries themselves).
    StepResult memory_step(const EpisodicMemory* prev, const ObservationFrame& obs,
                           bool keep_graph = false);

    // --- grounding heads (jointly trained) ---
    Tensor pixel_embeddings(const MultiLevelFeatures& feats);  // [E*E, C]
    // Mean of memory rows over cells whose multi-hot bit for `category` is
    // set; nullopt when that set is empty.
    std::optional<Tensor> mask_pool(const Tensor& memory, const std::vector<uint8_t>& multi_hot,
                                    int category) const;
    Tensor object_query(const Tensor& pooled);     // MLP, [1,C] -> [1,C]
    Tensor static_object_query(int category);      // ablation table row
    // sigmoid(<query, E(h,w)>) upsampled to image resolution, [img,img].
    Tensor similarity_scores(const Tensor& query, const Tensor& embeddings);
    int embedding_grid() const { return cfg_.image_size / cfg_.strides[0]; }

    Tensor query_param() const;
    Tensor pos_encoding() const;

    // Deformable attention over one or more value grids: per-head, per-point
    // offsets and softmax weights predicted from the queries, bilinear
    // samples around the anchors, weighted sum, head concat, output
    // projection. `head_level[h]` names the value grid head h samples; the
    // matching anchors tensor is [(rows*n_points), 2]. Parameters are looked
    // up under `param_prefix`.
    Tensor deform_attn(const Tensor& q_rows, const std::string& param_prefix,
                       const std::vector<Tensor>& value_grids, const std::vector<Tensor>& anchors,
                       const std::vector<int>& head_level);

private:

    PerceptionConfig cfg_;
    ParamStore params_;
    Tensor mru_anchor_;  // [(cells*n_points), 2] own-cell sampling anchors
};

}  // namespace escape
