#include "escape/perception.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace escape {

namespace {

Tensor make_random(Shape shape, Rng& rng, double scale) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

// 2-D sinusoidal positional table, [H*W, C]; fixed, not trained.
Tensor make_pos_encoding(int grid_h, int grid_w, int channels) {
    int half = channels / 2;
    std::vector<double> data(static_cast<size_t>(grid_h * grid_w * channels));
    for (int gy = 0; gy < grid_h; ++gy) {
        for (int gx = 0; gx < grid_w; ++gx) {
            double* row = data.data() + static_cast<size_t>((gy * grid_w + gx) * channels);
            // kept small so observation evidence, not the static table,
            // dominates the memory vectors
            constexpr double kPosAmplitude = 0.15;
            for (int i = 0; i < half / 2; ++i) {
                double freq = std::pow(10000.0, -2.0 * i / half);
                row[2 * i] = kPosAmplitude * std::sin(gx * freq);
                row[2 * i + 1] = kPosAmplitude * std::cos(gx * freq);
                row[half + 2 * i] = kPosAmplitude * std::sin(gy * freq);
                row[half + 2 * i + 1] = kPosAmplitude * std::cos(gy * freq);
            }
        }
    }
    return Tensor::from_data({static_cast<int64_t>(grid_h * grid_w), static_cast<int64_t>(channels)},
                             std::move(data), false);
}

// Deformable-attention style spread for the offset-predictor bias: one ring
// direction per head, radius growing with the point index. The pi/7 stagger
// keeps initial sample points off the sampler's lattice lines even when the
// anchors are integer grid coordinates.
Tensor make_offset_bias(int n_heads, int n_points, double radius_scale) {
    std::vector<double> data(static_cast<size_t>(n_heads * n_points * 2));
    for (int h = 0; h < n_heads; ++h) {
        for (int p = 0; p < n_points; ++p) {
            double angle = 2.0 * std::numbers::pi * h / n_heads + std::numbers::pi * (p + 1) / 7.0;
            double radius = radius_scale * (p + 1);
            data[static_cast<size_t>((h * n_points + p) * 2 + 0)] = radius * std::cos(angle);
            data[static_cast<size_t>((h * n_points + p) * 2 + 1)] = radius * std::sin(angle);
        }
    }
    return Tensor::from_data({static_cast<int64_t>(n_heads * n_points * 2)}, std::move(data), true);
}

// Each head starts focused on its own reference point (the OME points are the
// pillar's height anchors), so height-selective mixing exists from step one.
Tensor make_point_bias(int n_heads, int n_points) {
    std::vector<double> data(static_cast<size_t>(n_heads * n_points), 0.0);
    for (int h = 0; h < n_heads; ++h)
        data[static_cast<size_t>(h * n_points + h % n_points)] = 2.0;
    return Tensor::from_data({static_cast<int64_t>(n_heads * n_points)}, std::move(data), true);
}

// Identity-with-noise square init; lets attention blocks start as near
// pass-through so content survives the stack untrained.
Tensor make_identity_noise(int n, Rng& rng, double noise) {
    std::vector<double> data(static_cast<size_t>(n * n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            data[static_cast<size_t>(i * n + j)] = (i == j ? 1.0 : 0.0) + rng.normal() * noise;
    return Tensor::from_data({static_cast<int64_t>(n), static_cast<int64_t>(n)}, std::move(data), true);
}

}  // namespace

std::vector<uint8_t> SceneMap::multi_hot(double tau) const {
    auto d = probs.data();
    std::vector<uint8_t> out(d.size());
    for (size_t i = 0; i < d.size(); ++i) out[i] = d[i] >= tau ? 1 : 0;
    return out;
}

std::vector<double> SceneMap::probs_copy() const {
    auto d = probs.data();
    return std::vector<double>(d.begin(), d.end());
}

Tensor image_to_onehot(const std::vector<uint8_t>& semantic, int image_size, int categories) {
    if (static_cast<int>(semantic.size()) != image_size * image_size)
        throw std::invalid_argument("image_to_onehot: size mismatch");
    std::vector<double> data(static_cast<size_t>(image_size * image_size * categories), 0.0);
    for (int i = 0; i < image_size * image_size; ++i) {
        uint8_t cat = semantic[static_cast<size_t>(i)];
        if (cat < categories) data[static_cast<size_t>(i * categories + cat)] = 1.0;
    }
    return Tensor::from_data({image_size, image_size, categories}, std::move(data), false);
}

PerceptionModel::PerceptionModel(PerceptionConfig cfg, uint64_t init_seed) : cfg_(std::move(cfg)) {
    if (cfg_.channels % cfg_.n_heads != 0)
        throw std::invalid_argument("PerceptionModel: channels must divide by heads");
    if (cfg_.n_points % cfg_.n_levels() != 0)
        throw std::invalid_argument("PerceptionModel: points must split evenly across levels");
    if (cfg_.image_size % cfg_.strides[0] != 0)
        throw std::invalid_argument("PerceptionModel: image size must divide by the finest stride");
    for (size_t l = 1; l < cfg_.strides.size(); ++l)
        if (cfg_.image_size % cfg_.strides[l] != 0)
            throw std::invalid_argument("PerceptionModel: image size must divide by all strides");

    Rng rng(init_seed);
    const int C = cfg_.channels;
    const int Cf = cfg_.feat_channels;
    const int K = cfg_.categories;
    const int N = cfg_.cells();
    const int HP = cfg_.n_heads * cfg_.n_points;

    auto add = [&](const std::string& name, Shape shape, double scale, bool trainable = true) {
        params_.add(name, make_random(std::move(shape), rng, scale), trainable);
    };
    auto add_zeros = [&](const std::string& name, Shape shape) {
        params_.add(name, Tensor::zeros(std::move(shape), true));
    };
    auto add_ones = [&](const std::string& name, Shape shape) {
        params_.add(name, Tensor::full(std::move(shape), 1.0, true));
    };

    params_.add("query", make_random({N, C}, rng, 0.05), true);
    params_.add("pos", make_pos_encoding(cfg_.grid_h, cfg_.grid_w, C), false);

    // Backbone: stride-2 conv stack for the trained channels; each level is
    // completed with average-pooled one-hot semantics so samples carry the
    // pixel's category losslessly from the start.
    if (Cf <= K) throw std::invalid_argument("PerceptionModel: feat_channels must exceed categories");
    const int Ct = Cf - K;
    add("backbone.c1.w", {3, 3, K, 16}, 1.0 / std::sqrt(9.0 * K));
    add_zeros("backbone.c1.b", {16});
    add("backbone.c2.w", {3, 3, 16, Ct}, 1.0 / std::sqrt(9.0 * 16));
    add_zeros("backbone.c2.b", {Ct});
    add("backbone.c3.w", {3, 3, Ct, Ct}, 1.0 / std::sqrt(9.0 * Ct));
    add_zeros("backbone.c3.b", {Ct});

    const int dh = C / cfg_.n_heads;
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        std::string ome = "ome" + std::to_string(b);
        add(ome + ".off_w", {C, HP * 2}, 0.01);
        params_.add(ome + ".off_b", make_offset_bias(cfg_.n_heads, cfg_.n_points, 0.08), true);
        add_zeros(ome + ".wgt_w", {C, HP});
        params_.add(ome + ".wgt_b", make_point_bias(cfg_.n_heads, cfg_.n_points), true);
        for (int l = 0; l < cfg_.n_levels(); ++l) {
            // route the fixed semantic channels of the backbone levels into
            // every head's slice losslessly when the head width allows it
            Tensor val = make_random({Cf, C}, rng, 0.05);
            if (dh >= K) {
                auto w = val.mutable_data();
                for (int h = 0; h < cfg_.n_heads; ++h)
                    for (int k = 0; k < K; ++k) w[static_cast<size_t>((Cf - K + k) * C + h * dh + k)] = 1.0;
            }
            params_.add(ome + ".val" + std::to_string(l) + ".w", val, true);
            add_zeros(ome + ".val" + std::to_string(l) + ".b", {C});
        }
        params_.add(ome + ".out_w", make_identity_noise(C, rng, 0.02), true);
        add_zeros(ome + ".out_b", {C});
        add_ones(ome + ".ln_g", {C});
        add_zeros(ome + ".ln_b", {C});

        std::string mru = "mru" + std::to_string(b);
        for (const char* src : {".q", ".m"}) {
            std::string p = mru + src;
            add(p + ".off_w", {C, HP * 2}, 0.01);
            params_.add(p + ".off_b", make_offset_bias(cfg_.n_heads, cfg_.n_points, 0.005), true);
            add_zeros(p + ".wgt_w", {C, HP});
            add_zeros(p + ".wgt_b", {HP});
            params_.add(p + ".val_w", make_identity_noise(C, rng, 0.02), true);
            add_zeros(p + ".val_b", {C});
            params_.add(p + ".out_w", make_identity_noise(C, rng, 0.02), true);
            add_zeros(p + ".out_b", {C});
        }
        add_ones(mru + ".ln1_g", {C});
        add_zeros(mru + ".ln1_b", {C});
        add_ones(mru + ".lnm_g", {C});
        add_zeros(mru + ".lnm_b", {C});
        add(mru + ".ffn.w1", {C, 2 * C}, 1.0 / std::sqrt(C));
        add_zeros(mru + ".ffn.b1", {2 * C});
        // zero-init the second FFN layer: blocks start as clean pass-through
        add_zeros(mru + ".ffn.w2", {2 * C, C});
        add_zeros(mru + ".ffn.b2", {C});
        add_ones(mru + ".ln2_g", {C});
        add_zeros(mru + ".ln2_b", {C});
    }

    add_ones("map_head.ln_g", {C});
    add_zeros("map_head.ln_b", {C});
    add("map_head.w", {C, K}, 1.0 / std::sqrt(C));
    add_zeros("map_head.b", {K});

    // Grounding heads.
    add("ground.proj1.w", {3, 3, Cf, C}, 1.0 / std::sqrt(9.0 * Cf));
    add_zeros("ground.proj1.b", {C});
    add("ground.proj2.w", {1, 1, C, C}, 1.0 / std::sqrt(C));
    add_zeros("ground.proj2.b", {C});
    add("ground.mlp.w1", {C, C}, 1.0 / std::sqrt(C));
    add_zeros("ground.mlp.b1", {C});
    add("ground.mlp.w2", {C, C}, 1.0 / std::sqrt(C));
    add_zeros("ground.mlp.b2", {C});
    add("ground.static_table", {K, C}, 1.0 / std::sqrt(C));

    // Anchor each cell's MRU samples at its own grid coordinate.
    std::vector<double> anchor;
    anchor.reserve(static_cast<size_t>(N) * cfg_.n_points * 2);
    for (int gy = 0; gy < cfg_.grid_h; ++gy)
        for (int gx = 0; gx < cfg_.grid_w; ++gx)
            for (int k = 0; k < cfg_.n_points; ++k) {
                anchor.push_back(static_cast<double>(gx));
                anchor.push_back(static_cast<double>(gy));
            }
    mru_anchor_ = Tensor::from_data({static_cast<int64_t>(N) * cfg_.n_points, 2}, std::move(anchor), false);
}

Tensor PerceptionModel::query_param() const { return params_.find("query")->tensor; }
Tensor PerceptionModel::pos_encoding() const { return params_.find("pos")->tensor; }

MultiLevelFeatures PerceptionModel::backbone_features(const Tensor& obs_onehot) {
    auto p = [&](const char* name) { return params_.find(name)->tensor; };
    const int K = cfg_.categories;
    Tensor h1 = silu(conv2d(obs_onehot, p("backbone.c1.w"), p("backbone.c1.b"), 2, 1));
    Tensor t0 = silu(conv2d(h1, p("backbone.c2.w"), p("backbone.c2.b"), 2, 1));
    Tensor t1 = silu(conv2d(t0, p("backbone.c3.w"), p("backbone.c3.b"), 2, 1));
    auto with_semantics = [&](const Tensor& trained, int stride) {
        Tensor pooled = avg_pool(obs_onehot, stride);
        int64_t h = trained.extent(0), w = trained.extent(1);
        Tensor flat = concat_cols({reshape(trained, {h * w, trained.extent(2)}),
                                   reshape(pooled, {h * w, K})});
        return reshape(flat, {h, w, cfg_.feat_channels});
    };
    MultiLevelFeatures out;
    out.levels = {with_semantics(t0, cfg_.strides[0]), with_semantics(t1, cfg_.strides[1])};
    out.strides = cfg_.strides;
    return out;
}

FrustumIndex PerceptionModel::frustum_index(const CameraProjection& cam) const {
    FrustumIndex index;
    index.row2cell = std::make_shared<std::vector<int64_t>>();
    index.touched = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(cfg_.cells()), 0);
    if (cfg_.n_points != cfg_.pillars.n_ref)
        throw std::invalid_argument("frustum_index: n_points must equal the pillar n_ref");

    std::vector<std::vector<double>> anchors(static_cast<size_t>(cfg_.n_levels()));
    constexpr double kFarOut = -1e6;  // parked anchor: samples zero, no kink nearby

    for (int gy = 0; gy < cfg_.grid_h; ++gy) {
        for (int gx = 0; gx < cfg_.grid_w; ++gx) {
            auto pillar = pillar_reference_points(gx, gy, cfg_.pillars, cfg_.grid_res);
            std::vector<std::optional<PixelPoint>> projected;
            bool any = false;
            for (const Vec3& pt : pillar) {
                auto px = project_point(cam, pt);
                bool ok = in_frustum(px, cfg_.image_size, cfg_.image_size);
                projected.push_back(ok ? px : std::nullopt);
                any = any || ok;
            }
            if (!any) continue;  // drop cells whose pillar misses the frustum
            int64_t cell = gy * cfg_.grid_w + gx;
            index.row2cell->push_back(cell);
            (*index.touched)[static_cast<size_t>(cell)] = 1;
            for (int l = 0; l < cfg_.n_levels(); ++l) {
                // stride-2 conv chains with pad 1 center feature (i,j) on
                // pixel (s*j, s*i), so the level coordinate is pixel/s
                double s = cfg_.strides[static_cast<size_t>(l)];
                for (const auto& px : projected) {
                    anchors[static_cast<size_t>(l)].push_back(px ? px->u / s : kFarOut);
                    anchors[static_cast<size_t>(l)].push_back(px ? px->v / s : kFarOut);
                }
            }
        }
    }
    index.rows = static_cast<int64_t>(index.row2cell->size());
    for (int l = 0; l < cfg_.n_levels(); ++l) {
        index.level_anchors.push_back(Tensor::from_data(
            {index.rows * cfg_.pillars.n_ref, 2}, std::move(anchors[static_cast<size_t>(l)]), false));
    }
    return index;
}

Tensor PerceptionModel::deform_attn(const Tensor& q_rows, const std::string& prefix,
                                    const std::vector<Tensor>& value_grids,
                                    const std::vector<Tensor>& anchors,
                                    const std::vector<int>& head_level) {
    auto p = [&](const std::string& name) { return params_.find(prefix + name)->tensor; };
    const int64_t rows = q_rows.extent(0);
    const int C = cfg_.channels;
    const int heads = cfg_.n_heads;
    const int64_t pts = cfg_.n_points;
    const int dh = C / heads;

    Tensor off = linear(q_rows, p(".off_w"), p(".off_b"));
    Tensor wgt = softmax_groups(linear(q_rows, p(".wgt_w"), p(".wgt_b")), pts);

    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        int l = head_level[static_cast<size_t>(h)];
        Tensor off_h = slice_cols(off, static_cast<int64_t>(h) * pts * 2, pts * 2);
        Tensor points = add(reshape(off_h, {rows * pts, 2}), anchors[static_cast<size_t>(l)]);
        int64_t gh = value_grids[static_cast<size_t>(l)].extent(0);
        int64_t gw = value_grids[static_cast<size_t>(l)].extent(1);
        Tensor v_flat = reshape(value_grids[static_cast<size_t>(l)], {gh * gw, C});
        Tensor v_head = reshape(slice_cols(v_flat, static_cast<int64_t>(h) * dh, dh), {gh, gw, dh});
        Tensor samples = bilinear_sample(v_head, points);
        Tensor w_h = slice_cols(wgt, static_cast<int64_t>(h) * pts, pts);
        head_outs.push_back(weighted_sum_groups(samples, w_h));
    }
    Tensor attn = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return linear(attn, p(".out_w"), p(".out_b"));
}

Tensor PerceptionModel::ome_update(int block, const Tensor& queries, const MultiLevelFeatures& feats,
                                   const FrustumIndex& index) {
    if (index.rows == 0) return queries;  // nothing visible: memory passes through untouched
    std::string prefix = "ome" + std::to_string(block);
    auto p = [&](const std::string& name) { return params_.find(prefix + name)->tensor; };

    const int C = cfg_.channels;
    std::vector<Tensor> value_grids;
    for (int l = 0; l < cfg_.n_levels(); ++l) {
        const Tensor& f = feats.levels[static_cast<size_t>(l)];
        int64_t h = f.extent(0), w = f.extent(1);
        Tensor v = linear(reshape(f, {h * w, cfg_.feat_channels}),
                          p(".val" + std::to_string(l) + ".w"), p(".val" + std::to_string(l) + ".b"));
        value_grids.push_back(reshape(v, {h, w, C}));
    }

    // heads split evenly across the feature levels; each head's points are
    // the pillar's height anchors on its level
    std::vector<int> head_level(static_cast<size_t>(cfg_.n_heads), 0);
    for (int h = 0; h < cfg_.n_heads; ++h)
        head_level[static_cast<size_t>(h)] = h * cfg_.n_levels() / cfg_.n_heads;

    // pre-norm block: queries are normalized for the attention read, the
    // write itself stays additive so observation evidence accumulates
    Tensor normed = layer_norm(queries, p(".ln_g"), p(".ln_b"));
    Tensor q_rows = gather_rows(normed, index.row2cell);
    Tensor attn = deform_attn(q_rows, prefix, value_grids, index.level_anchors, head_level);
    Tensor agg = scatter_sum_rows(attn, index.row2cell, cfg_.cells());
    Tensor y = add(queries, agg);
    return select_rows_where(y, queries, index.touched);
}

Tensor PerceptionModel::mru_update(int block, const Tensor& queries, const Tensor& memory_prev) {
    std::string prefix = "mru" + std::to_string(block);
    auto p = [&](const std::string& name) { return params_.find(prefix + name)->tensor; };
    const int C = cfg_.channels;
    const int64_t N = cfg_.cells();

    const Tensor& anchor = mru_anchor_;
    (void)N;
    std::vector<int> all_level0(static_cast<size_t>(cfg_.n_heads), 0);
    auto value_of = [&](const Tensor& src, const std::string& sub) {
        Tensor v = linear(src, p(sub + ".val_w"), p(sub + ".val_b"));
        return reshape(v, {cfg_.grid_h, cfg_.grid_w, C});
    };

    // pre-norm block; the cached memory is normalized before its value
    // projection so retention cannot compound magnitudes across steps
    Tensor h = layer_norm(queries, p(".ln1_g"), p(".ln1_b"));
    Tensor m_normed = layer_norm(memory_prev, p(".lnm_g"), p(".lnm_b"));
    Tensor attn_q = deform_attn(h, prefix + ".q", {value_of(h, ".q")}, {anchor}, all_level0);
    Tensor attn_m = deform_attn(h, prefix + ".m", {value_of(m_normed, ".m")}, {anchor}, all_level0);
    Tensor y = add(queries, add(attn_q, attn_m));  // sum over the two value sets

    Tensor f = linear(silu(linear(layer_norm(y, p(".ln2_g"), p(".ln2_b")), p(".ffn.w1"), p(".ffn.b1"))),
                      p(".ffn.w2"), p(".ffn.b2"));
    return add(y, f);
}

Tensor PerceptionModel::map_head(const Tensor& memory) {
    Tensor h = layer_norm(memory, params_.find("map_head.ln_g")->tensor,
                          params_.find("map_head.ln_b")->tensor);
    return sigmoid(linear(h, params_.find("map_head.w")->tensor, params_.find("map_head.b")->tensor));
}

StepResult PerceptionModel::memory_step(const EpisodicMemory* prev, const ObservationFrame& obs,
                                        bool keep_graph) {
    std::unique_ptr<NoGradGuard> guard;
    if (!keep_graph) guard = std::make_unique<NoGradGuard>();

    Tensor onehot = image_to_onehot(obs.semantic, cfg_.image_size, cfg_.categories);
    MultiLevelFeatures feats = backbone_features(onehot);
    FrustumIndex index = frustum_index(obs.projection);

    Tensor x = add(query_param(), pos_encoding());
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        if (!cfg_.no_ome) x = ome_update(b, x, feats, index);
        if (!cfg_.no_mru) x = mru_update(b, x, prev ? prev->m : x);
    }

    StepResult out;
    out.memory.m = x;
    out.memory.timestep = prev ? prev->timestep + 1 : 0;
    out.map.probs = map_head(x);
    out.map.grid_h = cfg_.grid_h;
    out.map.grid_w = cfg_.grid_w;
    out.map.categories = cfg_.categories;
    out.features = feats;
    return out;
}

Tensor PerceptionModel::pixel_embeddings(const MultiLevelFeatures& feats) {
    auto p = [&](const char* name) { return params_.find(name)->tensor; };
    Tensor h = silu(conv2d(feats.levels[0], p("ground.proj1.w"), p("ground.proj1.b"), 1, 1));
    Tensor e = conv2d(h, p("ground.proj2.w"), p("ground.proj2.b"), 1, 0);
    int64_t eh = e.extent(0), ew = e.extent(1);
    return reshape(e, {eh * ew, cfg_.channels});
}

std::optional<Tensor> PerceptionModel::mask_pool(const Tensor& memory,
                                                 const std::vector<uint8_t>& multi_hot,
                                                 int category) const {
    auto rows = std::make_shared<std::vector<int64_t>>();
    const int K = cfg_.categories;
    for (int64_t i = 0; i < cfg_.cells(); ++i)
        if (multi_hot[static_cast<size_t>(i * K + category)]) rows->push_back(i);
    if (rows->empty()) return std::nullopt;
    return mean_axis0(gather_rows(memory, rows));
}

Tensor PerceptionModel::object_query(const Tensor& pooled) {
    auto p = [&](const char* name) { return params_.find(name)->tensor; };
    return linear(silu(linear(pooled, p("ground.mlp.w1"), p("ground.mlp.b1"))), p("ground.mlp.w2"),
                  p("ground.mlp.b2"));
}

Tensor PerceptionModel::static_object_query(int category) {
    auto rows = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{category});
    return gather_rows(params_.find("ground.static_table")->tensor, rows);
}

Tensor PerceptionModel::similarity_scores(const Tensor& query, const Tensor& embeddings) {
    int e = embedding_grid();
    Tensor dots = matmul_nt(embeddings, query);            // [E*E, 1]
    Tensor scores = reshape(sigmoid(dots), {e, e});        // sigmoid then upsample
    return upsample_bilinear(scores, cfg_.image_size / e);
}

}  // namespace escape
