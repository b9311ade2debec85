#include "escape/monitor.hpp"

#include <cmath>

#include "escape/perception.hpp"
#include "escape/rng.hpp"

namespace escape {

namespace {

Tensor make_random(Shape shape, Rng& rng, double scale) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

MonitorModel::MonitorModel(MonitorConfig cfg, uint64_t init_seed) : cfg_(cfg) {
    Rng rng(init_seed);
    const int K = cfg_.categories;
    auto add = [&](const std::string& name, Shape shape, double scale) {
        params_.add(name, make_random(std::move(shape), rng, scale), true);
    };
    auto add_zeros = [&](const std::string& name, Shape shape) {
        params_.add(name, Tensor::zeros(std::move(shape), true));
    };
    add("img.c1.w", {3, 3, K, cfg_.img_c1}, 1.0 / std::sqrt(9.0 * K));
    add_zeros("img.c1.b", {cfg_.img_c1});
    add("img.c2.w", {3, 3, cfg_.img_c1, cfg_.img_c2}, 1.0 / std::sqrt(9.0 * cfg_.img_c1));
    add_zeros("img.c2.b", {cfg_.img_c2});
    add("img.c3.w", {3, 3, cfg_.img_c2, cfg_.img_c3}, 1.0 / std::sqrt(9.0 * cfg_.img_c2));
    add_zeros("img.c3.b", {cfg_.img_c3});
    add("map.c1.w", {3, 3, K, cfg_.map_c}, 1.0 / std::sqrt(9.0 * K));
    add_zeros("map.c1.b", {cfg_.map_c});

    int img_edge = cfg_.image_size / 8;
    int map_edge = (cfg_.crop + 2 * 1 - 3) / 2 + 1;
    int features = img_edge * img_edge * cfg_.img_c3 + map_edge * map_edge * cfg_.map_c;
    add("head.w", {features, K}, 1.0 / std::sqrt(static_cast<double>(features)));
    add_zeros("head.b", {K});
}

Tensor MonitorModel::logits(const Tensor& image_onehot, const Tensor& map_crop) {
    auto p = [&](const char* name) { return params_.find(name)->tensor; };
    Tensor h1 = silu(conv2d(image_onehot, p("img.c1.w"), p("img.c1.b"), 2, 1));
    Tensor h2 = silu(conv2d(h1, p("img.c2.w"), p("img.c2.b"), 2, 1));
    Tensor h3 = silu(conv2d(h2, p("img.c3.w"), p("img.c3.b"), 2, 1));
    Tensor m1 = silu(conv2d(map_crop, p("map.c1.w"), p("map.c1.b"), 2, 1));
    Tensor img_flat = reshape(h3, {1, h3.numel()});
    Tensor map_flat = reshape(m1, {1, m1.numel()});
    Tensor feats = concat_cols({img_flat, map_flat});
    return linear(feats, p("head.w"), p("head.b"));
}

Tensor MonitorModel::crop_tensor(const std::vector<uint8_t>& map_multihot, int agent_row,
                                 int agent_col) const {
    const int K = cfg_.categories;
    const int half = cfg_.crop / 2;
    std::vector<double> data(static_cast<size_t>(cfg_.crop * cfg_.crop * K), 0.0);
    for (int r = 0; r < cfg_.crop; ++r) {
        int gy = agent_row - half + r;
        if (gy < 0 || gy >= cfg_.grid_h) continue;
        for (int c = 0; c < cfg_.crop; ++c) {
            int gx = agent_col - half + c;
            if (gx < 0 || gx >= cfg_.grid_w) continue;
            for (int k = 0; k < K; ++k)
                data[static_cast<size_t>((r * cfg_.crop + c) * K + k)] =
                    map_multihot[static_cast<size_t>((gy * cfg_.grid_w + gx) * K + k)] ? 1.0 : 0.0;
        }
    }
    return Tensor::from_data({cfg_.crop, cfg_.crop, K}, std::move(data), false);
}

std::vector<uint8_t> MonitorModel::predict(const std::vector<uint8_t>& semantic,
                                           const std::vector<uint8_t>& map_multihot, int agent_row,
                                           int agent_col) {
    NoGradGuard guard;
    Tensor image = image_to_onehot(semantic, cfg_.image_size, cfg_.categories);
    Tensor crop = crop_tensor(map_multihot, agent_row, agent_col);
    Tensor out = sigmoid(logits(image, crop));
    std::vector<uint8_t> bits(static_cast<size_t>(cfg_.categories), 0);
    for (int k = 0; k < cfg_.categories; ++k)
        bits[static_cast<size_t>(k)] = out.data()[static_cast<size_t>(k)] >= 0.5 ? 1 : 0;
    return bits;
}

}  // namespace escape
