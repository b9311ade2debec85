#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>

#include "escape/losses.hpp"
#include "escape/training.hpp"

using namespace escape;

namespace {

std::vector<EpisodeRecord> tiny_dataset(int n, uint64_t seed = 500) {
    WorldConfig world;
    std::vector<EpisodeRecord> out;
    for (int i = 0; i < n; ++i) {
        ExpertTrajectory traj;
        EpisodeSetup setup = gen_solvable_episode(seed + static_cast<uint64_t>(i) * 97, world, &traj);
        EpisodeRecord rec;
        rec.seed = seed + static_cast<uint64_t>(i) * 97;
        rec.task = setup.task;
        rec.expert_length = traj.length();
        rec.frames = std::move(traj.frames);
        // keep runtime small
        if (rec.frames.size() > 10) rec.frames.resize(10);
        out.push_back(std::move(rec));
    }
    return out;
}

std::vector<char> slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("miou closed forms") {
    // pred == gt -> 1
    std::vector<uint8_t> a{1, 0, 1, 0, 0, 1, 0, 0};
    auto same = miou(a, a, 2);
    CHECK(same.mean == doctest::Approx(1.0));

    // disjoint non-empty sets -> 0
    std::vector<uint8_t> p{1, 0, 0, 0};
    std::vector<uint8_t> g{0, 0, 1, 0};
    CHECK(miou(p, g, 1).mean == doctest::Approx(0.0));

    // 4x4 half overlap: pred covers 8 cells, gt covers 8, overlap 4 -> 4/12
    std::vector<uint8_t> pred(16, 0), gt(16, 0);
    for (int i = 0; i < 8; ++i) pred[static_cast<size_t>(i)] = 1;
    for (int i = 4; i < 12; ++i) gt[static_cast<size_t>(i)] = 1;
    CHECK(miou(pred, gt, 1).mean == doctest::Approx(1.0 / 3));

    // symmetry and category permutation invariance
    std::vector<uint8_t> x{1, 0, 0, 1, 1, 1, 0, 0};
    std::vector<uint8_t> y{1, 1, 0, 0, 0, 1, 0, 1};
    CHECK(miou(x, y, 2).mean == doctest::Approx(miou(y, x, 2).mean));
    auto swap_cats = [](const std::vector<uint8_t>& v) {
        std::vector<uint8_t> out(v.size());
        for (size_t i = 0; i < v.size(); i += 2) {
            out[i] = v[i + 1];
            out[i + 1] = v[i];
        }
        return out;
    };
    CHECK(miou(swap_cats(x), swap_cats(y), 2).mean == doctest::Approx(miou(x, y, 2).mean));

    // empty-union categories are excluded from the mean
    std::vector<uint8_t> p2{1, 0, 1, 0};
    std::vector<uint8_t> g2{1, 0, 0, 0};
    auto r = miou(p2, g2, 2);
    CHECK(std::isnan(r.per_category[1]));
    CHECK(r.mean == doctest::Approx(0.5));
}

TEST_CASE("joint loss arithmetic and linearity in lambda") {
    Tensor map_l = Tensor::scalar(0.5);
    Tensor img_l = Tensor::scalar(0.25);
    CHECK(joint_loss(map_l, img_l, 1.0).item() == doctest::Approx(0.75));
    CHECK(joint_loss(map_l, img_l, 0.0).item() == doctest::Approx(0.5));

    double l0 = joint_loss(map_l, img_l, 0.0).item();
    double l1 = joint_loss(map_l, img_l, 1.0).item();
    double l2 = joint_loss(map_l, img_l, 2.0).item();
    CHECK(l2 - l1 == doctest::Approx(l1 - l0).epsilon(1e-12));  // affine in lambda
}

TEST_CASE("joint gradient is the sum of the parts") {
    // three backward passes: grad(L) == grad(map) + lambda * grad(img)
    Rng rng(5);
    std::vector<double> wdata(6);
    for (double& v : wdata) v = rng.normal();
    const double lambda = 1.7;

    auto build = [&](int mode) {  // 0: joint, 1: map only, 2: img only
        ParamStore store;
        store.add("w", Tensor::from_data({2, 3}, wdata, true));
        Tensor w = store.find("w")->tensor;
        Tensor probs_map = sigmoid(slice_cols(w, 0, 2));
        Tensor probs_img = sigmoid(slice_cols(w, 1, 2));
        Tensor lm = bce_mean(probs_map, Tensor::from_data({2, 2}, {1, 0, 0, 1}));
        Tensor li = bce_mean(probs_img, Tensor::from_data({2, 2}, {0, 1, 1, 0}));
        Tensor loss = mode == 0 ? joint_loss(lm, li, lambda) : mode == 1 ? lm : li;
        loss.backward();
        auto g = store.find("w")->tensor.grad();
        return std::vector<double>(g.begin(), g.end());
    };
    auto gj = build(0);
    auto gm = build(1);
    auto gi = build(2);
    for (size_t i = 0; i < gj.size(); ++i)
        CHECK(gj[i] == doctest::Approx(gm[i] + lambda * gi[i]).epsilon(1e-10));
}

TEST_CASE("verify_gradients passes and is deterministic; corruption is localized") {
    auto a = verify_gradients(3, 2, 1e-5);
    CHECK(a.pass);
    REQUIRE(a.components.size() == 7);
    for (const auto& c : a.components) {
        CHECK(c.pass);
        CHECK(c.max_rel_err < 1e-5);
    }
    auto b = verify_gradients(3, 2, 1e-5);
    for (size_t i = 0; i < a.components.size(); ++i)
        CHECK(a.components[i].max_rel_err == b.components[i].max_rel_err);

    auto corrupted = verify_gradients(3, 1, 1e-5, "grounding");
    CHECK(!corrupted.pass);
    for (const auto& c : corrupted.components)
        CHECK(c.pass == (c.name != "grounding"));
}

TEST_CASE("perception training descends and is deterministic per seed") {
    namespace fs = std::filesystem;
    auto episodes = tiny_dataset(1);
    PerceptionConfig pc;
    pc.grid_h = pc.grid_w = 20;

    TrainConfig tc;
    tc.epochs = 2;
    tc.batch = 2;
    tc.lr = 1e-3;

    PerceptionModel m1(pc, tc.seed);
    TrainResult r1 = train_perception(m1, episodes, tc);
    CHECK(r1.final_loss < r1.initial_loss);  // sanity descent
    CHECK(!r1.curve.empty());

    PerceptionModel m2(pc, tc.seed);
    TrainResult r2 = train_perception(m2, episodes, tc);
    fs::path p1 = fs::temp_directory_path() / "esc_train_a.ckpt";
    fs::path p2 = fs::temp_directory_path() / "esc_train_b.ckpt";
    save_checkpoint(m1.params(), p1);
    save_checkpoint(m2.params(), p2);
    CHECK(slurp(p1) == slurp(p2));  // byte-identical checkpoints
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("training log CSV has the pinned columns") {
    namespace fs = std::filesystem;
    auto episodes = tiny_dataset(1, 700);
    PerceptionModel model(PerceptionConfig{}, 9);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch = 2;
    fs::path csv = fs::temp_directory_path() / "esc_train_log.csv";
    train_perception(model, episodes, tc, csv);
    std::ifstream f(csv);
    std::string header;
    std::getline(f, header);
    CHECK(header == "step,map_loss,img_loss,joint_loss,lr");
    std::string row;
    CHECK(std::getline(f, row));
    fs::remove(csv);
}

TEST_CASE("monitor training: all-negative labels drive predictions to zero") {
    auto episodes = tiny_dataset(1, 900);
    for (auto& ep : episodes)
        for (auto& frame : ep.frames) std::fill(frame.manip.begin(), frame.manip.end(), 0);

    MonitorModel model(MonitorConfig{}, 4);
    TrainConfig tc;
    tc.monitor_epochs = 8;
    tc.monitor_lr = 3e-3;
    tc.batch = 4;
    train_monitor(model, episodes, tc);

    int positive_bits = 0;
    for (const auto& frame : episodes[0].frames) {
        int row = static_cast<int>(frame.obs.pose.y / 0.25);
        int col = static_cast<int>(frame.obs.pose.x / 0.25);
        auto bits = model.predict(frame.obs.semantic, frame.map_label, row, col);
        for (uint8_t b : bits) positive_bits += b;
    }
    CHECK(positive_bits == 0);
}

TEST_CASE("monitor training is deterministic per seed") {
    namespace fs = std::filesystem;
    auto episodes = tiny_dataset(1, 1100);
    TrainConfig tc;
    tc.monitor_epochs = 2;
    tc.batch = 4;
    MonitorModel m1(MonitorConfig{}, tc.seed), m2(MonitorConfig{}, tc.seed);
    train_monitor(m1, episodes, tc);
    train_monitor(m2, episodes, tc);
    fs::path p1 = fs::temp_directory_path() / "esc_mon_a.ckpt";
    fs::path p2 = fs::temp_directory_path() / "esc_mon_b.ckpt";
    save_checkpoint(m1.params(), p1);
    save_checkpoint(m2.params(), p2);
    CHECK(slurp(p1) == slurp(p2));
    fs::remove(p1);
    fs::remove(p2);
}
