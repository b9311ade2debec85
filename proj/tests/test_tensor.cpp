#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "escape/checkpoint.hpp"
#include "escape/gradcheck.hpp"
#include "escape/optim.hpp"
#include "escape/rng.hpp"
#include "escape/tensor.hpp"

using namespace escape;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
    std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
    for (double& v : data) v = rng.normal() * scale;
    return Tensor::from_data(std::move(shape), std::move(data), requires_grad);
}

}  // namespace

TEST_CASE("bce closed-form values") {
    CHECK(bce(0.5, 1.0) == doctest::Approx(0.693147).epsilon(1e-5));
    CHECK(bce(1.0 - kBceEps, 1.0) == doctest::Approx(0.0).epsilon(1e-6));
    // batch {(0.9,1),(0.1,0)} -> mean of two identical terms
    Tensor p = Tensor::from_data({2}, {0.9, 0.1});
    Tensor y = Tensor::from_data({2}, {1.0, 0.0});
    CHECK(bce_mean(p, y).item() == doctest::Approx(0.105361).epsilon(1e-5));
}

TEST_CASE("bce_mean rejects non-binary labels") {
    Tensor p = Tensor::from_data({1}, {0.3});
    Tensor y = Tensor::from_data({1}, {0.5});
    CHECK_THROWS_AS(bce_mean(p, y), std::invalid_argument);
}

TEST_CASE("bilinear_sample lattice, gate and hand case") {
    // 2x2 map, one channel, corner values {0,1,2,3} row-major
    Tensor map = Tensor::from_data({2, 2, 1}, {0.0, 1.0, 2.0, 3.0});

    Tensor mid = bilinear_sample(map, Tensor::from_data({1, 2}, {0.5, 0.5}));
    CHECK(mid.data()[0] == doctest::Approx(1.5));  // 4-term bilinear mean

    Tensor corner = bilinear_sample(map, Tensor::from_data({1, 2}, {1.0, 1.0}));
    CHECK(corner.data()[0] == doctest::Approx(3.0));  // exact at lattice point

    Tensor oob = bilinear_sample(map, Tensor::from_data({1, 2}, {-5.0, -5.0}));
    CHECK(oob.data()[0] == 0.0);  // out-of-bounds gate
}

TEST_CASE("bilinear_sample is continuous across cell boundaries") {
    Rng rng(11);
    Tensor map = random_tensor({5, 7, 3}, rng, 1.0, false);
    for (double u : {1.0, 2.0, 3.0}) {
        Tensor lo = bilinear_sample(map, Tensor::from_data({1, 2}, {u - 1e-9, 2.3}));
        Tensor hi = bilinear_sample(map, Tensor::from_data({1, 2}, {u + 1e-9, 2.3}));
        for (int c = 0; c < 3; ++c)
            CHECK(std::abs(lo.data()[c] - hi.data()[c]) < 1e-6);
    }
}

TEST_CASE("backward on sum and quadratic") {
    Rng rng(3);
    Tensor w = random_tensor({4}, rng);
    Tensor loss = sum(w);
    loss.backward();
    for (int i = 0; i < 4; ++i) CHECK(w.grad()[i] == doctest::Approx(1.0));

    w.zero_grad();
    Tensor loss2 = sum(mul(w, w));
    loss2.backward();
    for (int i = 0; i < 4; ++i) CHECK(w.grad()[i] == doctest::Approx(2.0 * w.data()[i]));
}

TEST_CASE("backward accumulates across calls") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
    sum(w).backward();
    sum(w).backward();
    CHECK(w.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward rejects non-scalar loss") {
    Tensor w = Tensor::from_data({2}, {1.0, 2.0}, true);
    CHECK_THROWS_AS(add(w, w).backward(), std::invalid_argument);
}

TEST_CASE("finite differences validate composite graphs") {
    Rng rng(7);
    ParamStore store;
    store.add("w1", random_tensor({3, 5}, rng, 0.5));
    store.add("b1", random_tensor({5}, rng, 0.1));
    store.add("w2", random_tensor({5, 2}, rng, 0.5));
    store.add("b2", random_tensor({2}, rng, 0.1));
    Tensor x = random_tensor({4, 3}, rng, 1.0, false);
    Tensor labels = Tensor::from_data({4, 2}, {1, 0, 0, 1, 1, 1, 0, 0});

    auto loss_fn = [&] {
        Tensor h = silu(linear(x, store.find("w1")->tensor, store.find("b1")->tensor));
        Tensor p = sigmoid(linear(h, store.find("w2")->tensor, store.find("b2")->tensor));
        return bce_mean(p, labels);
    };
    auto report = finite_diff_check(loss_fn, store.trainable(), 1e-5, 1e-5);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-5);
}

TEST_CASE("finite differences on quadratic are exact to roundoff") {
    Rng rng(9);
    ParamStore store;
    store.add("w", random_tensor({6}, rng));
    auto loss_fn = [&] {
        Tensor w = store.find("w")->tensor;
        return sum(mul(w, w));
    };
    auto report = finite_diff_check(loss_fn, store.trainable(), 1e-5, 1e-7);
    CHECK(report.pass);
    CHECK(report.max_rel_err < 1e-8);
}

TEST_CASE("layer_norm, softmax, attention plumbing pass gradient checks") {
    Rng rng(21);
    ParamStore store;
    store.add("x", random_tensor({2, 8}, rng));
    store.add("g", random_tensor({8}, rng, 0.3));
    store.add("b", random_tensor({8}, rng, 0.3));
    store.add("w", random_tensor({2, 6}, rng));
    store.add("s", random_tensor({12, 4}, rng));

    auto loss_fn = [&] {
        Tensor ln = layer_norm(store.find("x")->tensor, store.find("g")->tensor, store.find("b")->tensor);
        Tensor sm = softmax_groups(store.find("w")->tensor, 3);
        Tensor ws = weighted_sum_groups(store.find("s")->tensor, sm);
        Tensor joined = concat_cols({ws, slice_cols(ln, 0, 4)});
        auto rows = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{1, 0, 1});
        Tensor g = gather_rows(joined, rows);
        auto dst = std::make_shared<std::vector<int64_t>>(std::vector<int64_t>{0, 1, 0});
        Tensor sc = scatter_sum_rows(g, dst, 2);
        return mean(mul(sc, sc));
    };
    auto report = finite_diff_check(loss_fn, store.trainable(), 1e-5, 1e-5);
    CHECK(report.pass);
}

TEST_CASE("conv2d and upsample pass gradient checks") {
    Rng rng(33);
    ParamStore store;
    store.add("x", random_tensor({6, 6, 2}, rng));
    store.add("k", random_tensor({3, 3, 2, 3}, rng, 0.4));
    store.add("kb", random_tensor({3}, rng, 0.1));
    auto loss_fn = [&] {
        Tensor y = conv2d(store.find("x")->tensor, store.find("k")->tensor, store.find("kb")->tensor, 2, 1);
        Tensor up = upsample_bilinear(reshape(silu(y), Shape{3, 9}), 2);
        return mean(mul(up, up));
    };
    auto report = finite_diff_check(loss_fn, store.trainable(), 1e-5, 1e-5);
    CHECK(report.pass);
}

TEST_CASE("bilinear_sample gradients w.r.t. map and points") {
    Rng rng(55);
    ParamStore store;
    store.add("map", random_tensor({4, 5, 3}, rng));
    store.add("pts", Tensor::from_data({3, 2}, {1.3, 2.4, 0.6, 0.5, 3.4, 1.7}, true));
    auto loss_fn = [&] {
        Tensor s = bilinear_sample(store.find("map")->tensor, store.find("pts")->tensor);
        return mean(mul(s, s));
    };
    auto report = finite_diff_check(loss_fn, store.trainable(), 1e-6, 1e-4);
    CHECK(report.pass);
}

TEST_CASE("mlp identity and zero-weight cases") {
    // identity-initialized single layer, zero bias -> output == input
    Tensor x = Tensor::from_data({1, 3}, {0.3, -0.7, 1.1});
    std::vector<double> eye(9, 0.0);
    eye[0] = eye[4] = eye[8] = 1.0;
    Tensor w = Tensor::from_data({3, 3}, eye);
    Tensor b = Tensor::zeros({3});
    Tensor y = linear(x, w, b);
    for (int i = 0; i < 3; ++i) CHECK(y.data()[i] == doctest::Approx(x.data()[i]));

    // zero weights, bias b -> activation(b)
    Tensor w0 = Tensor::zeros({3, 3});
    Tensor b1 = Tensor::from_data({3}, {0.5, -0.5, 2.0});
    Tensor y2 = silu(linear(x, w0, b1));
    for (int i = 0; i < 3; ++i) {
        double v = b1.data()[i];
        CHECK(y2.data()[i] == doctest::Approx(v / (1.0 + std::exp(-v))));
    }
}

TEST_CASE("mlp forward matches straight-line re-evaluation") {
    Rng rng(17);
    Tensor x = random_tensor({1, 4}, rng, 1.0, false);
    Tensor w1 = random_tensor({4, 8}, rng, 0.5, false);
    Tensor b1 = random_tensor({8}, rng, 0.1, false);
    Tensor w2 = random_tensor({8, 4}, rng, 0.5, false);
    Tensor b2 = random_tensor({4}, rng, 0.1, false);
    Tensor y = linear(silu(linear(x, w1, b1)), w2, b2);

    // independent loop-free oracle
    double h[8];
    for (int j = 0; j < 8; ++j) {
        double acc = b1.data()[j];
        for (int k = 0; k < 4; ++k) acc += x.data()[k] * w1.data()[k * 8 + j];
        h[j] = acc / (1.0 + std::exp(-acc));
    }
    for (int j = 0; j < 4; ++j) {
        double acc = b2.data()[j];
        for (int k = 0; k < 8; ++k) acc += h[k] * w2.data()[k * 4 + j];
        CHECK(y.data()[j] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("adamw single step and decoupled decay") {
    // one step on scalar w=1, g=1, lr=0.1 -> w ~= 0.9
    ParamStore store;
    store.add("w", Tensor::from_data({1}, {1.0}, true));
    AdamW opt(store.trainable(), AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
    Tensor w = store.find("w")->tensor;
    sum(w).backward();
    opt.step();
    CHECK(store.find("w")->tensor.data()[0] == doctest::Approx(0.9).epsilon(1e-7));

    // zero grad, zero weight decay -> unchanged
    ParamStore s2;
    s2.add("w", Tensor::from_data({1}, {0.7}, true));
    AdamW opt2(s2.trainable(), AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.0});
    opt2.step();
    CHECK(s2.find("w")->tensor.data()[0] == doctest::Approx(0.7));

    // zero grad, wd=0.01 -> shrinks by exactly lr*wd*w
    ParamStore s3;
    s3.add("w", Tensor::from_data({1}, {0.7}, true));
    AdamW opt3(s3.trainable(), AdamWConfig{0.1, 0.9, 0.999, 1e-8, 0.01});
    opt3.step();
    CHECK(s3.find("w")->tensor.data()[0] == doctest::Approx(0.7 - 0.1 * 0.01 * 0.7).epsilon(1e-15));
}

TEST_CASE("adamw rejects non-positive lr") {
    ParamStore store;
    store.add("w", Tensor::from_data({1}, {1.0}, true));
    CHECK_THROWS_AS(AdamW(store.trainable(), AdamWConfig{0.0}), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip is byte-identical") {
    namespace fs = std::filesystem;
    Rng rng(101);
    ParamStore store;
    store.add("layer.w", random_tensor({3, 4}, rng));
    store.add("layer.b", random_tensor({4}, rng));
    store.add("pos", random_tensor({2, 2, 2}, rng), /*trainable=*/false);

    fs::path p1 = fs::temp_directory_path() / "esc_ckpt_test_1.bin";
    fs::path p2 = fs::temp_directory_path() / "esc_ckpt_test_2.bin";
    save_checkpoint(store, p1);
    load_checkpoint(store, p1);
    save_checkpoint(store, p2);

    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::vector<char> a((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::vector<char> b((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(a == b);
    CHECK(!a.empty());
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("finite checks flag non-finite op results") {
    Tensor big = Tensor::from_data({1}, {1e308});
    CHECK_THROWS_AS(mul(big, big), std::runtime_error);
}

TEST_CASE("rng determinism and uniform split") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    Rng r(7);
    int lo = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i)
        if (r.uniform_int(2) == 0) ++lo;
    CHECK(lo > n / 2 - n / 20);
    CHECK(lo < n / 2 + n / 20);
}
