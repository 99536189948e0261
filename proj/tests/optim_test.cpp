// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ptml/errors.hpp"
#include "ptml/optim.hpp"
#include "ptml/rng.hpp"

using namespace ptml;

TEST_CASE("adamw matches a hand-run of the update rule") {
    AdamWConfig cfg;
    cfg.lr = 0.01;
    cfg.weight_decay = 0.01;
    AdamW opt(cfg);

    io::TensorMap params{{"w", Tensor::from({3}, {1.0, -2.0, 0.5})}};
    std::vector<io::TensorMap> grads = {
        {{"w", Tensor::from({3}, {0.1, -0.2, 0.3})}},
        {{"w", Tensor::from({3}, {-0.05, 0.15, 0.25})}},
    };

    // mirror the arithmetic exactly: double moments, one float cast per step
    std::vector<double> m(3, 0.0), v(3, 0.0);
    std::vector<float> expect = {1.0f, -2.0f, 0.5f};
    for (int step = 1; step <= 2; ++step) {
        const double bc1 = 1.0 - std::pow(cfg.beta1, step);
        const double bc2 = 1.0 - std::pow(cfg.beta2, step);
        for (int i = 0; i < 3; ++i) {
            const double g = grads[static_cast<size_t>(step - 1)].at("w").get(i);
            m[static_cast<size_t>(i)] = cfg.beta1 * m[static_cast<size_t>(i)] + (1 - cfg.beta1) * g;
            v[static_cast<size_t>(i)] =
                cfg.beta2 * v[static_cast<size_t>(i)] + (1 - cfg.beta2) * g * g;
            const double upd = (m[static_cast<size_t>(i)] / bc1) /
                                   (std::sqrt(v[static_cast<size_t>(i)] / bc2) + cfg.eps) +
                               cfg.weight_decay * expect[static_cast<size_t>(i)];
            expect[static_cast<size_t>(i)] =
                static_cast<float>(expect[static_cast<size_t>(i)] - cfg.lr * upd);
        }
        opt.step(params, grads[static_cast<size_t>(step - 1)]);
    }
    CHECK(opt.steps_taken() == 2);
    for (int i = 0; i < 3; ++i) {
        // same double expression tree and one float cast per step: bit exact
        CHECK(params.at("w").get(i) == static_cast<double>(expect[static_cast<size_t>(i)]));
    }
}

TEST_CASE("zero learning rate leaves parameters bitwise unchanged") {
    Rng rng(7);
    io::TensorMap params{{"a", Tensor::gaussian({4, 5}, rng)}, {"b", Tensor::gaussian({6}, rng)}};
    io::TensorMap before = params;
    AdamW opt({.lr = 0.0, .weight_decay = 0.3, .neuron_grad_scale = true});
    for (int step = 0; step < 3; ++step) {
        io::TensorMap grads{{"a", Tensor::gaussian({4, 5}, rng)},
                            {"b", Tensor::gaussian({6}, rng)}};
        opt.step(params, grads);
    }
    CHECK(ops::bit_equal(params.at("a"), before.at("a")));
    CHECK(ops::bit_equal(params.at("b"), before.at("b")));
}

TEST_CASE("no gradient signal and no decay means no movement") {
    Rng rng(11);
    io::TensorMap params{{"w", Tensor::gaussian({8}, rng)}};
    io::TensorMap before = params;
    io::TensorMap zero{{"w", Tensor::zeros({8})}};

    SUBCASE("weight_decay 0") {
        AdamW opt({.lr = 0.05});
        for (int i = 0; i < 10; ++i) opt.step(params, zero);
        CHECK(ops::bit_equal(params.at("w"), before.at("w")));
    }
    SUBCASE("weight_decay shrinks even without gradients") {
        AdamW opt({.lr = 0.05, .weight_decay = 0.5});
        opt.step(params, zero);
        for (int64_t i = 0; i < 8; ++i) {
            const double want = before.at("w").get(i) * (1.0 - 0.05 * 0.5);
            CHECK(params.at("w").get(i) == doctest::Approx(want).epsilon(1e-6));
        }
    }
}

TEST_CASE("neuron scaling equals feeding pre-scaled gradients") {
    Rng rng(3);
    Tensor w0 = Tensor::gaussian({9, 4}, rng);
    Tensor vec0 = Tensor::gaussian({5}, rng);
    io::TensorMap scaled{{"w", w0}, {"vec", vec0}};
    io::TensorMap manual{{"w", w0}, {"vec", vec0}};
    AdamW opt_scaled({.lr = 0.02, .neuron_grad_scale = true});
    AdamW opt_manual({.lr = 0.02, .neuron_grad_scale = false});

    const double gscale = 1.0 / std::sqrt(9.0);
    for (int step = 0; step < 4; ++step) {
        Tensor g = Tensor::gaussian({9, 4}, rng);
        Tensor gv = Tensor::gaussian({5}, rng);
        Tensor g_pre = g;
        for (int64_t i = 0; i < g_pre.numel(); ++i) g_pre.set(i, g_pre.get(i) * gscale);
        opt_scaled.step(scaled, {{"w", g}, {"vec", gv}});
        opt_manual.step(manual, {{"w", g_pre}, {"vec", gv}});
    }
    CHECK(ops::max_abs_diff(scaled.at("w"), manual.at("w")) == 0.0);
    // rank-1 tensors are never neuron-scaled
    CHECK(ops::bit_equal(scaled.at("vec"), manual.at("vec")));
}

TEST_CASE("optimizer input validation") {
    io::TensorMap params{{"w", Tensor::zeros({2})}};
    AdamW opt({});
    CHECK_THROWS_AS(opt.step(params, {{"missing", Tensor::zeros({2})}}), std::logic_error);
    CHECK_THROWS_AS(opt.step(params, {{"w", Tensor::zeros({3})}}), ShapeError);
    Tensor bad = Tensor::from({2}, {1.0, std::nan("")});
    CHECK_THROWS_AS(opt.step(params, {{"w", bad}}), NumericError);
    CHECK_THROWS_AS(AdamW({.lr = -1.0}), ShapeError);
    CHECK_THROWS_AS(AdamW({.beta1 = 1.0}), ShapeError);
    CHECK_THROWS_AS(AdamW({.eps = 0.0}), ShapeError);
}

TEST_CASE("ema converges geometrically to a constant target") {
    Tensor target = Tensor::from({2}, {2.0, -1.0});
    io::TensorMap params{{"w", target}};
    io::TensorMap start{{"w", Tensor::zeros({2})}};
    const double decay = 0.9;
    EmaTracker ema(start, decay);
    for (int k = 1; k <= 20; ++k) {
        ema.update(params);
        // error shrinks by exactly `decay` per update (f32 storage noise aside)
        const double want = 2.0 * std::pow(decay, k);
        CHECK(std::fabs(ema.weights().at("w").get(0) - 2.0) == doctest::Approx(want).epsilon(1e-3));
    }
}

TEST_CASE("ema with decay zero copies the latest value") {
    Rng rng(5);
    io::TensorMap params{{"w", Tensor::gaussian({4}, rng)}};
    EmaTracker ema(params, 0.0);
    params.at("w") = Tensor::gaussian({4}, rng);
    ema.update(params);
    CHECK(ops::bit_equal(ema.weights().at("w"), params.at("w")));
}

TEST_CASE("ema smooths a random walk") {
    Rng rng(13);
    io::TensorMap params{{"w", Tensor::zeros({1})}};
    EmaTracker ema(params, 0.999);
    double w = 0.0;
    std::vector<double> raw, smooth;
    for (int step = 0; step < 1000; ++step) {
        w += rng.gauss();
        params.at("w").set(0, w);
        ema.update(params);
        raw.push_back(w);
        smooth.push_back(ema.weights().at("w").get(0));
    }
    auto variance = [](const std::vector<double>& xs) {
        double mean = 0.0;
        for (double x : xs) mean += x;
        mean /= static_cast<double>(xs.size());
        double var = 0.0;
        for (double x : xs) var += (x - mean) * (x - mean);
        return var / static_cast<double>(xs.size());
    };
    CHECK(variance(smooth) < variance(raw));
}

TEST_CASE("ema validation") {
    io::TensorMap params{{"w", Tensor::zeros({2})}};
    CHECK_THROWS_AS(EmaTracker(params, 1.0), ShapeError);
    CHECK_THROWS_AS(EmaTracker(params, -0.1), ShapeError);
    EmaTracker ema(params, 0.5);
    io::TensorMap renamed{{"other", Tensor::zeros({2})}};
    CHECK_THROWS_AS(ema.update(renamed), std::logic_error);
    CHECK_THROWS_AS(ema_update(Tensor::zeros({2}), Tensor::zeros({3}), 0.5), ShapeError);
}
