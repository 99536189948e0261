// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ptml/datasets.hpp"
#include "ptml/errors.hpp"

using namespace ptml;

TEST_CASE("copy task layout: payload, separator, payload again") {
    Rng rng(42);
    TokenDataset d = make_copy_task(11, 5, 20, rng);
    CHECK(d.vocab == 11);
    CHECK(d.samples.size() == 20);
    for (const auto& s : d.samples) {
        REQUIRE(s.size() == 11);  // 2*5 + 1
        CHECK(s[5] == 10);        // separator is the top id
        for (int i = 0; i < 5; ++i) {
            CHECK(s[static_cast<size_t>(i)] < 10);
            CHECK(s[static_cast<size_t>(i)] >= 0);
            CHECK(s[static_cast<size_t>(i)] == s[static_cast<size_t>(i + 6)]);
        }
    }
}

TEST_CASE("modular addition triples satisfy their own equation") {
    Rng rng(1);
    TokenDataset d = make_modular_add(17, 4, 25, rng);
    CHECK(d.vocab == 17);
    for (const auto& s : d.samples) {
        REQUIRE(s.size() == 12);
        for (size_t t = 0; t < s.size(); t += 3) {
            CHECK(s[t] < 17);
            CHECK(s[t + 1] < 17);
            CHECK(s[t + 2] == (s[t] + s[t + 1]) % 17);
        }
    }
}

TEST_CASE("random walk moves one step at a time inside the vocab") {
    Rng rng(9);
    TokenDataset d = make_random_walk(6, 40, 10, rng);
    for (const auto& s : d.samples) {
        REQUIRE(s.size() == 40);
        for (size_t i = 0; i < s.size(); ++i) {
            CHECK(s[i] >= 0);
            CHECK(s[i] < 6);
            if (i > 0) CHECK(std::abs(s[i] - s[i - 1]) <= 1);
        }
    }
}

TEST_CASE("generators are pure functions of the rng seed") {
    auto gen = [](uint64_t seed) {
        Rng rng(seed);
        return make_dataset("copy", 13, 9, 8, rng);
    };
    TokenDataset a = gen(5), b = gen(5), c = gen(6);
    CHECK(a.samples == b.samples);
    CHECK(a.samples != c.samples);
}

TEST_CASE("dataset dispatch and argument validation") {
    Rng rng(3);
    CHECK(make_dataset("modular_add", 7, 9, 4, rng).vocab == 7);
    CHECK(make_dataset("random_walk", 7, 9, 4, rng).samples[0].size() == 9);
    CHECK_THROWS_AS(make_dataset("unknown", 7, 9, 4, rng), UsageError);
    CHECK_THROWS_AS(make_copy_task(2, 3, 1, rng), ShapeError);
    CHECK_THROWS_AS(make_copy_task(5, 0, 1, rng), ShapeError);
    CHECK_THROWS_AS(make_modular_add(1, 3, 1, rng), ShapeError);
    CHECK_THROWS_AS(make_random_walk(5, 1, 1, rng), ShapeError);
}

TEST_CASE("regression toy columns decay geometrically") {
    RegressionToy toy = RegressionToy::make(4096, 6, 2, 77);
    REQUIRE(toy.x.dim(0) == 4096);
    REQUIRE(toy.x.dim(1) == 6);
    for (int64_t j = 0; j < 6; ++j) {
        double acc = 0.0;
        for (int64_t r = 0; r < 4096; ++r) acc += toy.x.at2(r, j) * toy.x.at2(r, j);
        const double col_std = std::sqrt(acc / 4096.0);
        const double want = std::pow(2.0, -0.5 * static_cast<double>(j));
        CHECK(col_std == doctest::Approx(want).epsilon(0.08));
    }
}

TEST_CASE("regression toy loss is near the noise floor at the true weights") {
    RegressionToy toy = RegressionToy::make(512, 4, 3, 5, 0.01);
    const double at_truth = toy.loss_for(toy.w_true);
    CHECK(at_truth < 3.0 * 0.01 * 0.01 + 1e-5);
    CHECK(toy.loss_for(Tensor::zeros({3, 4})) > 100.0 * at_truth);

    RegressionToy again = RegressionToy::make(512, 4, 3, 5, 0.01);
    CHECK(ops::bit_equal(again.x, toy.x));
    CHECK(ops::bit_equal(again.y, toy.y));
    CHECK_THROWS_AS(RegressionToy::make(0, 4, 3, 5), ShapeError);
}
