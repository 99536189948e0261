// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "ptml/adapters.hpp"
#include "ptml/errors.hpp"
#include "ptml/train.hpp"
#include "testutil.hpp"

using namespace ptml;

namespace {

// random matrix with orthonormal columns, via Gram-Schmidt on gaussians
Tensor orthonormal_cols(int64_t rows, int64_t cols, Rng& rng) {
    REQUIRE(rows >= cols);
    Tensor q = Tensor::gaussian({rows, cols}, rng, 0.0, 1.0, DType::f64);
    for (int64_t j = 0; j < cols; ++j) {
        for (int64_t prev = 0; prev < j; ++prev) {
            double dot = 0.0;
            for (int64_t r = 0; r < rows; ++r) dot += q.at2(r, j) * q.at2(r, prev);
            for (int64_t r = 0; r < rows; ++r) q.set2(r, j, q.at2(r, j) - dot * q.at2(r, prev));
        }
        double norm = 0.0;
        for (int64_t r = 0; r < rows; ++r) norm += q.at2(r, j) * q.at2(r, j);
        norm = std::sqrt(norm);
        REQUIRE(norm > 1e-8);
        for (int64_t r = 0; r < rows; ++r) q.set2(r, j, q.at2(r, j) / norm);
    }
    return q;
}

// w = u * diag(sigma) * v^T with known spectrum
Tensor synth_matrix(int64_t m, int64_t n, const std::vector<double>& sigma, Rng& rng,
                    DType dtype = DType::f64) {
    const int64_t k = static_cast<int64_t>(sigma.size());
    Tensor u = orthonormal_cols(m, k, rng);
    Tensor v = orthonormal_cols(n, k, rng);
    Tensor us({m, k}, DType::f64);
    for (int64_t i = 0; i < m; ++i) {
        for (int64_t j = 0; j < k; ++j) us.set2(i, j, u.at2(i, j) * sigma[static_cast<size_t>(j)]);
    }
    return ops::matmul(us, ops::transpose(v)).to(dtype);
}

double max_col_gram_err(const Tensor& q) {
    // largest deviation of q^T q from the identity
    Tensor g = ops::matmul(ops::transpose(q), q);
    double worst = 0.0;
    for (int64_t i = 0; i < g.dim(0); ++i) {
        for (int64_t j = 0; j < g.dim(1); ++j) {
            worst = std::max(worst, std::fabs(g.at2(i, j) - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

Tensor reconstruct(const SVDResult& r) {
    Tensor us({r.u.dim(0), r.s.numel()}, DType::f64);
    for (int64_t i = 0; i < us.dim(0); ++i) {
        for (int64_t j = 0; j < us.dim(1); ++j) us.set2(i, j, r.u.at2(i, j) * r.s.get(j));
    }
    return ops::matmul(us, ops::transpose(r.v));
}

std::string temp_dir(const char* tag) {
    auto dir = std::filesystem::temp_directory_path() / fmt::format("ptml_adapters_{}", tag);
    std::filesystem::remove_all(dir);
    return dir.string();
}

PTModelConfig tiny_cfg() {
    PTModelConfig c;
    c.tracks = 2;
    c.track_block_depth = 1;
    c.total_layers = 2;
    c.model_dim = 12;
    c.heads = 2;
    c.head_dim = 6;
    c.vocab = 8;
    c.ffn_hidden = 12;
    c.attention_unit = "LG";
    c.window = 4;
    c.validate();
    return c;
}

}  // namespace

TEST_CASE("svd of the identity") {
    SVDResult r = svd(Tensor::identity(6, DType::f64));
    REQUIRE(r.s.numel() == 6);
    for (int64_t i = 0; i < 6; ++i) CHECK(r.s.get(i) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(max_col_gram_err(r.u) < 1e-12);
    CHECK(max_col_gram_err(r.v) < 1e-12);
    CHECK(ops::max_abs_diff(reconstruct(r), Tensor::identity(6, DType::f64)) < 1e-12);
}

TEST_CASE("svd recovers a planted spectrum") {
    Rng rng(11);
    std::vector<double> sigma;
    for (int i = 0; i < 12; ++i) sigma.push_back(std::pow(2.0, -i / 4.0));
    Tensor w = synth_matrix(20, 12, sigma, rng);

    SVDResult r = svd(w);
    REQUIRE(r.s.numel() == 12);
    for (size_t i = 0; i < sigma.size(); ++i) {
        CHECK(r.s.get(static_cast<int64_t>(i)) == doctest::Approx(sigma[i]).epsilon(1e-10));
    }
    for (int64_t i = 1; i < r.s.numel(); ++i) CHECK(r.s.get(i) <= r.s.get(i - 1));
    CHECK(max_col_gram_err(r.u) < 1e-10);
    CHECK(max_col_gram_err(r.v) < 1e-10);
    CHECK(ops::max_abs_diff(reconstruct(r), w) < 1e-10);
}

TEST_CASE("svd handles wide and rank-deficient input") {
    Rng rng(7);
    SUBCASE("wide goes through the transpose path") {
        Tensor w = Tensor::gaussian({5, 9}, rng, 0.0, 1.0, DType::f64);
        SVDResult r = svd(w);
        CHECK(r.u.dim(0) == 5);
        CHECK(r.v.dim(0) == 9);
        REQUIRE(r.s.numel() == 5);
        CHECK(max_col_gram_err(r.u) < 1e-10);
        CHECK(max_col_gram_err(r.v) < 1e-10);
        CHECK(ops::max_abs_diff(reconstruct(r), w) < 1e-10);
    }
    SUBCASE("rank one leaves trailing singular values at zero") {
        Tensor a = Tensor::gaussian({6, 1}, rng, 0.0, 1.0, DType::f64);
        Tensor b = Tensor::gaussian({1, 4}, rng, 0.0, 1.0, DType::f64);
        Tensor w = ops::matmul(a, b);
        SVDResult r = svd(w);
        CHECK(r.s.get(0) > 0.1);
        for (int64_t j = 1; j < r.s.numel(); ++j) CHECK(r.s.get(j) < 1e-12);
        // zero-sigma u columns are zeroed, never garbage
        for (int64_t i = 0; i < 6; ++i) {
            for (int64_t j = 1; j < 4; ++j) CHECK(r.u.at2(i, j) == 0.0);
        }
        CHECK(ops::max_abs_diff(reconstruct(r), w) < 1e-12);
    }
    SUBCASE("shape and value guards") {
        CHECK_THROWS_AS(svd(Tensor::ones({4})), ShapeError);
        Tensor bad({2, 2}, DType::f64);
        bad.set(3, std::nan(""));
        CHECK_THROWS_AS(svd(bad), NumericError);
    }
}

TEST_CASE("svd pull-out splits a weight into adapter and residual") {
    Rng rng(21);
    SUBCASE("exact low rank leaves no residual") {
        Tensor a = Tensor::gaussian({18, 3}, rng);
        Tensor b = Tensor::gaussian({3, 12}, rng);
        Tensor w = ops::matmul(a, b);
        SVDSplit split = svd_pullout(w, 3);
        CHECK(split.adapter.rank == 3);
        CHECK(split.adapter.alpha == 3.0);
        CHECK(split.adapter.scaling() == 1.0);
        CHECK(ops::frobenius_norm(split.residual) < 1e-5);
        Tensor back = ops::matmul(split.adapter.a, split.adapter.b);
        CHECK(ops::max_abs_diff(back, w) < 1e-5);
    }
    SUBCASE("rank zero is a pass-through") {
        Tensor w = Tensor::gaussian({7, 5}, rng);
        SVDSplit split = svd_pullout(w, 0);
        CHECK(split.adapter.rank == 0);
        CHECK(split.adapter.scaling() == 0.0);
        CHECK(split.adapter.a.dim(1) == 1);
        CHECK(ops::bit_equal(split.residual, w));
    }
    SUBCASE("residual energy is the tail of the spectrum") {
        std::vector<double> sigma;
        for (int i = 0; i < 32; ++i) sigma.push_back(std::pow(2.0, -i));
        Tensor w = synth_matrix(32, 32, sigma, rng);
        SVDSplit split = svd_pullout(w, 4);
        double tail = 0.0;
        for (size_t i = 4; i < sigma.size(); ++i) tail += sigma[i] * sigma[i];
        CHECK(ops::frobenius_norm(split.residual) ==
              doctest::Approx(std::sqrt(tail)).epsilon(1e-4));
        // the pulled-out part is exactly the removed mass
        Tensor sum = ops::add(ops::matmul(split.adapter.a, split.adapter.b), split.residual);
        CHECK(ops::max_abs_diff(sum, w) < 1e-5);
        // residual lives outside the adapter column space
        Tensor proj = ops::matmul(ops::transpose(split.adapter.a), split.residual);
        CHECK(ops::max_abs(proj) < 1e-4);
        // and its largest direction is the first kept-out singular value
        SVDResult rres = svd(split.residual.to(DType::f64));
        CHECK(rres.s.get(0) <= sigma[4] + 1e-5);
    }
    SUBCASE("rank bounds are enforced") {
        Tensor w = Tensor::gaussian({6, 4}, rng);
        CHECK_THROWS_AS(svd_pullout(w, 5), ShapeError);
        CHECK_THROWS_AS(svd_pullout(w, -1), ShapeError);
        CHECK_THROWS_AS(svd_pullout(Tensor::ones({4}), 1), ShapeError);
    }
}

TEST_CASE("adapted forward composes residual and low-rank paths") {
    Rng rng(31);
    SUBCASE("zero adapter matches the plain compressed product") {
        Tensor w = Tensor::gaussian({12, 18}, rng);
        auto cm = CompressedBlockMatrix::compress(ops::transpose(w));
        LoRAAdapter zero = LoRAAdapter::fresh(12, 18, 0, 0.0, rng);
        Tensor x = Tensor::gaussian({5, 18}, rng);
        CHECK(ops::bit_equal(adapted_forward(x, cm, zero), matmul_compressed(x, cm)));
    }
    SUBCASE("exact-rank pull-out reproduces the dense product") {
        Tensor a = Tensor::gaussian({12, 4}, rng);
        Tensor b = Tensor::gaussian({4, 18}, rng);
        Tensor w = ops::matmul(a, b);
        SVDSplit split = svd_pullout(w, 4);
        auto cm = CompressedBlockMatrix::compress(ops::transpose(split.residual));
        Tensor x = Tensor::gaussian({5, 18}, rng);
        Tensor want = ops::matmul(x, ops::transpose(w));
        CHECK(ops::max_abs_diff(adapted_forward(x, cm, split.adapter), want) < 1e-4);
    }
    SUBCASE("pull-out beats direct compression on a decaying spectrum") {
        std::vector<double> sigma;
        for (int i = 0; i < 18; ++i) sigma.push_back(std::pow(2.0, -i / 4.0));
        for (uint64_t seed = 0; seed < 10; ++seed) {
            Rng r2(100 + seed);
            Tensor w = synth_matrix(24, 18, sigma, r2, DType::f32);
            Tensor x = Tensor::gaussian({16, 18}, r2);
            Tensor want = ops::matmul(x, ops::transpose(w));

            auto direct = CompressedBlockMatrix::compress(ops::transpose(w));
            SVDSplit split = svd_pullout(w, 4);
            auto resid = CompressedBlockMatrix::compress(ops::transpose(split.residual));

            auto rms = [&](const Tensor& got) {
                double acc = 0.0;
                for (int64_t i = 0; i < got.numel(); ++i) {
                    const double d = got.get(i) - want.get(i);
                    acc += d * d;
                }
                return std::sqrt(acc / static_cast<double>(got.numel()));
            };
            const double direct_rms = rms(matmul_compressed(x, direct));
            const double pullout_rms = rms(adapted_forward(x, resid, split.adapter));
            CHECK(pullout_rms < direct_rms);
        }
    }
    SUBCASE("shape guards") {
        Tensor w = Tensor::gaussian({12, 18}, rng);
        auto cm = CompressedBlockMatrix::compress(ops::transpose(w));
        LoRAAdapter zero = LoRAAdapter::fresh(12, 18, 0, 0.0, rng);
        CHECK_THROWS_AS(adapted_forward(Tensor::gaussian({5, 17}, rng), cm, zero), ShapeError);
        LoRAAdapter wrong = LoRAAdapter::fresh(11, 18, 2, 2.0, rng);
        CHECK_THROWS_AS(adapted_forward(Tensor::gaussian({5, 18}, rng), cm, wrong), ShapeError);
    }
}

TEST_CASE("adapted forward on tape matches the tensor form and differentiates") {
    Rng rng(41);
    Tensor w = Tensor::gaussian({9, 12}, rng);
    SVDSplit split = svd_pullout(w, 2);
    auto cm = CompressedBlockMatrix::compress(ops::transpose(split.residual));
    Tensor x = Tensor::gaussian({4, 12}, rng);

    Tape t;
    Value xv = t.leaf(x, true);
    Value av = t.leaf(split.adapter.a, true);
    Value bv = t.leaf(split.adapter.b, true);
    Value out = adapted_forward(t, xv, cm, av, bv, split.adapter.scaling());
    CHECK(ops::bit_equal(t.value(out), adapted_forward(x, cm, split.adapter)));

    test::GradReport rep = test::grad_check(
        {x.to(DType::f64), split.adapter.a.to(DType::f64), split.adapter.b.to(DType::f64)},
        [&](Tape& tp, std::span<const Value> leaves) {
            Value o = adapted_forward(tp, leaves[0], cm, leaves[1], leaves[2],
                                      split.adapter.scaling());
            return tp.mean(tp.mul(o, o));
        },
        1e-4);
    CHECK(rep.max_err < 1e-6);
}

TEST_CASE("least squares oracle recovers a planted weight") {
    Rng rng(51);
    Tensor w_true = Tensor::gaussian({3, 6}, rng);
    Tensor x = Tensor::gaussian({64, 6}, rng);
    Tensor y = ops::matmul(x, ops::transpose(w_true));
    Tensor w = solve_least_squares(x, y);
    REQUIRE(w.shape() == Shape{3, 6});
    CHECK(ops::max_abs_diff(w, w_true) < 1e-4);

    // with noise the solution can only be at least as good as the truth
    Tensor noisy = ops::add(y, Tensor::gaussian({64, 3}, rng, 0.0, 0.05));
    Tensor w2 = solve_least_squares(x, noisy);
    auto sse = [&](const Tensor& cand) {
        Tensor pred = ops::matmul(x, ops::transpose(cand));
        double acc = 0.0;
        for (int64_t i = 0; i < pred.numel(); ++i) {
            const double d = pred.get(i) - noisy.get(i);
            acc += d * d;
        }
        return acc;
    };
    CHECK(sse(w2) <= sse(w_true) + 1e-9);
    CHECK_THROWS_AS(solve_least_squares(x, Tensor::gaussian({63, 3}, rng)), ShapeError);
}

TEST_CASE("adapter checkpoints round trip and pin the base") {
    Rng rng(61);
    LoRAAdapter ad = LoRAAdapter::fresh(10, 14, 3, 6.0, rng);
    const std::string dir = temp_dir("ckpt");
    save_adapter(dir, ad, 0xabcdef12u);

    LoRAAdapter back = load_adapter(dir, 0xabcdef12u);
    CHECK(back.rank == 3);
    CHECK(back.alpha == 6.0);
    CHECK(back.scaling() == 2.0);
    CHECK(ops::bit_equal(back.a, ad.a));
    CHECK(ops::bit_equal(back.b, ad.b));

    CHECK_THROWS_AS(load_adapter(dir, 0xabcdef13u), FormatError);
    try {
        load_adapter(dir, 0xabcdef13u);
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("base hash mismatch") != std::string::npos);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("matrix-level recovery trains only the adapter") {
    RegressionToy toy = RegressionToy::make(96, 18, 12, 71, 0.01);
    auto base = CompressedBlockMatrix::compress(ops::transpose(toy.w_true));
    Rng rng(72);
    LoRAAdapter ad = LoRAAdapter::fresh(12, 18, 4, 4.0, rng);

    SUBCASE("zero steps change nothing") {
        Tensor a0 = ad.a;
        Tensor b0 = ad.b;
        RecoveryReport rep = recovery_finetune(base, ad, toy, {.steps = 0, .lr = 0.02});
        CHECK(rep.first_loss == rep.final_loss);
        CHECK(ops::bit_equal(ad.a, a0));
        CHECK(ops::bit_equal(ad.b, b0));
    }
    SUBCASE("training closes toward the floor") {
        const double floor = toy.loss_for(toy.w_true);
        RecoveryReport rep = recovery_finetune(base, ad, toy, {.steps = 250, .lr = 0.02});
        CHECK(rep.first_loss > floor);
        CHECK(rep.final_loss < rep.first_loss);
        // a fresh adapter starts as an exact no-op, so first_loss is the
        // compressed model's own loss
        LoRAAdapter noop = LoRAAdapter::fresh(12, 18, 4, 4.0, rng);
        Tensor pred = adapted_forward(toy.x, base, noop);
        double acc = 0.0;
        for (int64_t i = 0; i < pred.numel(); ++i) {
            const double d = pred.get(i) - toy.y.get(i);
            acc += d * d;
        }
        CHECK(rep.first_loss ==
              doctest::Approx(acc / static_cast<double>(pred.numel())).epsilon(1e-6));
    }
}

TEST_CASE("whole-model compression keeps shapes and skips the embeddings") {
    Rng rng(81);
    PTModel model = PTModel::init(tiny_cfg(), rng);
    CompressedModel cm = compress_model(model);

    CHECK(cm.base_hash == model.content_hash());
    CHECK(cm.passthrough.count("embed") == 1);
    CHECK(cm.passthrough.count("unembed") == 1);
    CHECK(cm.matrices.count("embed") == 0);
    for (const auto& [name, t] : model.params) {
        if (t.rank() == 2 && name != "embed" && name != "unembed") {
            REQUIRE_MESSAGE(cm.matrices.count(name) == 1, name);
            CHECK(cm.matrices.at(name).rows() == t.dim(1));
            CHECK(cm.matrices.at(name).cols() == t.dim(0));
        } else {
            CHECK(cm.passthrough.count(name) == 1);
        }
    }

    PTModel back = materialize_compressed(cm);
    CHECK(back.params.size() == model.params.size());
    for (const auto& [name, t] : model.params) {
        REQUIRE(back.params.count(name) == 1);
        const Tensor& got = back.params.at(name);
        REQUIRE(got.shape() == t.shape());
        if (cm.matrices.count(name)) {
            const auto& st = cm.matrices.at(name).stats();
            CHECK(ops::max_abs_diff(got, t) <= st.max_abs_error + 1e-6);
        } else {
            CHECK(ops::bit_equal(got, t));
        }
    }
}

TEST_CASE("model adapters bind onto the frozen base") {
    Rng rng(91);
    PTModel model = PTModel::init(tiny_cfg(), rng);
    CompressedModel cm = compress_model(model);
    PTModel base = materialize_compressed(cm);
    Rng arng(92);
    ModelAdapters ads = ModelAdapters::zero_init(cm, 2, 2.0, arng);

    SUBCASE("one adapter pair per compressed matrix, b zeroed") {
        CHECK(ads.params.size() == 2 * cm.matrices.size());
        for (const auto& [name, mat] : cm.matrices) {
            REQUIRE(ads.params.count(name + ".lora_a") == 1);
            REQUIRE(ads.params.count(name + ".lora_b") == 1);
            const Tensor& a = ads.params.at(name + ".lora_a");
            const Tensor& b = ads.params.at(name + ".lora_b");
            CHECK(a.shape() == Shape{mat.cols(), 2});
            CHECK(b.shape() == Shape{2, mat.rows()});
            CHECK(ops::max_abs(b) == 0.0);
        }
    }
    SUBCASE("zeroed adapters leave the forward untouched") {
        std::vector<int64_t> prompt{1, 2, 3, 4};
        Tape t1(false);
        ParamBinder plain(t1, base, false);
        PTForward f1(plain);
        Tensor want = t1.value(f1.full_logits(prompt));

        Tape t2(false);
        CompressedBinder bound(t2, base, ads);
        PTForward f2(bound);
        Tensor got = t2.value(f2.full_logits(prompt));
        CHECK(ops::max_abs_diff(got, want) == 0.0);
        // every adapted weight got both of its leaves bound
        CHECK(bound.adapter_bound().size() == 2 * cm.matrices.size());
    }
    SUBCASE("recovery moves adapters, never the base") {
        Rng drng(93);
        TokenDataset data = make_copy_task(8, 3, 24, drng);
        const uint64_t before = base.content_hash();
        const uint64_t ads_before = io::content_hash(ads.params);

        TrainToyConfig cfg;
        cfg.steps = 12;
        cfg.batch = 4;
        cfg.lr = 0.01;
        TrainReport rep = recover_train_toy(base, ads, data, cfg);

        CHECK_FALSE(rep.diverged);
        CHECK(base.content_hash() == before);
        CHECK(io::content_hash(ads.params) != ads_before);
        CHECK(rep.final_loss < rep.first_loss);
        CHECK(rep.final_ema_loss == rep.final_loss);
    }
}
