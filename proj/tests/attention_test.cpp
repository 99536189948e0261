// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "ptml/attention.hpp"
#include "ptml/rng.hpp"
#include "testutil.hpp"

using namespace ptml;

TEST_CASE("interleave pattern parsing and lookup") {
    auto pat = InterleavePattern::parse("LLLG");
    CHECK_FALSE(pat.is_global(0));
    CHECK_FALSE(pat.is_global(1));
    CHECK_FALSE(pat.is_global(2));
    CHECK(pat.is_global(3));
    CHECK(pat.is_global(7));
    CHECK_FALSE(pat.is_global(8));
    CHECK(pat.globals_in(16) == 4);
    CHECK(pat.globals_in(6) == 1);
    CHECK(InterleavePattern::parse("G").globals_in(5) == 5);
    CHECK_THROWS_AS(InterleavePattern::parse(""), FormatError);
    CHECK_THROWS_AS(InterleavePattern::parse("LXG"), FormatError);
}

TEST_CASE("mask semantics: causal gap, local window") {
    std::vector<int64_t> pos(10);
    std::iota(pos.begin(), pos.end(), 0);
    const int64_t w = 3;
    auto local = attention_mask(AttnKind::local, w, pos, pos);
    auto global = attention_mask(AttnKind::global, w, pos, pos);
    for (int64_t i = 0; i < 10; ++i) {
        for (int64_t j = 0; j < 10; ++j) {
            const int64_t gap = i - j;
            CHECK(global.at(i, j) == (gap >= 0));
            CHECK(local.at(i, j) == (gap >= 0 && gap < w));
        }
    }
    // window 1: a token sees only itself
    auto diag = local_attention_mask(5, 1);
    for (int64_t i = 0; i < 5; ++i) {
        for (int64_t j = 0; j < 5; ++j) CHECK(diag.at(i, j) == (i == j));
    }
    // decode shape: one query row against a longer key prefix
    std::vector<int64_t> pq{6};
    auto row = attention_mask(AttnKind::local, 4, pq, pos);
    for (int64_t j = 0; j < 10; ++j) CHECK(row.at(0, j) == (j <= 6 && 6 - j < 4));
}

namespace {

Tensor random_heads(int64_t rows, int64_t heads, int64_t hd, uint64_t seed) {
    Rng rng(seed);
    return Tensor::gaussian({rows, heads * hd}, rng, 0.0, 1.0, DType::f64);
}

}  // namespace

TEST_CASE("rotary rotation properties") {
    const int64_t heads = 2, hd = 6;
    Tensor x = random_heads(5, heads, hd, 11);
    std::vector<int64_t> pos{0, 3, 7, 8, 20};

    SUBCASE("position zero is the identity") {
        std::vector<int64_t> zeros(5, 0);
        CHECK(ops::max_abs_diff(rope_apply(x, zeros, heads, hd, 10000.0), x) == 0.0);
    }
    SUBCASE("row norms are preserved") {
        Tensor y = rope_apply(x, pos, heads, hd, 10000.0);
        for (int64_t r = 0; r < 5; ++r) {
            double nx = 0, ny = 0;
            for (int64_t c = 0; c < heads * hd; ++c) {
                nx += x.at2(r, c) * x.at2(r, c);
                ny += y.at2(r, c) * y.at2(r, c);
            }
            CHECK(std::sqrt(ny) == doctest::Approx(std::sqrt(nx)).epsilon(1e-12));
        }
    }
    SUBCASE("inverse undoes the rotation") {
        Tensor y = rope_apply(x, pos, heads, hd, 10000.0);
        Tensor back = rope_apply(y, pos, heads, hd, 10000.0, true);
        CHECK(ops::max_abs_diff(back, x) < 1e-12);
    }
    SUBCASE("rotations compose additively in position") {
        std::vector<int64_t> p1{1, 2, 3, 4, 5}, p2{6, 1, 0, 9, 2}, psum{7, 3, 3, 13, 7};
        Tensor two_step = rope_apply(rope_apply(x, p1, heads, hd, 10000.0), p2, heads, hd, 10000.0);
        Tensor one_step = rope_apply(x, psum, heads, hd, 10000.0);
        CHECK(ops::max_abs_diff(two_step, one_step) < 1e-12);
    }
    SUBCASE("argument validation") {
        std::vector<int64_t> bad_len{0, 1};
        CHECK_THROWS_AS(rope_apply(x, bad_len, heads, hd, 10000.0), ShapeError);
        CHECK_THROWS_AS(rope_apply(x, pos, heads, hd - 1, 10000.0), ShapeError);
        std::vector<int64_t> neg{0, 1, 2, 3, -1};
        CHECK_THROWS_AS(rope_apply(x, neg, heads, hd, 10000.0), ShapeError);
    }
}

TEST_CASE("rotary scores depend only on relative position") {
    const int64_t heads = 1, hd = 8;
    Tensor q = random_heads(1, heads, hd, 3);
    Tensor k = random_heads(1, heads, hd, 4);
    auto score = [&](int64_t pi, int64_t pj) {
        std::vector<int64_t> pq{pi}, pk{pj};
        Tensor qq = rope_apply(q, pq, heads, hd, 10000.0);
        Tensor kk = rope_apply(k, pk, heads, hd, 10000.0);
        double s = 0;
        for (int64_t c = 0; c < hd; ++c) s += qq.at2(0, c) * kk.at2(0, c);
        return s;
    };
    for (int64_t shift : {1, 5, 40}) {
        CHECK(score(9, 2) == doctest::Approx(score(9 + shift, 2 + shift)).epsilon(1e-5));
        CHECK(score(3, 3) == doctest::Approx(score(3 + shift, 3 + shift)).epsilon(1e-5));
    }
}

namespace {

// Independent single-head attention: hand-rolled rotation, mask, and softmax.
Tensor naive_single_head(const Tensor& q, const Tensor& k, const Tensor& v, AttnKind kind,
                         int64_t window, int64_t hd, double base,
                         std::span<const int64_t> pos_q, std::span<const int64_t> pos_k) {
    auto rot = [&](const Tensor& m, std::span<const int64_t> pos) {
        Tensor out = m;
        for (int64_t r = 0; r < m.dim(0); ++r) {
            for (int64_t i = 0; i < hd / 2; ++i) {
                const double theta = std::pow(base, -2.0 * static_cast<double>(i) /
                                                        static_cast<double>(hd));
                const double ang = static_cast<double>(pos[static_cast<size_t>(r)]) * theta;
                const double a = m.at2(r, 2 * i), b = m.at2(r, 2 * i + 1);
                out.set2(r, 2 * i, a * std::cos(ang) - b * std::sin(ang));
                out.set2(r, 2 * i + 1, a * std::sin(ang) + b * std::cos(ang));
            }
        }
        return out;
    };
    Tensor qq = kind == AttnKind::local ? rot(q, pos_q) : q;
    Tensor kk = kind == AttnKind::local ? rot(k, pos_k) : k;
    const int64_t nq = q.dim(0), nk = k.dim(0);
    Tensor out({nq, hd}, DType::f64);
    for (int64_t i = 0; i < nq; ++i) {
        std::vector<double> logit(static_cast<size_t>(nk));
        std::vector<bool> ok(static_cast<size_t>(nk));
        double best = -1e300;
        for (int64_t j = 0; j < nk; ++j) {
            const int64_t gap = pos_q[static_cast<size_t>(i)] - pos_k[static_cast<size_t>(j)];
            ok[static_cast<size_t>(j)] = gap >= 0 && (kind == AttnKind::global || gap < window);
            if (!ok[static_cast<size_t>(j)]) continue;
            double s = 0;
            for (int64_t c = 0; c < hd; ++c) s += qq.at2(i, c) * kk.at2(j, c);
            s /= std::sqrt(static_cast<double>(hd));
            logit[static_cast<size_t>(j)] = s;
            best = std::max(best, s);
        }
        double z = 0;
        for (int64_t j = 0; j < nk; ++j) {
            if (ok[static_cast<size_t>(j)]) z += std::exp(logit[static_cast<size_t>(j)] - best);
        }
        for (int64_t c = 0; c < hd; ++c) {
            double acc = 0;
            for (int64_t j = 0; j < nk; ++j) {
                if (!ok[static_cast<size_t>(j)]) continue;
                acc += std::exp(logit[static_cast<size_t>(j)] - best) / z * v.at2(j, c);
            }
            out.set2(i, c, acc);
        }
    }
    return out;
}

}  // namespace

TEST_CASE("attend matches a hand-rolled reference") {
    for (auto kind : {AttnKind::local, AttnKind::global}) {
        for (int64_t heads : {1, 2}) {
            const int64_t hd = 4, n = 6;
            Tensor q = random_heads(n, heads, hd, 21 + heads);
            Tensor k = random_heads(n, heads, hd, 22 + heads);
            Tensor v = random_heads(n, heads, hd, 23 + heads);
            std::vector<int64_t> pos(n);
            std::iota(pos.begin(), pos.end(), 0);

            AttentionLayerSpec spec;
            spec.kind = kind;
            spec.window = 3;
            spec.num_heads = heads;
            spec.head_dim = hd;
            Tape t(false);
            Tensor got = t.value(attend(t, spec, t.constant(q), t.constant(k), t.constant(v),
                                        pos, pos));
            for (int64_t h = 0; h < heads; ++h) {
                Tensor want = naive_single_head(
                    ops::slice_cols(q, h * hd, (h + 1) * hd), ops::slice_cols(k, h * hd, (h + 1) * hd),
                    ops::slice_cols(v, h * hd, (h + 1) * hd), kind, spec.window, hd, spec.rope_base,
                    pos, pos);
                CHECK(ops::max_abs_diff(ops::slice_cols(got, h * hd, (h + 1) * hd), want) < 1e-6);
            }
        }
    }
}

TEST_CASE("global attention ignores key positions entirely") {
    const int64_t heads = 2, hd = 4, n = 7;
    Tensor k = random_heads(n, heads, hd, 31);
    Tensor v = random_heads(n, heads, hd, 32);
    Tensor q = random_heads(1, heads, hd, 33);
    AttentionLayerSpec spec;
    spec.kind = AttnKind::global;
    spec.num_heads = heads;
    spec.head_dim = hd;
    std::vector<int64_t> pq{n - 1};
    std::vector<int64_t> pk(n);
    std::iota(pk.begin(), pk.end(), 0);

    Tape t(false);
    Tensor base = t.value(attend(t, spec, t.constant(q), t.constant(k), t.constant(v), pq, pk));

    // permute past rows together with their positions
    std::vector<int64_t> perm{4, 2, 0, 5, 1, 3, 6};
    Tensor kp = ops::gather_rows(k, perm);
    Tensor vp = ops::gather_rows(v, perm);
    std::vector<int64_t> pkp;
    for (int64_t j : perm) pkp.push_back(pk[static_cast<size_t>(j)]);
    Tensor permuted =
        t.value(attend(t, spec, t.constant(q), t.constant(kp), t.constant(vp), pq, pkp));
    CHECK(ops::max_abs_diff(base, permuted) < 1e-6);

    // reassigning past positions (still causal) changes nothing either
    std::vector<int64_t> relabeled{5, 5, 5, 5, 5, 5, 6};
    Tensor moved =
        t.value(attend(t, spec, t.constant(q), t.constant(k), t.constant(v), pq, relabeled));
    CHECK(ops::max_abs_diff(base, moved) < 1e-6);
}

TEST_CASE("layer spec validation") {
    AttentionLayerSpec spec;
    spec.num_heads = 2;
    spec.head_dim = 4;
    CHECK_NOTHROW(spec.validate());
    spec.window = 0;
    CHECK_THROWS_AS(spec.validate(), ShapeError);
    spec.window = 8;
    spec.head_dim = 5;
    CHECK_THROWS_AS(spec.validate(), ShapeError);
    spec.head_dim = 5;
    spec.kind = AttnKind::global;  // global kind has no rotary pairing constraint
    CHECK_NOTHROW(spec.validate());
    spec.num_heads = 0;
    CHECK_THROWS_AS(spec.validate(), ShapeError);
}

TEST_CASE("gradients flow through rotation and attention") {
    const int64_t heads = 2, hd = 4, n = 4;
    std::vector<int64_t> pos(n);
    std::iota(pos.begin(), pos.end(), 0);

    SUBCASE("rope") {
        Rng rng(41);
        Tensor x = Tensor::gaussian({n, heads * hd}, rng, 0.0, 1.0, DType::f64);
        auto rep = test::grad_check(
            {x},
            [&](Tape& t, std::span<const Value> leaves) {
                return t.mean(t.mul(rope(t, leaves[0], pos, heads, hd, 10000.0),
                                    rope(t, leaves[0], pos, heads, hd, 10000.0)));
            },
            1e-4);
        INFO(rep.worst);
        CHECK(rep.max_err < 1e-6);
    }
    SUBCASE("attend, both kinds") {
        for (auto kind : {AttnKind::local, AttnKind::global}) {
            AttentionLayerSpec spec;
            spec.kind = kind;
            spec.window = 3;
            spec.num_heads = heads;
            spec.head_dim = hd;
            Rng rng(kind == AttnKind::local ? 51 : 52);
            Tensor q = Tensor::gaussian({n, heads * hd}, rng, 0.0, 0.7, DType::f64);
            Tensor k = Tensor::gaussian({n, heads * hd}, rng, 0.0, 0.7, DType::f64);
            Tensor v = Tensor::gaussian({n, heads * hd}, rng, 0.0, 0.7, DType::f64);
            auto rep = test::grad_check(
                {q, k, v},
                [&](Tape& t, std::span<const Value> leaves) {
                    Value att = attend(t, spec, leaves[0], leaves[1], leaves[2], pos, pos);
                    return t.mean(t.mul(att, att));
                },
                1e-4);
            INFO(rep.worst);
            CHECK(rep.max_err < 1e-4);
        }
    }
}
