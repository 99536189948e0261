// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "ptml/blockcodec.hpp"
#include "ptml/errors.hpp"
#include "ptml/half.hpp"
#include "ptml/io.hpp"
#include "ptml/rng.hpp"
#include "ptml/tape.hpp"

using namespace ptml;

namespace {

std::array<float, kBlockElems> random_block(Rng& rng, double scale) {
    std::array<float, kBlockElems> w{};
    for (auto& v : w) v = static_cast<float>(rng.gauss() * scale);
    return w;
}

Tensor random_matrix(int64_t rows, int64_t cols, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Tensor t({rows, cols}, DType::f32);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.gauss() * scale);
    return t;
}

}  // namespace

TEST_CASE("payload layout: grid-aligned values round trip through known bytes") {
    // values {0..7} * 0.5 laid out so index i stores level i % 8
    std::array<float, kBlockElems> w{};
    for (int i = 0; i < kBlockElems; ++i) w[static_cast<size_t>(i)] = 0.5f * (i % 8);
    CompressedBlock b = encode_block(w);

    CHECK(b.block_min() == 0.0);
    CHECK(b.scale() == 0.5);
    // scale is binary16 0.5 = 0x3800 in the low two bytes, little-endian
    CHECK(b.payload[0] == 0x00);
    CHECK(b.payload[1] == 0x38);
    // first indices 0,1,2,... packed 3 bits each from bit 16: byte 2 holds
    // 0 | 1<<3 | (2&3)<<6 = 0b10001000, byte 3 continues with 2>>2 = 0, 3<<1, 4<<4...
    CHECK(b.payload[2] == 0x88);
    CHECK((b.payload[15] & 0xF0) == 0);  // reserved bits stay clear
    for (int i = 0; i < kBlockElems; ++i) CHECK(b.index(i) == i % 8);

    const auto back = decode_block(b);
    for (int i = 0; i < kBlockElems; ++i) {
        CHECK(back[static_cast<size_t>(i)] == w[static_cast<size_t>(i)]);
    }
}

TEST_CASE("constant block stores min and zero scale, reconstructs exactly") {
    std::array<float, kBlockElems> w{};
    w.fill(5.0f);
    CompressedBlock b = encode_block(w);
    CHECK(b.block_min() == 5.0);
    CHECK(b.scale() == 0.0);
    for (int i = 0; i < kBlockElems; ++i) CHECK(b.index(i) == 0);
    const auto back = decode_block(b);
    for (float v : back) CHECK(v == 5.0f);
}

TEST_CASE("hand-built payloads decode by the documented arithmetic") {
    SUBCASE("zero payload and zero min give zeros") {
        CompressedBlock b;
        const auto back = decode_block(b);
        for (float v : back) CHECK(v == 0.0f);
    }
    SUBCASE("scale one, all indices seven, min -3.5 gives all 3.5") {
        CompressedBlock b;
        b.payload[0] = 0x00;
        b.payload[1] = 0x3C;  // binary16 1.0
        for (size_t i = 2; i < 15; ++i) b.payload[i] = 0xFF;
        b.payload[15] = 0x0F;  // top nibble reserved
        b.min_bits = 0xC300;   // binary16 -3.5
        const auto back = decode_block(b);
        for (float v : back) CHECK(v == 3.5f);
    }
    SUBCASE("reserved bits reject") {
        CompressedBlock b;
        b.payload[15] = 0x10;  // bit 124
        CHECK_THROWS_AS(decode_block(b), FormatError);
    }
}

TEST_CASE("random blocks match the nearest-index oracle and the error bound") {
    Rng rng(41);
    for (int trial = 0; trial < 200; ++trial) {
        const double mag = std::pow(10.0, (trial % 9) - 4);  // 1e-4 .. 1e4
        const auto w = random_block(rng, mag);
        CompressedBlock b = encode_block(w);
        const double s = b.scale();
        const double base = b.block_min();
        const auto back = decode_block(b);
        const float lowest = *std::min_element(w.begin(), w.end());
        const double range = *std::max_element(w.begin(), w.end()) - base;
        const double bound = block_error_bound(s, range);

        CHECK(base <= static_cast<double>(lowest));  // rounded toward -inf
        for (int i = 0; i < kBlockElems; ++i) {
            const double shifted = static_cast<double>(w[static_cast<size_t>(i)]) - base;
            CHECK(shifted >= 0.0);
            // brute-force nearest index, ties to the even level
            if (s > 0.0) {
                int best = 0;
                double best_d = 1e300;
                for (int idx = 0; idx <= kIndexMax; ++idx) {
                    const double d = std::abs(shifted - s * idx);
                    if (d < best_d - 1e-18 || (d == best_d && idx % 2 == 0)) {
                        best_d = d;
                        best = idx;
                    }
                }
                CHECK(b.index(i) == best);
            }
            const double err =
                std::abs(back[static_cast<size_t>(i)] - static_cast<double>(w[static_cast<size_t>(i)]));
            CHECK(err <= bound);
        }
    }
}

TEST_CASE("encode, decode, encode again is payload-identical") {
    Rng rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const auto w = random_block(rng, trial % 2 ? 0.02 : 3.0);
        CompressedBlock b1 = encode_block(w);
        const auto mid = decode_block(b1);
        std::array<float, kBlockElems> w2{};
        for (size_t i = 0; i < mid.size(); ++i) w2[i] = mid[i];
        CompressedBlock b2 = encode_block(w2);
        CHECK(b1.payload == b2.payload);
        CHECK(b1.min_bits == b2.min_bits);
    }
}

TEST_CASE("min shift is lossless when the minimum is exactly representable") {
    Rng rng(11);
    std::array<float, kBlockElems> w{};
    for (auto& v : w) v = static_cast<float>(rng.gauss());
    // force an exactly representable minimum below everything else
    w[13] = -2.25f;
    for (auto& v : w) v = std::max(v, -2.25f);
    CompressedBlock shifted = encode_block(w);
    CHECK(shifted.block_min() == -2.25);

    std::array<float, kBlockElems> unshifted{};
    for (size_t i = 0; i < w.size(); ++i) unshifted[i] = w[i] + 2.25f;
    CompressedBlock at_zero = encode_block(unshifted);
    CHECK(at_zero.block_min() == 0.0);
    // identical scale and indices: the shift moved nothing but the stored min
    CHECK(shifted.payload == at_zero.payload);
}

TEST_CASE("encode rejects bad inputs") {
    std::array<float, kBlockElems> w{};
    w[0] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(encode_block(w), NumericError);
    w[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(encode_block(w), NumericError);
    w[0] = 70000.0f;  // beyond the binary16 range
    CHECK_THROWS_AS(encode_block(w), NumericError);
}

TEST_CASE("matrix grid shapes and padding") {
    SUBCASE("6x6 is one block") {
        auto m = CompressedBlockMatrix::compress(random_matrix(6, 6, 3));
        CHECK(m.block_count() == 1);
        CHECK(m.stats().payload_bpw == doctest::Approx(128.0 / 36.0).epsilon(1e-12));
    }
    SUBCASE("7x7 pads to four blocks and crops back") {
        Tensor w = random_matrix(7, 7, 4);
        auto m = CompressedBlockMatrix::compress(w);
        CHECK(m.grid_rows() == 2);
        CHECK(m.grid_cols() == 2);
        CHECK(m.block_count() == 4);
        Tensor back = m.decompress();
        CHECK(back.dim(0) == 7);
        CHECK(back.dim(1) == 7);
    }
    SUBCASE("padding stays out of the error stats") {
        Tensor w = random_matrix(7, 7, 5, 3.0);
        auto m = CompressedBlockMatrix::compress(w);
        Tensor back = m.decompress();
        double max_err = 0.0, sum_err = 0.0;
        for (int64_t r = 0; r < 7; ++r) {
            for (int64_t c = 0; c < 7; ++c) {
                const double e = std::abs(w.at2(r, c) - back.at2(r, c));
                max_err = std::max(max_err, e);
                sum_err += e;
            }
        }
        CHECK(m.stats().max_abs_error == max_err);
        CHECK(m.stats().mean_abs_error == sum_err / 49.0);
    }
    SUBCASE("rank and range validation") {
        CHECK_THROWS_AS(CompressedBlockMatrix::compress(Tensor::zeros({4})), ShapeError);
        Tensor big = Tensor::full({6, 6}, 65505.0);
        CHECK_THROWS_AS(CompressedBlockMatrix::compress(big), NumericError);
    }
}

TEST_CASE("bits-per-weight accounting on a 216x216 matrix") {
    auto m = CompressedBlockMatrix::compress(random_matrix(216, 216, 9));
    CHECK(m.block_count() == 36 * 36);
    CHECK(m.stats().payload_bpw == doctest::Approx(3.5556).epsilon(2e-4));
    CHECK(m.stats().total_bpw == 4.0);
    // 36-byte header + 1296 * (16 payload + 2 min) + 4-byte checksum
    CHECK(m.serialize().size() == 23368);
}

TEST_CASE("serialized matrices survive the round trip and reject corruption") {
    Tensor w = random_matrix(13, 20, 21);
    auto m = CompressedBlockMatrix::compress(w);
    std::vector<uint8_t> bytes = m.serialize();

    SUBCASE("round trip preserves every block and the decoded matrix") {
        auto back = CompressedBlockMatrix::deserialize(bytes);
        CHECK(back.rows() == 13);
        CHECK(back.cols() == 20);
        CHECK(back.block_count() == m.block_count());
        for (int64_t br = 0; br < m.grid_rows(); ++br) {
            for (int64_t bc = 0; bc < m.grid_cols(); ++bc) {
                CHECK(back.block(br, bc).payload == m.block(br, bc).payload);
                CHECK(back.block(br, bc).min_bits == m.block(br, bc).min_bits);
            }
        }
        CHECK(ops::bit_equal(back.decompress(), m.decompress()));
        CHECK(back.serialize() == bytes);
    }
    SUBCASE("flipped payload byte fails the checksum") {
        bytes[40] ^= 0x01;
        CHECK_THROWS_AS(CompressedBlockMatrix::deserialize(bytes), FormatError);
    }
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        CHECK_THROWS_AS(CompressedBlockMatrix::deserialize(bytes), FormatError);
    }
    SUBCASE("truncation") {
        bytes.resize(20);
        CHECK_THROWS_AS(CompressedBlockMatrix::deserialize(bytes), FormatError);
    }
    SUBCASE("reserved bit set inside a block names the block") {
        // block (1, 2): payloads start at byte 36, 16 bytes each, grid is 3x4
        const size_t pos = 36 + (1 * 4 + 2) * 16 + 15;
        bytes[pos] |= 0x80;
        // recompute the trailing checksum so only the reserved bits are wrong
        const uint32_t crc = io::crc32(std::span(bytes).first(bytes.size() - 4));
        bytes[bytes.size() - 4] = static_cast<uint8_t>(crc);
        bytes[bytes.size() - 3] = static_cast<uint8_t>(crc >> 8);
        bytes[bytes.size() - 2] = static_cast<uint8_t>(crc >> 16);
        bytes[bytes.size() - 1] = static_cast<uint8_t>(crc >> 24);
        try {
            CompressedBlockMatrix::deserialize(bytes);
            CHECK(false);
        } catch (const FormatError& e) {
            CHECK(std::string(e.what()).find("(1, 2)") != std::string::npos);
        }
    }
}

TEST_CASE("fused matmul equals the materialized product bit for bit") {
    Tensor w = random_matrix(48, 48, 33);
    auto m = CompressedBlockMatrix::compress(w);
    Tensor dec = m.decompress();

    SUBCASE("forward orientation, f32") {
        Tensor x = random_matrix(5, 48, 34);
        CHECK(ops::bit_equal(matmul_compressed(x, m), ops::matmul(x, dec)));
    }
    SUBCASE("transposed orientation, f32") {
        Tensor x = random_matrix(5, 48, 35);
        CHECK(ops::bit_equal(matmul_compressed_nt(x, m), ops::matmul(x, ops::transpose(dec))));
    }
    SUBCASE("f64 inputs promote the accumulation") {
        Tensor x = random_matrix(3, 48, 36).to(DType::f64);
        CHECK(ops::bit_equal(matmul_compressed(x, m), ops::matmul(x, dec.to(DType::f64))));
    }
    SUBCASE("identity input reads the decompressed rows back") {
        Tensor eye = Tensor::identity(48);
        CHECK(ops::bit_equal(matmul_compressed(eye, m), dec));
    }
    SUBCASE("zero input gives zero output") {
        Tensor x = Tensor::zeros({4, 48});
        Tensor y = matmul_compressed(x, m);
        for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.get(i) == 0.0);
    }
    SUBCASE("edge-padded shapes still agree") {
        Tensor w2 = random_matrix(13, 9, 37);
        auto m2 = CompressedBlockMatrix::compress(w2);
        Tensor x = random_matrix(4, 13, 38);
        CHECK(ops::bit_equal(matmul_compressed(x, m2), ops::matmul(x, m2.decompress())));
        Tensor u = random_matrix(4, 9, 39);
        CHECK(ops::bit_equal(matmul_compressed_nt(u, m2),
                             ops::matmul(u, ops::transpose(m2.decompress()))));
    }
    SUBCASE("shape mismatches throw") {
        Tensor x = random_matrix(4, 47, 40);
        CHECK_THROWS_AS(matmul_compressed(x, m), ShapeError);
        CHECK_THROWS_AS(matmul_compressed_nt(x, m), ShapeError);
    }
}

TEST_CASE("tape node routes the gradient through the transposed product") {
    Tensor w = random_matrix(13, 9, 50);
    auto m = CompressedBlockMatrix::compress(w);
    Tensor x0 = random_matrix(4, 13, 51).to(DType::f64);
    Tensor u = random_matrix(4, 9, 52).to(DType::f64);

    Tape t;
    Value x = t.leaf(x0, true);
    Value y = matmul_compressed(t, x, m);
    Value loss = t.sum(t.mul(y, t.constant(u)));
    t.backward(loss);
    Tensor gx = t.grad(x);
    CHECK(ops::bit_equal(gx, matmul_compressed_nt(u, m)));

    // the map is linear in x, so central differences are exact to rounding
    const double h = 1e-3;
    for (int64_t i : {int64_t{0}, int64_t{17}, int64_t{4 * 13 - 1}}) {
        Tensor xp = x0, xm = x0;
        xp.set(i, x0.get(i) + h);
        xm.set(i, x0.get(i) - h);
        double lp = 0.0, lm = 0.0;
        Tensor yp = matmul_compressed(xp, m);
        Tensor ym = matmul_compressed(xm, m);
        for (int64_t k = 0; k < yp.numel(); ++k) {
            lp += yp.get(k) * u.get(k);
            lm += ym.get(k) * u.get(k);
        }
        const double fd = (lp - lm) / (2 * h);
        CHECK(gx.get(i) == doctest::Approx(fd).epsilon(1e-9));
    }
}
