// SPDX-License-Identifier: Apache-2.0
#include "ptml/blockcodec.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/core.h>

#include "ptml/errors.hpp"
#include "ptml/half.hpp"
#include "ptml/io.hpp"

namespace ptml {

namespace {

constexpr uint32_t kMatrixMagic = 0x43425450u;  // "PTBC" little-endian
constexpr uint32_t kMatrixVersion = 1;
constexpr uint32_t kPadZero = 0;  // the only padding policy
constexpr int kScaleBits = 16;
constexpr int kIndexBits = 3;
constexpr size_t kHeaderBytes = 36;

void put_bits(std::array<uint8_t, kPayloadBytes>& p, int pos, int width, uint32_t v) {
    for (int b = 0; b < width; ++b) {
        if ((v >> b) & 1u) {
            p[static_cast<size_t>((pos + b) / 8)] |= static_cast<uint8_t>(1u << ((pos + b) % 8));
        }
    }
}

uint32_t get_bits(const std::array<uint8_t, kPayloadBytes>& p, int pos, int width) {
    uint32_t v = 0;
    for (int b = 0; b < width; ++b) {
        const int bit = pos + b;
        v |= static_cast<uint32_t>((p[static_cast<size_t>(bit / 8)] >> (bit % 8)) & 1u) << b;
    }
    return v;
}

uint16_t payload_scale_bits(const std::array<uint8_t, kPayloadBytes>& p) {
    return static_cast<uint16_t>(get_bits(p, 0, kScaleBits));
}

bool reserved_bits_clear(const std::array<uint8_t, kPayloadBytes>& p) {
    return (p[15] & 0xF0u) == 0;
}

}  // namespace

double CompressedBlock::scale() const {
    return half_bits_to_float(payload_scale_bits(payload));
}

double CompressedBlock::block_min() const { return half_bits_to_float(min_bits); }

int CompressedBlock::index(int i) const {
    return static_cast<int>(get_bits(payload, kScaleBits + kIndexBits * i, kIndexBits));
}

CompressedBlock encode_block(const std::array<float, kBlockElems>& w) {
    for (float v : w) {
        if (!std::isfinite(v)) throw NumericError("encode_block: non-finite input");
        if (std::abs(v) > 65504.0f) {
            throw NumericError("encode_block: value outside the binary16 range");
        }
    }
    const float lowest = *std::min_element(w.begin(), w.end());

    CompressedBlock out;
    out.min_bits = float_to_half_bits(lowest, HalfRound::toward_neg_inf);
    const double base = half_bits_to_float(out.min_bits);

    double range = 0.0;
    for (float v : w) range = std::max(range, static_cast<double>(v) - base);
    const uint16_t scale_bits =
        float_to_half_bits(static_cast<float>(range / kIndexMax), HalfRound::nearest_even);
    const double s = half_bits_to_float(scale_bits);

    put_bits(out.payload, 0, kScaleBits, scale_bits);
    for (int i = 0; i < kBlockElems; ++i) {
        uint32_t idx = 0;
        if (s > 0.0) {
            const double shifted = static_cast<double>(w[static_cast<size_t>(i)]) - base;
            idx = static_cast<uint32_t>(
                std::clamp(std::nearbyint(shifted / s), 0.0, static_cast<double>(kIndexMax)));
        }
        put_bits(out.payload, kScaleBits + kIndexBits * i, kIndexBits, idx);
    }
    return out;
}

std::array<float, kBlockElems> decode_block(const CompressedBlock& b) {
    if (!reserved_bits_clear(b.payload)) {
        throw FormatError("decode_block: reserved payload bits set");
    }
    const double s = b.scale();
    const double base = b.block_min();
    std::array<float, kBlockElems> out{};
    for (int i = 0; i < kBlockElems; ++i) {
        out[static_cast<size_t>(i)] = static_cast<float>(s * b.index(i) + base);
    }
    return out;
}

double block_error_bound(double scale_value, double range) {
    // half a step from index rounding; the clamped top element can exceed
    // that by at most 7 * (true_scale - rounded_scale), which the binary16
    // ulp of the range dominates with room to spare
    return scale_value / 2.0 + 2.0 * static_cast<double>(half_ulp(static_cast<float>(range)));
}

CompressedBlockMatrix CompressedBlockMatrix::compress(const Tensor& w) {
    if (w.rank() != 2) throw ShapeError("block codec: rank-2 weight required");
    w.check_finite("block codec");

    CompressedBlockMatrix out;
    out.rows_ = w.dim(0);
    out.cols_ = w.dim(1);
    out.grid_rows_ = (out.rows_ + kBlockDim - 1) / kBlockDim;
    out.grid_cols_ = (out.cols_ + kBlockDim - 1) / kBlockDim;
    out.blocks_.reserve(static_cast<size_t>(out.grid_rows_ * out.grid_cols_));

    double err_sum = 0.0;
    double err_max = 0.0;
    for (int64_t br = 0; br < out.grid_rows_; ++br) {
        for (int64_t bc = 0; bc < out.grid_cols_; ++bc) {
            std::array<float, kBlockElems> vals{};
            for (int u = 0; u < kBlockDim; ++u) {
                for (int v = 0; v < kBlockDim; ++v) {
                    const int64_t r = br * kBlockDim + u;
                    const int64_t c = bc * kBlockDim + v;
                    if (r < out.rows_ && c < out.cols_) {
                        const double raw = w.at2(r, c);
                        if (std::abs(raw) > 65504.0) {
                            throw NumericError(fmt::format(
                                "block codec: value {} at ({}, {}) outside the binary16 range",
                                raw, r, c));
                        }
                        vals[static_cast<size_t>(u * kBlockDim + v)] = static_cast<float>(raw);
                    }
                }
            }
            CompressedBlock blk = encode_block(vals);
            const auto back = decode_block(blk);
            for (int u = 0; u < kBlockDim; ++u) {
                for (int v = 0; v < kBlockDim; ++v) {
                    const int64_t r = br * kBlockDim + u;
                    const int64_t c = bc * kBlockDim + v;
                    if (r >= out.rows_ || c >= out.cols_) continue;  // padding
                    const size_t i = static_cast<size_t>(u * kBlockDim + v);
                    const double e = std::abs(static_cast<double>(vals[i]) - back[i]);
                    err_sum += e;
                    err_max = std::max(err_max, e);
                }
            }
            out.blocks_.push_back(blk);
        }
    }

    const double elems = static_cast<double>(out.rows_ * out.cols_);
    const double nblocks = static_cast<double>(out.block_count());
    out.stats_.payload_bpw = nblocks * kPayloadBytes * 8 / elems;
    out.stats_.total_bpw = nblocks * (kPayloadBytes * 8 + 16) / elems;
    out.stats_.max_abs_error = err_max;
    out.stats_.mean_abs_error = err_sum / elems;
    return out;
}

Tensor CompressedBlockMatrix::decompress() const {
    Tensor out({rows_, cols_}, DType::f32);
    for (int64_t br = 0; br < grid_rows_; ++br) {
        for (int64_t bc = 0; bc < grid_cols_; ++bc) {
            const auto vals = decode_block(block(br, bc));
            for (int u = 0; u < kBlockDim; ++u) {
                for (int v = 0; v < kBlockDim; ++v) {
                    const int64_t r = br * kBlockDim + u;
                    const int64_t c = bc * kBlockDim + v;
                    if (r < rows_ && c < cols_) {
                        out.set2(r, c, vals[static_cast<size_t>(u * kBlockDim + v)]);
                    }
                }
            }
        }
    }
    return out;
}

const CompressedBlock& CompressedBlockMatrix::block(int64_t br, int64_t bc) const {
    if (br < 0 || br >= grid_rows_ || bc < 0 || bc >= grid_cols_) {
        throw ShapeError(fmt::format("block ({}, {}) outside {}x{} grid", br, bc, grid_rows_,
                                     grid_cols_));
    }
    return blocks_[static_cast<size_t>(br * grid_cols_ + bc)];
}

std::vector<uint8_t> CompressedBlockMatrix::serialize() const {
    io::ByteWriter bw;
    bw.u32(kMatrixMagic);
    bw.u32(kMatrixVersion);
    bw.u64(static_cast<uint64_t>(rows_));
    bw.u64(static_cast<uint64_t>(cols_));
    bw.u32(kPadZero);
    bw.u32(static_cast<uint32_t>(grid_rows_));
    bw.u32(static_cast<uint32_t>(grid_cols_));
    for (const CompressedBlock& b : blocks_) bw.raw(b.payload);
    for (const CompressedBlock& b : blocks_) bw.u16(b.min_bits);
    bw.u32(io::crc32(bw.bytes()));
    return bw.take();
}

CompressedBlockMatrix CompressedBlockMatrix::deserialize(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < kHeaderBytes + 4) throw FormatError("compressed matrix: truncated");
    const size_t body = bytes.size() - 4;
    const std::span<const uint8_t> all(bytes);
    io::ByteReader tail(all.subspan(body));
    if (tail.u32() != io::crc32(all.first(body))) {
        throw FormatError("compressed matrix: checksum mismatch");
    }

    io::ByteReader br(all.first(body));
    if (br.u32() != kMatrixMagic) throw FormatError("compressed matrix: bad magic");
    const uint32_t version = br.u32();
    if (version != kMatrixVersion) {
        throw FormatError(fmt::format("compressed matrix: unsupported version {}", version));
    }
    CompressedBlockMatrix out;
    out.rows_ = static_cast<int64_t>(br.u64());
    out.cols_ = static_cast<int64_t>(br.u64());
    const uint32_t pad = br.u32();
    if (pad != kPadZero) {
        throw FormatError(fmt::format("compressed matrix: unknown padding policy {}", pad));
    }
    out.grid_rows_ = br.u32();
    out.grid_cols_ = br.u32();
    if (out.rows_ <= 0 || out.cols_ <= 0 ||
        out.grid_rows_ != (out.rows_ + kBlockDim - 1) / kBlockDim ||
        out.grid_cols_ != (out.cols_ + kBlockDim - 1) / kBlockDim) {
        throw FormatError("compressed matrix: shape and grid disagree");
    }
    const size_t nblocks = static_cast<size_t>(out.block_count());
    if (br.remaining() != nblocks * (kPayloadBytes + 2)) {
        throw FormatError("compressed matrix: body size mismatch");
    }
    out.blocks_.resize(nblocks);
    for (CompressedBlock& b : out.blocks_) {
        const auto raw = br.raw(kPayloadBytes);
        std::memcpy(b.payload.data(), raw.data(), kPayloadBytes);
    }
    for (CompressedBlock& b : out.blocks_) b.min_bits = br.u16();
    for (size_t i = 0; i < nblocks; ++i) {
        if (!reserved_bits_clear(out.blocks_[i].payload)) {
            throw FormatError(fmt::format(
                "compressed matrix: reserved bits set in block ({}, {})",
                static_cast<int64_t>(i) / out.grid_cols_,
                static_cast<int64_t>(i) % out.grid_cols_));
        }
    }
    const double elems = static_cast<double>(out.rows_ * out.cols_);
    out.stats_.payload_bpw = static_cast<double>(nblocks) * kPayloadBytes * 8 / elems;
    out.stats_.total_bpw = static_cast<double>(nblocks) * (kPayloadBytes * 8 + 16) / elems;
    return out;
}

namespace {

// decoded six-row strip r in [r0, r0+6) of the full (padded) column span
std::vector<float> decode_row_strip(const CompressedBlockMatrix& m, int64_t br) {
    const int64_t width = m.grid_cols() * kBlockDim;
    std::vector<float> strip(static_cast<size_t>(kBlockDim * width));
    for (int64_t bc = 0; bc < m.grid_cols(); ++bc) {
        const auto vals = decode_block(m.block(br, bc));
        for (int u = 0; u < kBlockDim; ++u) {
            for (int v = 0; v < kBlockDim; ++v) {
                strip[static_cast<size_t>(u * width + bc * kBlockDim + v)] =
                    vals[static_cast<size_t>(u * kBlockDim + v)];
            }
        }
    }
    return strip;
}

// decoded six-column strip c in [c0, c0+6), transposed to [6][padded rows]
std::vector<float> decode_col_strip(const CompressedBlockMatrix& m, int64_t bc) {
    const int64_t height = m.grid_rows() * kBlockDim;
    std::vector<float> strip(static_cast<size_t>(kBlockDim * height));
    for (int64_t br = 0; br < m.grid_rows(); ++br) {
        const auto vals = decode_block(m.block(br, bc));
        for (int u = 0; u < kBlockDim; ++u) {
            for (int v = 0; v < kBlockDim; ++v) {
                strip[static_cast<size_t>(v * height + br * kBlockDim + u)] =
                    vals[static_cast<size_t>(u * kBlockDim + v)];
            }
        }
    }
    return strip;
}

}  // namespace

Tensor matmul_compressed(const Tensor& x, const CompressedBlockMatrix& m) {
    if (x.rank() != 2 || x.dim(1) != m.rows()) {
        throw ShapeError(fmt::format("matmul_compressed: x inner extent {} vs matrix rows {}",
                                     x.rank() == 2 ? x.dim(1) : -1, m.rows()));
    }
    const int64_t n = x.dim(0), cols = m.cols();
    Tensor out({n, cols}, x.dtype());
    // mirror the dense matmul loop (k ascending per output, zero skip, same
    // accumulator dtype) so the fused result is bit-identical to it
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        const int64_t width = m.grid_cols() * kBlockDim;
        for (int64_t kb = 0; kb < m.grid_rows(); ++kb) {
            const std::vector<float> strip = decode_row_strip(m, kb);
            const int64_t k_end = std::min(m.rows(), (kb + 1) * kBlockDim);
            for (int64_t i = 0; i < n; ++i) {
                for (int64_t k = kb * kBlockDim; k < k_end; ++k) {
                    const T xik = xv[static_cast<size_t>(i * m.rows() + k)];
                    if (xik == T(0)) continue;
                    const float* row = strip.data() + (k - kb * kBlockDim) * width;
                    T* orow = ov.data() + i * cols;
                    for (int64_t j = 0; j < cols; ++j) {
                        orow[j] += xik * static_cast<T>(row[j]);
                    }
                }
            }
        }
    });
    return out;
}

Tensor matmul_compressed_nt(const Tensor& x, const CompressedBlockMatrix& m) {
    if (x.rank() != 2 || x.dim(1) != m.cols()) {
        throw ShapeError(fmt::format("matmul_compressed_nt: x inner extent {} vs matrix cols {}",
                                     x.rank() == 2 ? x.dim(1) : -1, m.cols()));
    }
    const int64_t n = x.dim(0), rows = m.rows();
    Tensor out({n, rows}, x.dtype());
    dtype_dispatch(x.dtype(), [&](auto tag) {
        using T = typename decltype(tag)::type;
        auto xv = x.data<T>();
        auto ov = out.data<T>();
        const int64_t height = m.grid_rows() * kBlockDim;
        for (int64_t cb = 0; cb < m.grid_cols(); ++cb) {
            const std::vector<float> strip = decode_col_strip(m, cb);
            const int64_t c_end = std::min(m.cols(), (cb + 1) * kBlockDim);
            for (int64_t i = 0; i < n; ++i) {
                for (int64_t c = cb * kBlockDim; c < c_end; ++c) {
                    const T xic = xv[static_cast<size_t>(i * m.cols() + c)];
                    if (xic == T(0)) continue;
                    const float* col = strip.data() + (c - cb * kBlockDim) * height;
                    T* orow = ov.data() + i * rows;
                    for (int64_t r = 0; r < rows; ++r) {
                        orow[r] += xic * static_cast<T>(col[r]);
                    }
                }
            }
        }
    });
    return out;
}

Value matmul_compressed(Tape& t, Value x, const CompressedBlockMatrix& m) {
    Tensor out = matmul_compressed(t.value(x), m);
    CompressedBlockMatrix held = m;  // keep the weights alive for backward
    auto vjp = [x, held](Tape& tp, const Tensor& upstream) {
        tp.accumulate_grad(x, matmul_compressed_nt(upstream, held));
    };
    return t.record("matmul_compressed", {x}, std::move(out), std::move(vjp));
}

}  // namespace ptml
