// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "ptml/tape.hpp"
#include "ptml/tensor.hpp"

namespace ptml {

// Lossy block codec for trained weight matrices. A matrix is cut into 6x6
// blocks; each block stores its minimum (binary16, rounded toward -inf so
// the shifted values stay non-negative) outside a 128-bit payload holding a
// binary16 scale and 36 3-bit level indices. Decode is scale*index + min.

inline constexpr int kBlockDim = 6;
inline constexpr int kBlockElems = kBlockDim * kBlockDim;
inline constexpr int kPayloadBytes = 16;
inline constexpr int kIndexMax = 7;

// payload bit layout, LSB-first within each byte:
//   bits [0, 16)    scale, binary16 bits, little-endian
//   bits [16, 124)  indices, 3 bits each; index i at bits [16+3i, 16+3i+3)
//   bits [124, 128) reserved, must be zero
struct CompressedBlock {
    std::array<uint8_t, kPayloadBytes> payload{};
    uint16_t min_bits = 0;  // block minimum as binary16 bits

    double scale() const;
    double block_min() const;
    int index(int i) const;
};

// encode ignores nothing: callers pad edge blocks with zeros themselves
CompressedBlock encode_block(const std::array<float, kBlockElems>& w);
// throws FormatError if the reserved bits are set
std::array<float, kBlockElems> decode_block(const CompressedBlock& b);

// certified per-element reconstruction error for a block with this scale:
// half a quantization step plus the binary16 rounding slack of the scale
double block_error_bound(double scale_value, double range);

struct CodecStats {
    double payload_bpw = 0.0;    // 128 * blocks / elements
    double total_bpw = 0.0;      // (128 + 16) * blocks / elements
    double max_abs_error = 0.0;  // over real elements, padding excluded
    double mean_abs_error = 0.0;
};

class CompressedBlockMatrix {
  public:
    // w: rank-2, finite, |values| <= 65504 (the binary16 range)
    static CompressedBlockMatrix compress(const Tensor& w);
    // original shape, f32; edge-block padding cropped away
    Tensor decompress() const;

    int64_t rows() const { return rows_; }
    int64_t cols() const { return cols_; }
    int64_t grid_rows() const { return grid_rows_; }
    int64_t grid_cols() const { return grid_cols_; }
    int64_t block_count() const { return grid_rows_ * grid_cols_; }
    const CompressedBlock& block(int64_t br, int64_t bc) const;
    // error fields describe the compress() run; deserialize leaves them zero
    const CodecStats& stats() const { return stats_; }

    std::vector<uint8_t> serialize() const;
    static CompressedBlockMatrix deserialize(const std::vector<uint8_t>& bytes);

  private:
    CompressedBlockMatrix() = default;

    int64_t rows_ = 0;
    int64_t cols_ = 0;
    int64_t grid_rows_ = 0;
    int64_t grid_cols_ = 0;
    std::vector<CompressedBlock> blocks_;  // row-major over the grid
    CodecStats stats_;
};

// x [n x rows] times the compressed matrix [rows x cols], decoding one
// six-row strip at a time; bit-identical to ops::matmul(x, decompress())
Tensor matmul_compressed(const Tensor& x, const CompressedBlockMatrix& m);
// x [n x cols] times the transpose, same strip-wise contract
Tensor matmul_compressed_nt(const Tensor& x, const CompressedBlockMatrix& m);

// tape node for the forward product; the matrix is frozen data, so the
// gradient flows to x alone via the transposed product
Value matmul_compressed(Tape& t, Value x, const CompressedBlockMatrix& m);

}  // namespace ptml
