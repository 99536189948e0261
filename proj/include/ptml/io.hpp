// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ptml/tensor.hpp"

namespace ptml::io {

using ordered_json = nlohmann::ordered_json;

class ByteWriter {
  public:
    void u8(uint8_t v) { buf_.push_back(v); }
    void u16(uint16_t v);
    void u32(uint32_t v);
    void u64(uint64_t v);
    void f32(float v);
    void f64(double v);
    void raw(std::span<const uint8_t> data);
    const std::vector<uint8_t>& bytes() const { return buf_; }
    std::vector<uint8_t> take() { return std::move(buf_); }
    size_t size() const { return buf_.size(); }

  private:
    std::vector<uint8_t> buf_;
};

// Throws FormatError on underrun.
class ByteReader {
  public:
    explicit ByteReader(std::span<const uint8_t> data) : data_(data) {}
    uint8_t u8();
    uint16_t u16();
    uint32_t u32();
    uint64_t u64();
    float f32();
    double f64();
    std::span<const uint8_t> raw(size_t n);
    size_t remaining() const { return data_.size() - at_; }

  private:
    std::span<const uint8_t> data_;
    size_t at_ = 0;
};

uint32_t crc32(std::span<const uint8_t> data);
uint64_t fnv1a64(std::span<const uint8_t> data, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t fnv1a64_str(std::string_view s, uint64_t seed = 0xcbf29ce484222325ULL);
std::string hex64(uint64_t v);

// Binary tensor dump: magic "PTML", version u32, dtype tag u8, rank u32,
// extents u64 each, raw little-endian payload.
std::vector<uint8_t> tensor_bytes(const Tensor& t);
Tensor tensor_from_bytes(std::span<const uint8_t> data);
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

void write_file_bytes(const std::string& path, std::span<const uint8_t> data);
std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_text_file(const std::string& path, std::string_view text);
std::string read_text_file(const std::string& path);

// Checkpoint: a directory of named tensor dumps plus manifest.json carrying
// shapes and content hashes. std::map keeps emission order deterministic.
using TensorMap = std::map<std::string, Tensor>;

uint64_t content_hash(const TensorMap& tensors);

struct Checkpoint {
    TensorMap tensors;
    ordered_json extra;
    std::string content_hash_hex;
};

void save_checkpoint(const std::string& dir, const TensorMap& tensors,
                     const ordered_json& extra = ordered_json::object());
Checkpoint load_checkpoint(const std::string& dir);

}  // namespace ptml::io
