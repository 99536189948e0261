// SPDX-License-Identifier: Apache-2.0
#include "ptml/io.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace fs = std::filesystem;

namespace ptml::io {

void ByteWriter::u16(uint16_t v) {
    buf_.push_back(static_cast<uint8_t>(v & 0xff));
    buf_.push_back(static_cast<uint8_t>(v >> 8));
}

void ByteWriter::u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void ByteWriter::u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<uint8_t>((v >> (8 * i)) & 0xff));
}

void ByteWriter::f32(float v) { u32(std::bit_cast<uint32_t>(v)); }
void ByteWriter::f64(double v) { u64(std::bit_cast<uint64_t>(v)); }

void ByteWriter::raw(std::span<const uint8_t> data) { buf_.insert(buf_.end(), data.begin(), data.end()); }

uint8_t ByteReader::u8() {
    if (at_ + 1 > data_.size()) throw FormatError("byte stream truncated");
    return data_[at_++];
}

uint16_t ByteReader::u16() {
    uint16_t lo = u8();
    return static_cast<uint16_t>(lo | (static_cast<uint16_t>(u8()) << 8));
}

uint32_t ByteReader::u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(u8()) << (8 * i);
    return v;
}

uint64_t ByteReader::u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(u8()) << (8 * i);
    return v;
}

float ByteReader::f32() { return std::bit_cast<float>(u32()); }
double ByteReader::f64() { return std::bit_cast<double>(u64()); }

std::span<const uint8_t> ByteReader::raw(size_t n) {
    if (at_ + n > data_.size()) throw FormatError("byte stream truncated");
    auto s = data_.subspan(at_, n);
    at_ += n;
    return s;
}

namespace {

std::array<uint32_t, 256> make_crc_table() {
    std::array<uint32_t, 256> table{};
    for (uint32_t i = 0; i < 256; ++i) {
        uint32_t c = i;
        for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
        table[i] = c;
    }
    return table;
}

}  // namespace

uint32_t crc32(std::span<const uint8_t> data) {
    static const std::array<uint32_t, 256> table = make_crc_table();
    uint32_t c = 0xFFFFFFFFu;
    for (uint8_t b : data) c = table[(c ^ b) & 0xff] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

uint64_t fnv1a64(std::span<const uint8_t> data, uint64_t seed) {
    uint64_t h = seed;
    for (uint8_t b : data) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

uint64_t fnv1a64_str(std::string_view s, uint64_t seed) {
    return fnv1a64({reinterpret_cast<const uint8_t*>(s.data()), s.size()}, seed);
}

std::string hex64(uint64_t v) { return fmt::format("{:016x}", v); }

namespace {
constexpr uint32_t kTensorVersion = 1;
constexpr uint8_t kTagF32 = 0;
constexpr uint8_t kTagF64 = 1;
}  // namespace

std::vector<uint8_t> tensor_bytes(const Tensor& t) {
    if (!t.defined()) throw FormatError("cannot serialize an undefined tensor");
    ByteWriter w;
    w.raw(std::span<const uint8_t>(reinterpret_cast<const uint8_t*>("PTML"), 4));
    w.u32(kTensorVersion);
    w.u8(t.dtype() == DType::f32 ? kTagF32 : kTagF64);
    w.u32(static_cast<uint32_t>(t.rank()));
    for (int64_t d : t.shape()) w.u64(static_cast<uint64_t>(d));
    if (t.dtype() == DType::f32) {
        for (int64_t i = 0; i < t.numel(); ++i) w.f32(static_cast<float>(t.get(i)));
    } else {
        for (int64_t i = 0; i < t.numel(); ++i) w.f64(t.get(i));
    }
    return w.take();
}

Tensor tensor_from_bytes(std::span<const uint8_t> data) {
    ByteReader r(data);
    auto magic = r.raw(4);
    if (std::memcmp(magic.data(), "PTML", 4) != 0) throw FormatError("bad tensor magic");
    const uint32_t version = r.u32();
    if (version != kTensorVersion) throw FormatError(fmt::format("unsupported tensor version {}", version));
    const uint8_t tag = r.u8();
    if (tag != kTagF32 && tag != kTagF64) throw FormatError(fmt::format("unknown dtype tag {}", tag));
    const uint32_t rank = r.u32();
    if (rank > 8) throw FormatError(fmt::format("implausible tensor rank {}", rank));
    Shape shape(rank);
    for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(r.u64());
    Tensor t(shape, tag == kTagF32 ? DType::f32 : DType::f64);
    if (tag == kTagF32) {
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, r.f32());
    } else {
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, r.f64());
    }
    if (r.remaining() != 0) throw FormatError("trailing bytes after tensor payload");
    return t;
}

void write_tensor(const std::string& path, const Tensor& t) {
    auto bytes = tensor_bytes(t);
    write_file_bytes(path, bytes);
}

Tensor read_tensor(const std::string& path) { return tensor_from_bytes(read_file_bytes(path)); }

void write_file_bytes(const std::string& path, std::span<const uint8_t> data) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(fmt::format("cannot open {} for writing", path));
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw FormatError(fmt::format("short write to {}", path));
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw FormatError(fmt::format("cannot open {}", path));
    const auto size = in.tellg();
    in.seekg(0);
    std::vector<uint8_t> data(static_cast<size_t>(size));
    in.read(reinterpret_cast<char*>(data.data()), size);
    if (!in) throw FormatError(fmt::format("short read from {}", path));
    return data;
}

void write_text_file(const std::string& path, std::string_view text) {
    write_file_bytes(path, {reinterpret_cast<const uint8_t*>(text.data()), text.size()});
}

std::string read_text_file(const std::string& path) {
    auto bytes = read_file_bytes(path);
    return std::string(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

uint64_t content_hash(const TensorMap& tensors) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : tensors) {
        h = fnv1a64_str(name, h);
        h = fnv1a64(std::span<const uint8_t>(std::array<uint8_t, 1>{0}), h);
        h = fnv1a64(tensor_bytes(t), h);
    }
    return h;
}

void save_checkpoint(const std::string& dir, const TensorMap& tensors, const ordered_json& extra) {
    fs::create_directories(dir);
    ordered_json manifest;
    manifest["format"] = "tensor-checkpoint";
    manifest["version"] = 1;
    ordered_json entries = ordered_json::object();
    for (const auto& [name, t] : tensors) {
        const std::string file = name + ".ptml";
        auto bytes = tensor_bytes(t);
        write_file_bytes((fs::path(dir) / file).string(), bytes);
        ordered_json e;
        e["file"] = file;
        e["dtype"] = dtype_name(t.dtype());
        e["shape"] = t.shape();
        e["fnv1a64"] = hex64(fnv1a64(bytes));
        entries[name] = e;
    }
    manifest["tensors"] = entries;
    manifest["content_hash"] = hex64(content_hash(tensors));
    manifest["extra"] = extra;
    write_text_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
    ordered_json manifest = ordered_json::parse(read_text_file(manifest_path));
    if (manifest.value("format", "") != "tensor-checkpoint") {
        throw FormatError(fmt::format("{}: not a tensor checkpoint manifest", manifest_path));
    }
    Checkpoint ck;
    for (const auto& [name, e] : manifest.at("tensors").items()) {
        auto bytes = read_file_bytes((fs::path(dir) / e.at("file").get<std::string>()).string());
        if (hex64(fnv1a64(bytes)) != e.at("fnv1a64").get<std::string>()) {
            throw FormatError(fmt::format("checkpoint tensor {} fails its hash", name));
        }
        ck.tensors[name] = tensor_from_bytes(bytes);
    }
    ck.extra = manifest.value("extra", ordered_json::object());
    ck.content_hash_hex = manifest.at("content_hash").get<std::string>();
    if (ck.content_hash_hex != hex64(content_hash(ck.tensors))) {
        throw FormatError("checkpoint content hash mismatch");
    }
    return ck;
}

}  // namespace ptml::io
