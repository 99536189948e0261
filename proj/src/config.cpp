// SPDX-License-Identifier: Apache-2.0
#include "ptml/config.hpp"

#include <charconv>

#include <fmt/format.h>

#include "ptml/errors.hpp"

namespace ptml::cfg {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

}  // namespace

KvMap parse_kv_text(std::string_view text) {
    KvMap kv;
    size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const size_t nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = (nl == std::string_view::npos) ? std::string_view{} : text.substr(nl + 1);

        line = trim(line);
        if (line.empty() || line.front() == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw FormatError(fmt::format("config line {}: expected `key = value`, got \"{}\"", line_no, line));
        }
        std::string key(trim(line.substr(0, eq)));
        std::string value(trim(line.substr(eq + 1)));
        if (key.empty()) throw FormatError(fmt::format("config line {}: empty key", line_no));
        kv[key] = value;
    }
    return kv;
}

std::string serialize_kv_text(const KvMap& kv) {
    std::string out;
    for (const auto& [k, v] : kv) out += fmt::format("{} = {}\n", k, v);
    return out;
}

bool kv_has(const KvMap& kv, const std::string& key) { return kv.count(key) != 0; }

std::string kv_str(const KvMap& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

int64_t kv_int(const KvMap& kv, const std::string& key, int64_t fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    int64_t v = 0;
    auto [ptr, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc{} || ptr != it->second.data() + it->second.size()) {
        throw FormatError(fmt::format("config key {}: \"{}\" is not an integer", key, it->second));
    }
    return v;
}

double kv_real(const KvMap& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    try {
        size_t used = 0;
        double v = std::stod(it->second, &used);
        if (used != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw FormatError(fmt::format("config key {}: \"{}\" is not a number", key, it->second));
    }
}

bool kv_bool(const KvMap& kv, const std::string& key, bool fallback) {
    auto it = kv.find(key);
    if (it == kv.end()) return fallback;
    if (it->second == "true" || it->second == "1" || it->second == "on") return true;
    if (it->second == "false" || it->second == "0" || it->second == "off") return false;
    throw FormatError(fmt::format("config key {}: \"{}\" is not a boolean", key, it->second));
}

}  // namespace ptml::cfg
