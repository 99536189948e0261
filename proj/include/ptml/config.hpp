// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

namespace ptml::cfg {

// Model configs are plain text: one `key = value` per line, `#` comments,
// blank lines ignored. Serialization is sorted by key so round trips are
// byte-stable.
using KvMap = std::map<std::string, std::string>;

KvMap parse_kv_text(std::string_view text);
std::string serialize_kv_text(const KvMap& kv);

bool kv_has(const KvMap& kv, const std::string& key);
std::string kv_str(const KvMap& kv, const std::string& key, const std::string& fallback);
int64_t kv_int(const KvMap& kv, const std::string& key, int64_t fallback);
double kv_real(const KvMap& kv, const std::string& key, double fallback);
bool kv_bool(const KvMap& kv, const std::string& key, bool fallback);

}  // namespace ptml::cfg
