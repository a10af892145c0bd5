#pragma once

#include <initializer_list>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "ilu/error.hpp"

namespace ilu {

/// Reject any key of `j` outside `known`; `where` prefixes the message.
inline void require_known_keys(const nlohmann::json& j, std::initializer_list<std::string_view> known,
                               const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (auto k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

/// Assign j[key] to `out` when present, reporting type errors as ConfigError.
template <typename T>
void read_optional(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

}  // namespace ilu
