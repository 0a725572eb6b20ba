#pragma once

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>
#include <type_traits>

#include <json.hpp>

namespace vitdiv {

/// A user-supplied configuration is malformed. The message names the key.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace json_util {

inline std::string join_key(std::string_view where, std::string_view key) {
  if (where.empty()) return std::string(key);
  return std::string(where) + "." + std::string(key);
}

inline void require_object(const nlohmann::json& j, std::string_view where) {
  if (!j.is_object()) {
    throw ConfigError("'" + std::string(where.empty() ? "<root>" : where) +
                      "' must be a JSON object");
  }
}

inline void require_known_keys(const nlohmann::json& j,
                               std::initializer_list<std::string_view> allowed,
                               std::string_view where) {
  require_object(j, where);
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (auto a : allowed) known = known || it.key() == a;
    if (!known) throw ConfigError("unknown key '" + join_key(where, it.key()) + "'");
  }
}

/// Reads j[key] into out when present; a type mismatch names the key.
template <typename T>
void read(const nlohmann::json& j, std::string_view key, T& out, std::string_view where) {
  auto it = j.find(std::string(key));
  if (it == j.end()) return;
  if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
    if (!it->is_number_integer() || (std::is_unsigned_v<T> && it->template get<long long>() < 0)) {
      throw ConfigError("invalid value for '" + join_key(where, key) + "': expected " +
                        (std::is_unsigned_v<T> ? "a non-negative integer" : "an integer"));
    }
  }
  try {
    out = it->template get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("invalid value for '" + join_key(where, key) + "': " + e.what());
  }
}

template <typename T>
void read_required(const nlohmann::json& j, std::string_view key, T& out, std::string_view where) {
  if (!j.contains(std::string(key))) {
    throw ConfigError("missing key '" + join_key(where, key) + "'");
  }
  read(j, key, out, where);
}

}  // namespace json_util
}  // namespace vitdiv
