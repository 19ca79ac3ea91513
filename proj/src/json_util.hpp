// Strict JSON reading helpers shared by the config parsers.

#ifndef DEINFOREG_SRC_JSON_UTIL_HPP
#define DEINFOREG_SRC_JSON_UTIL_HPP

#include <initializer_list>
#include <stdexcept>
#include <string>
#include <string_view>

#include <json.hpp>

namespace deinforeg::detail {

/// Rejects keys outside `allowed` so typos fail loudly.
inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       const std::string& context) {
  if (!j.is_object()) throw std::invalid_argument(context + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok = ok || key == a;
    if (!ok) throw std::invalid_argument(context + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace deinforeg::detail

#endif  // DEINFOREG_SRC_JSON_UTIL_HPP
