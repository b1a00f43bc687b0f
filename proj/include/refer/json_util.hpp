#pragma once

#include <initializer_list>
#include <set>
#include <string>

#include "json.hpp"
#include "refer/errors.hpp"

namespace refer {

/// Throws ConfigError unless `j` is an object whose keys are all in `known`.
inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> known, const char* what) {
  if (!j.is_object()) throw ConfigError(std::string(what) + " must be an object");
  std::set<std::string> k(known.begin(), known.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!k.count(it.key())) throw ConfigError(std::string("unknown key in ") + what + ": " + it.key());
}

}  // namespace refer
