#pragma once

#include <stdexcept>
#include <string>

namespace refer {

/// Invalid configuration or parameters (bad fractions, shape mismatches).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed serialized data (RLE totals, checkpoint headers, JSON records).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller broke an operation's precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Bad user-supplied input such as an unknown token id.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace refer
