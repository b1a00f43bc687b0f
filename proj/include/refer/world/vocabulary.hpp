#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "json.hpp"

namespace refer::world {

/// Dense token <-> id bijection with distinct reserved markers.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBegin = 1;
  static constexpr int kEnd = 2;

  /// The grammar's fixed vocabulary.
  static const Vocabulary& standard();

  explicit Vocabulary(std::vector<std::string> tokens);

  int size() const { return int(tokens_.size()); }
  int pad() const { return kPad; }
  int begin() const { return kBegin; }
  int end() const { return kEnd; }
  bool is_reserved(int id) const { return id == kPad || id == kBegin || id == kEnd; }

  /// Throws InputError for unknown words.
  int id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;

  /// Space-joined words, reserved markers dropped.
  std::string decode(const std::vector<int>& ids) const;
  /// begin + words + end.
  std::vector<int> encode(std::string_view text) const;
  /// Word tokens only (reserved markers stripped).
  std::vector<std::string> words(const std::vector<int>& ids) const;

  nlohmann::json to_json() const;
  static Vocabulary from_json(const nlohmann::json& j);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace refer::world
