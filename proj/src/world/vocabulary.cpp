#include "refer/world/vocabulary.hpp"

#include <sstream>

#include "refer/errors.hpp"

namespace refer::world {

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary vocab({
      "<pad>", "<bos>", "<eos>",
      "circle", "square", "triangle",
      "red", "green", "blue", "yellow",
      "small", "large",
      "on", "the", "left", "right", "top", "bottom",
      "first", "second", "third", "from",
      "of", "above", "below",
  });
  return vocab;
}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.size() < 3) throw ConfigError("vocabulary needs the three reserved markers");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], int(i)).second)
      throw ConfigError("duplicate vocabulary token: " + tokens_[i]);
  }
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw InputError("unknown token '" + std::string(token) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.count(std::string(token)) != 0;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size()) throw InputError("token id out of range: " + std::to_string(id));
  return tokens_[std::size_t(id)];
}

std::vector<std::string> Vocabulary::words(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int id : ids) {
    if (is_reserved(id)) continue;
    out.push_back(token(id));
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (const auto& w : words(ids)) {
    if (!out.empty()) out += ' ';
    out += w;
  }
  return out;
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids{kBegin};
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(id(w));
  ids.push_back(kEnd);
  return ids;
}

nlohmann::json Vocabulary::to_json() const {
  nlohmann::json tokens = nlohmann::json::object();
  for (std::size_t i = 0; i < tokens_.size(); ++i) tokens[tokens_[i]] = int(i);
  return {{"tokens", tokens},
          {"reserved", {{"pad", tokens_[kPad]}, {"begin", tokens_[kBegin]}, {"end", tokens_[kEnd]}}}};
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
  const auto& tokens = j.at("tokens");
  std::vector<std::string> by_id(tokens.size());
  for (auto it = tokens.begin(); it != tokens.end(); ++it) {
    int id = it.value().get<int>();
    if (id < 0 || std::size_t(id) >= by_id.size() || !by_id[std::size_t(id)].empty())
      throw FormatError("vocabulary ids must be dense and unique");
    by_id[std::size_t(id)] = it.key();
  }
  Vocabulary v(std::move(by_id));
  const auto& reserved = j.at("reserved");
  if (v.id(reserved.at("pad").get<std::string>()) != kPad ||
      v.id(reserved.at("begin").get<std::string>()) != kBegin ||
      v.id(reserved.at("end").get<std::string>()) != kEnd)
    throw FormatError("reserved markers must occupy ids 0, 1, 2");
  return v;
}

}  // namespace refer::world
