#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

#include "refer/model/config.hpp"
#include "refer/model/perception.hpp"
#include "refer/model/reg_head.hpp"
#include "refer/model/res_head.hpp"
#include "refer/model/text_encoder.hpp"

namespace refer::model {

/// All four modules over one parameter store. Parameter names are prefixed
/// by module: "perception.", "text.", "reg.", "res.".
template <typename T>
class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    perception = Perception<T>(store, cfg_, rng);
    text = TextEncoder<T>(store, cfg_, rng);
    reg = RegHead<T>(store, cfg_, rng);
    res = ResHead<T>(store, cfg_, rng);
  }
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// Marks every parameter outside `module` frozen ("" unfreezes all).
  void train_only(std::string_view module) {
    for (auto& p : store) p.frozen = !module.empty() && !in_module(p.name, module);
  }

  static bool in_module(std::string_view name, std::string_view module) {
    return name.size() > module.size() && name.substr(0, module.size()) == module && name[module.size()] == '.';
  }

  nn::ParameterStore<T> store;
  Perception<T> perception;
  TextEncoder<T> text;
  RegHead<T> reg;
  ResHead<T> res;

 private:
  ModelConfig cfg_;
};

}  // namespace refer::model
