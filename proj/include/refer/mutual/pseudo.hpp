#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "refer/model/model.hpp"
#include "refer/world/scene.hpp"

namespace refer::mutual {

enum class FilterMode { none, random, area };

std::string_view to_string(FilterMode m);
std::optional<FilterMode> parse_filter_mode(std::string_view s);

struct PseudoConfig {
  int q2 = 3;           // expressions per retained instance
  long min_area = 120;  // pixels; see README for the scaling of the 32x32 rule
  FilterMode filter_mode = FilterMode::area;
  double pseudo_weight = 0.1;
  int beam_width = 5;   // >= q2
  std::uint64_t seed = 0;  // random filter mode

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static PseudoConfig from_json(const nlohmann::json& j);
};

struct Instance {
  int scene = 0;  // index into the scene list
  int object = 0;
  long area = 0;
};

/// Unannotated train instances of `scenes`, in scene/object order.
std::vector<Instance> unannotated_instances(std::span<const world::Scene> scenes);

/// area: keep area >= min_area. random: a seeded uniform subset with the
/// cardinality the area rule would keep. none: identity. Order is preserved.
std::vector<Instance> area_filter(std::span<const Instance> instances, const PseudoConfig& cfg);

struct PseudoItem {
  int scene = 0;
  std::string scene_id;
  world::Expression expression;  // provenance pseudo, weight pseudo_weight
};

struct PseudoReport {
  FilterMode mode = FilterMode::area;
  long candidates = 0;
  long retained = 0;
  long expressions = 0;
  long dropped_duplicates = 0;  // filled in by merge_datasets

  nlohmann::json to_json() const;
};

struct PseudoResult {
  std::vector<PseudoItem> items;
  PseudoReport report;
};

/// Beam-decodes up to q2 distinct expressions for every retained unannotated
/// instance. Each object is addressed through the proposal its ground-truth
/// mask matches. Deterministic.
template <typename T>
PseudoResult generate_pseudo(std::span<const world::Scene> scenes, const model::Model<T>& model,
                             const PseudoConfig& cfg);

struct MergeResult {
  std::vector<world::Scene> scenes;
  long added = 0;
  long dropped = 0;  // pseudo copies of an existing (scene, object, tokens)
};

/// Appends pseudo expressions to their scenes. Weights are kept as given.
/// Throws InputError if an item names an unknown scene.
MergeResult merge_datasets(std::vector<world::Scene> real, std::span<const PseudoItem> pseudo);

}  // namespace refer::mutual
