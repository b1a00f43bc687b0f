#include "refer/mutual/pseudo.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "refer/errors.hpp"
#include "refer/json_util.hpp"
#include "refer/world/vocabulary.hpp"

namespace refer::mutual {

std::string_view to_string(FilterMode m) {
  switch (m) {
    case FilterMode::none: return "none";
    case FilterMode::random: return "random";
    case FilterMode::area: return "area";
  }
  return "?";
}

std::optional<FilterMode> parse_filter_mode(std::string_view s) {
  for (auto m : {FilterMode::none, FilterMode::random, FilterMode::area})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

void PseudoConfig::validate() const {
  if (q2 < 1) throw ConfigError("pseudo q2 must be >= 1");
  if (min_area < 0) throw ConfigError("pseudo min_area must be >= 0");
  if (!(pseudo_weight > 0 && pseudo_weight <= 1)) throw ConfigError("pseudo_weight must be in (0, 1]");
  if (beam_width < q2) throw ConfigError("pseudo beam_width must be >= q2");
}

nlohmann::json PseudoConfig::to_json() const {
  return {{"q2", q2},
          {"min_area", min_area},
          {"filter_mode", std::string(to_string(filter_mode))},
          {"pseudo_weight", pseudo_weight},
          {"beam_width", beam_width},
          {"seed", seed}};
}

PseudoConfig PseudoConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"q2", "min_area", "filter_mode", "pseudo_weight", "beam_width", "seed"}, "pseudo");
  PseudoConfig c;
  try {
    c.q2 = j.value("q2", c.q2);
    c.min_area = j.value("min_area", c.min_area);
    c.pseudo_weight = j.value("pseudo_weight", c.pseudo_weight);
    c.beam_width = j.value("beam_width", c.beam_width);
    c.seed = j.value("seed", c.seed);
    if (j.contains("filter_mode")) {
      auto m = parse_filter_mode(j.at("filter_mode").get<std::string>());
      if (!m) throw ConfigError("unknown filter_mode: " + j.at("filter_mode").get<std::string>());
      c.filter_mode = *m;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("pseudo config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json PseudoReport::to_json() const {
  return {{"filter_mode", std::string(to_string(mode))},
          {"candidates", candidates},
          {"retained", retained},
          {"filtered", candidates - retained},
          {"expressions", expressions},
          {"dropped_duplicates", dropped_duplicates}};
}

std::vector<Instance> unannotated_instances(std::span<const world::Scene> scenes) {
  std::vector<Instance> out;
  for (std::size_t s = 0; s < scenes.size(); ++s) {
    const auto& sc = scenes[s];
    if (sc.annotated || sc.split != world::Split::train) continue;
    for (const auto& o : sc.objects) out.push_back({int(s), o.id, o.area});
  }
  return out;
}

std::vector<Instance> area_filter(std::span<const Instance> instances, const PseudoConfig& cfg) {
  std::vector<Instance> out;
  if (cfg.filter_mode == FilterMode::none) return {instances.begin(), instances.end()};
  for (const auto& i : instances)
    if (i.area >= cfg.min_area) out.push_back(i);
  if (cfg.filter_mode == FilterMode::area) return out;

  std::mt19937_64 rng(cfg.seed);
  std::vector<Instance> picked;
  std::sample(instances.begin(), instances.end(), std::back_inserter(picked), out.size(), rng);
  return picked;
}

template <typename T>
PseudoResult generate_pseudo(std::span<const world::Scene> scenes, const model::Model<T>& model,
                             const PseudoConfig& cfg) {
  cfg.validate();
  const auto& vocab = world::Vocabulary::standard();
  const auto candidates = unannotated_instances(scenes);
  const auto kept = area_filter(candidates, cfg);

  PseudoResult r;
  r.report.mode = cfg.filter_mode;
  r.report.candidates = long(candidates.size());
  r.report.retained = long(kept.size());

  std::map<int, std::vector<int>> by_scene;
  for (const auto& i : kept) by_scene[i.scene].push_back(i.object);

  const int grid = model.config().grid();
  for (const auto& [s, objects] : by_scene) {
    const auto& scene = scenes[std::size_t(s)];
    nn::Tape<T> t(false);
    auto [props, pix] = model.perception.extract(t, scene.image);
    const auto targets = model::gt_mask_targets<T>(scene, grid);
    const auto query_of = model::match_instances<T>(targets, props.mask_logits.value());
    for (int obj : objects) {
      const int k = query_of[std::size_t(obj)];
      const auto indicated = model.reg.indicate(t, props.proposals, k).value();
      const auto beams = model.reg.decode_beam(indicated, cfg.beam_width, model.reg.max_generated());
      std::set<std::vector<int>> seen;
      for (const auto& b : beams) {
        if (int(seen.size()) == cfg.q2) break;
        if (!seen.insert(b.tokens).second) continue;
        world::Expression e;
        e.object_id = obj;
        e.tokens = b.tokens;
        e.text = vocab.decode(b.tokens);
        e.weight = cfg.pseudo_weight;
        e.provenance = world::Provenance::pseudo;
        r.items.push_back({s, scene.id, std::move(e)});
      }
    }
  }
  r.report.expressions = long(r.items.size());
  return r;
}

template PseudoResult generate_pseudo<float>(std::span<const world::Scene>, const model::Model<float>&,
                                             const PseudoConfig&);
template PseudoResult generate_pseudo<double>(std::span<const world::Scene>, const model::Model<double>&,
                                              const PseudoConfig&);

MergeResult merge_datasets(std::vector<world::Scene> real, std::span<const PseudoItem> pseudo) {
  MergeResult m;
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < real.size(); ++i) index[real[i].id] = i;
  std::set<std::tuple<std::string, int, std::vector<int>>> present;
  for (const auto& s : real)
    for (const auto& e : s.expressions) present.insert({s.id, e.object_id, e.tokens});

  for (const auto& p : pseudo) {
    auto it = index.find(p.scene_id);
    if (it == index.end()) throw InputError("pseudo expression for unknown scene " + p.scene_id);
    if (!present.insert({p.scene_id, p.expression.object_id, p.expression.tokens}).second) {
      ++m.dropped;
      continue;
    }
    real[it->second].expressions.push_back(p.expression);
    ++m.added;
  }
  m.scenes = std::move(real);
  return m;
}

}  // namespace refer::mutual
