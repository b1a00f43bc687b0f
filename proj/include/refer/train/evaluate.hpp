#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refer/metrics/metrics.hpp"
#include "refer/model/model.hpp"
#include "refer/world/scene.hpp"

namespace refer::train {

std::vector<world::Scene> select_split(std::span<const world::Scene> scenes, world::Split split);

struct ResPrediction {
  int proposal = 0;
  std::vector<double> scores;
  world::Mask mask;  // full resolution
};

/// Selects the proposal an expression refers to.
ResPrediction infer_res(const model::Model<float>& m, const world::Scene& scene, const std::vector<int>& tokens);

/// Beam hypotheses for object `object` of `scene`, addressed through the
/// proposal its ground-truth mask matches. Throws InputError on a bad object.
std::vector<model::BeamHypothesis> infer_reg(const model::Model<float>& m, const world::Scene& scene, int object,
                                             int beam_width);

/// Object index -> proposal index for a scene (mask-cost matching).
std::vector<int> proposal_of_objects(const model::Model<float>& m, const world::Scene& scene);

struct EvalOptions {
  bool res = true;  // mIoU, oIoU, Pr@X, REC accuracy, selection accuracy
  bool reg = true;  // CIDEr, Meteor, grammar accuracy, Rb-Acc (with a judge)
  int beam_width = 3;
  const model::Model<float>* judge = nullptr;
  std::uint64_t judge_hash = 0;
  std::uint64_t model_hash = 0;
};

/// RES is scored over every real expression, REG over every object that has
/// at least one real expression (those expressions are the references).
metrics::EvalReport evaluate(const model::Model<float>& m, std::span<const world::Scene> scenes,
                             const std::string& split, const EvalOptions& opts);

}  // namespace refer::train
