#pragma once

#include <filesystem>
#include <ostream>
#include <span>
#include <vector>

#include "refer/model/model.hpp"
#include "refer/train/checkpoint.hpp"
#include "refer/train/config.hpp"
#include "refer/world/scene.hpp"

namespace refer::train {

struct RunOptions {
  std::ostream* log = nullptr;  // JSON Lines events
  /// Written every config.checkpoint_interval iterations (if set and nonzero).
  std::filesystem::path checkpoint_path;
  /// Stop after this many iterations of this call (< 0: run to the budget).
  long stop_after = -1;
  /// Periodic evaluation on these scenes every eval_interval iterations and
  /// once at the end of the step.
  std::span<const world::Scene> eval_scenes;
  long eval_interval = 0;
};

/// Loss terms of one scene on one tape. `reg` and `res` are sums of
/// weight-scaled per-expression losses.
struct SceneLoss {
  nn::Var<float> extractor;
  nn::Var<float> reg;
  nn::Var<float> res;
  int expressions = 0;
  double mask_bce = 0, dice = 0, objectness = 0;
};

/// With `include_pseudo` false only real expressions contribute.
SceneLoss scene_loss(nn::Tape<float>& t, const model::Model<float>& m, const TrainConfig& cfg,
                     const world::Scene& scene, bool include_pseudo);

/// Fingerprint of the scenes a step trains on.
std::uint64_t dataset_hash(std::span<const world::Scene> scenes);

/// Step 1: the whole network end to end on real expressions of train scenes.
TrainState train_step1(const TrainConfig& cfg, std::span<const world::Scene> data, const RunOptions& opts = {});

/// Step 2: policy-gradient training of the generation head only, from a
/// complete step-1 state. Throws ContractViolation on a wrong step tag and
/// ConfigError on a config mismatch.
TrainState train_step2(const TrainConfig& cfg, TrainState from, std::span<const world::Scene> data,
                       const RunOptions& opts = {});

/// Step 3: re-initialises and retrains the whole network as in step 1 on
/// real plus pseudo expressions. Requires a complete step-2 state.
TrainState train_step3(const TrainConfig& cfg, const TrainState& from, std::span<const world::Scene> data,
                       const RunOptions& opts = {});

/// Continues an interrupted step to its budget. Throws ConfigError if the
/// config or training data differ from the ones the state was made with.
TrainState resume(const TrainConfig& cfg, TrainState state, std::span<const world::Scene> data,
                  const RunOptions& opts = {});

}  // namespace refer::train
