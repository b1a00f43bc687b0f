#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "refer/model/config.hpp"
#include "refer/mutual/pseudo.hpp"
#include "refer/mutual/rewards.hpp"
#include "refer/nn/optim.hpp"

namespace refer::train {

/// Optimisation budget of one training step.
struct StepBudget {
  double lr = 5e-4;
  long iterations = 6000;
  int batch = 8;     // scenes (steps 1, 3) or (scene, object) items (step 2)
  long warmup = 200;

  nlohmann::json to_json() const;
  static StepBudget from_json(const nlohmann::json& j, StepBudget defaults);
};

enum class CandidateMode { beam, sample };

std::string_view to_string(CandidateMode m);

struct TrainConfig {
  model::ModelConfig model;
  model::ExtractorWeights extractor;
  nn::AdamWConfig optimizer;
  StepBudget step1{5e-4, 6000, 8, 200};
  StepBudget step2{1e-6, 1500, 8, 0};
  StepBudget step3{5e-4, 6000, 8, 200};
  double w_extractor = 1.0;
  double w_reg = 1.0;
  double w_res = 1.0;
  mutual::RewardConfig reward;
  CandidateMode candidates = CandidateMode::beam;  // how step 2 draws its q1 expressions
  mutual::PseudoConfig pseudo;
  int beam_width = 3;  // evaluation decoding
  long log_interval = 50;
  long checkpoint_interval = 0;  // 0: only at the end
  std::uint64_t seed = 0;

  /// Throws ConfigError.
  void validate() const;
  const StepBudget& budget(int step) const;

  /// Canonical form: keys sorted, every field present.
  nlohmann::json to_json() const;
  /// Missing keys take defaults; unknown keys throw ConfigError.
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig load(const std::filesystem::path& path);

  /// FNV-1a of the canonical serialisation.
  std::uint64_t hash() const;
};

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

}  // namespace refer::train
