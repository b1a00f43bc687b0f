#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <random>
#include <string>

#include "refer/model/model.hpp"
#include "refer/nn/optim.hpp"
#include "refer/train/config.hpp"

namespace refer::train {

/// Everything needed to continue or reuse a training run.
struct TrainState {
  std::unique_ptr<model::Model<float>> model;
  nn::AdamW<float> optimizer;
  int step = 1;           // 1, 2 or 3
  long iteration = 0;     // iterations completed in `step`
  bool complete = false;  // `step` ran its full budget
  std::uint64_t config_hash = 0;
  std::uint64_t data_hash = 0;  // fingerprint of the training scenes of `step`
  std::mt19937_64 rng;
  TrainConfig config;

  /// FNV-1a over all parameter bytes; identifies a set of weights.
  std::uint64_t weights_hash() const;
};

/// A freshly initialised state for `step` (model seeded from config.seed).
TrainState fresh_state(const TrainConfig& cfg, int step);

/// Binary file: magic, JSON header (step tag, iteration, hashes, RNG state,
/// config), parameters, optimiser moments.
void save_checkpoint(const std::filesystem::path& path, const TrainState& state);
/// Throws InputError if unreadable and FormatError if malformed.
TrainState load_checkpoint(const std::filesystem::path& path);

}  // namespace refer::train
