#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "refer/model/config.hpp"
#include "refer/nn/layers.hpp"

namespace refer::model {

template <typename T>
struct TextFeatures {
  nn::Var<T> features;              // L x C
  std::vector<std::uint8_t> valid;  // length L; 0 marks padding
};

/// Small transformer encoder with learned token and position embeddings.
template <typename T>
class TextEncoder {
 public:
  TextEncoder() = default;
  TextEncoder(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng);

  /// Positions at or beyond `valid_len` (-1: all) are padding and are never
  /// attended to. Throws InputError on an unknown id or overlong input.
  TextFeatures<T> encode(nn::Tape<T>& t, std::span<const int> tokens, int valid_len = -1) const;

 private:
  ModelConfig cfg_;
  nn::Parameter<T>* embed_ = nullptr;
  nn::Parameter<T>* position_ = nullptr;
  std::vector<nn::EncoderLayer<T>> layers_;
  nn::LayerNorm<T> norm_;
};

}  // namespace refer::model
