#pragma once

#include <random>
#include <span>
#include <vector>

#include "refer/model/config.hpp"
#include "refer/model/text_encoder.hpp"
#include "refer/nn/layers.hpp"

namespace refer::model {

/// Proposal selection head: proposals self-attend, query the text, and an
/// MLP maps each to a scalar matching score.
template <typename T>
class ResHead {
 public:
  ResHead() = default;
  ResHead(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng);

  /// N x 1 scores.
  nn::Var<T> matching_scores(nn::Tape<T>& t, nn::Var<T> proposals, const TextFeatures<T>& text) const;

 private:
  std::vector<nn::DecoderLayer<T>> layers_;
  nn::LayerNorm<T> norm_;
  nn::Linear<T> hidden_, score_;
};

/// -weight * log softmax(scores)[target] over the N scores (N x 1 or 1 x N).
template <typename T>
nn::Var<T> selection_loss(nn::Tape<T>& t, nn::Var<T> scores, int target, T weight = T(1));

/// Argmax with ties broken by the lowest index. Throws ContractViolation on
/// empty input.
int select(std::span<const double> scores);

template <typename T>
int select(const nn::Matrix<T>& scores) {
  std::vector<double> v(scores.data(), scores.data() + scores.size());
  return select(std::span<const double>(v));
}

}  // namespace refer::model
