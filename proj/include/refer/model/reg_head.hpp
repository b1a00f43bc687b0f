#pragma once

#include <random>
#include <span>
#include <vector>

#include "refer/model/config.hpp"
#include "refer/nn/layers.hpp"

namespace refer::model {

using nn::Matrix;
using nn::Var;

struct BeamHypothesis {
  std::vector<int> tokens;  // begin marker first
  double log_prob = 0.0;    // raw sum of per-step log-probabilities
  bool finished = false;

  int generated() const { return int(tokens.size()) - 1; }
  double normalized() const { return generated() > 0 ? log_prob / generated() : log_prob; }
};

/// Indicated generation head: proposals plus the indicator form the
/// cross-attention memory of a causal transformer decoder.
///
/// Two distributions over tokens are exposed. Teacher forcing uses the full
/// softmax over the vocabulary. Decoding, sampling and policy log-probs use
/// the policy distribution, which is the softmax restricted to generable
/// tokens (pad and begin are never emitted).
template <typename T>
class RegHead {
 public:
  RegHead() = default;
  RegHead(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng, int pad_id = 0,
          int begin_id = 1, int end_id = 2);

  const ModelConfig& config() const { return cfg_; }
  int end_id() const { return end_; }
  int begin_id() const { return begin_; }

  /// N x C rows: I_pos at slot k, I_neg elsewhere. Throws ContractViolation.
  Matrix<T> build_indicator(int n, int k) const;
  Var<T> indicator(nn::Tape<T>& t, int n, int k) const;
  /// proposals + I(k).
  Var<T> indicate(nn::Tape<T>& t, Var<T> proposals, int k) const;

  /// Teacher-forced logits, one row per input position (L x V).
  Var<T> logits(nn::Tape<T>& t, std::span<const int> tokens, Var<T> indicated) const;
  /// Logits for the token after `prefix` (1 x V). Throws ContractViolation if
  /// the prefix does not start with the begin marker or is too long.
  Matrix<T> next_token_logits(std::span<const int> prefix, const Matrix<T>& indicated) const;

  /// -weight * sum_l log p(y_l | y_<l), full softmax, begin excluded.
  Var<T> generation_loss(nn::Tape<T>& t, std::span<const int> tokens, Var<T> proposals, int k, T weight) const;
  /// Policy log-probability of a complete sequence (1 x 1).
  Var<T> policy_log_prob(nn::Tape<T>& t, std::span<const int> tokens, Var<T> indicated) const;

  /// Beam search under the policy distribution. `max_len` bounds the number
  /// of generated tokens (begin excluded, end included). Ranked by
  /// log_prob / generated(), deduplicated, at most beam_width results.
  std::vector<BeamHypothesis> decode_beam(const Matrix<T>& indicated, int beam_width, int max_len) const;
  BeamHypothesis greedy(const Matrix<T>& indicated, int max_len) const;
  /// One draw from the policy distribution.
  BeamHypothesis sample(const Matrix<T>& indicated, int max_len, std::mt19937_64& rng) const;

  /// Largest generation budget allowed by the model.
  int max_generated() const { return cfg_.max_len - 1; }

  /// Parameters that form a constant-output model (all zero except the
  /// output bias); used by tests.
  nn::Parameter<T>* output_bias() const { return out_.b; }

 private:
  struct Cache;
  void prepare(const Matrix<T>& indicated, Cache& c) const;
  Matrix<T> step(Cache& c, int token) const;
  Matrix<T> policy_log_softmax(const Matrix<T>& logits) const;

  ModelConfig cfg_;
  int pad_ = 0, begin_ = 1, end_ = 2;
  nn::Parameter<T>* i_pos_ = nullptr;
  nn::Parameter<T>* i_neg_ = nullptr;
  nn::Parameter<T>* embed_ = nullptr;
  nn::Parameter<T>* position_ = nullptr;
  std::vector<nn::DecoderLayer<T>> layers_;
  nn::LayerNorm<T> norm_;
  nn::Linear<T> out_;
};

}  // namespace refer::model
