#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "refer/model/reg_head.hpp"

namespace refer::mutual {

enum class RewardVariant { softmax_tau, softmax, sigmoid };

std::string_view to_string(RewardVariant v);
std::optional<RewardVariant> parse_reward_variant(std::string_view s);

struct RewardConfig {
  double alpha = 4.0;
  double tau = 2.5;
  int q1 = 5;  // expressions per (scene, target)
  RewardVariant variant = RewardVariant::softmax_tau;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static RewardConfig from_json(const nlohmann::json& j);
};

/// Share of the target among all matching scores: softmax with temperature
/// tau (tau = 1 for the plain softmax variant), or sigmoid(S_k). Throws
/// ContractViolation when k is out of range.
double unambiguity_reward(std::span<const double> scores, int k, const RewardConfig& cfg);

/// alpha * unambiguity + cider. Throws ContractViolation for negative cider.
double combined_reward(std::span<const double> scores, int k, double cider, const RewardConfig& cfg);

struct RewardSample {
  std::vector<int> tokens;
  double log_prob = 0.0;  // raw policy log-probability
  double unambiguity = 0.0;
  double cider = 0.0;
  double reward = 0.0;
  double advantage = 0.0;
};

/// advantage = reward - mean reward of the group.
void apply_baseline(std::span<RewardSample> samples);

/// Surrogate whose negative gradient is the REINFORCE estimate of the
/// expected-reward gradient:
///   -1/(q-1) * sum_j advantage_j * log p(Y_j)
/// The leave-one-out scale makes the mean baseline unbiased (the baseline
/// includes the sample itself, which shrinks the plain 1/q estimate by
/// (q-1)/q). Advantages are constants. Throws ContractViolation on empty or
/// mismatched input.
template <typename T>
nn::Var<T> policy_gradient_loss(std::span<const nn::Var<T>> log_probs,
                                std::span<const RewardSample> samples);

/// Every complete sequence the policy can emit within `max_generated` tokens:
/// word sequences closed by the end marker, plus those cut off at the budget.
/// Throws ContractViolation when generable^max_generated exceeds `budget`.
std::vector<std::vector<int>> enumerate_sequences(int vocab_size, int max_generated, int pad_id = 0,
                                                  int begin_id = 1, int end_id = 2, long budget = 100000);

template <typename T>
struct ExactExpectation {
  nn::Var<T> value;             // sum_Y p(Y) r(Y), differentiable
  double probability_mass = 0;  // sum_Y p(Y)
  int sequences = 0;
};

/// Builds E[r] over the full enumeration on the tape; backward() on `value`
/// yields the exact expected-reward gradient.
template <typename T>
ExactExpectation<T> exact_expected_reward(nn::Tape<T>& t, const model::RegHead<T>& reg, nn::Var<T> indicated,
                                          int max_generated,
                                          const std::function<double(const std::vector<int>&)>& reward);

/// Convenience wrapper: zeroes `store`, differentiates the enumerated
/// expectation and returns the gradients in store order.
template <typename T>
std::vector<nn::Matrix<T>> exact_expected_reward_grad(nn::ParameterStore<T>& store, const model::RegHead<T>& reg,
                                                      const std::function<nn::Var<T>(nn::Tape<T>&)>& indicated,
                                                      int max_generated,
                                                      const std::function<double(const std::vector<int>&)>& reward);

}  // namespace refer::mutual
