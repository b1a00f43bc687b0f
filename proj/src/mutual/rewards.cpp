#include "refer/mutual/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "refer/errors.hpp"
#include "refer/json_util.hpp"

namespace refer::mutual {

std::string_view to_string(RewardVariant v) {
  switch (v) {
    case RewardVariant::softmax_tau: return "softmax_tau";
    case RewardVariant::softmax: return "softmax";
    case RewardVariant::sigmoid: return "sigmoid";
  }
  return "?";
}

std::optional<RewardVariant> parse_reward_variant(std::string_view s) {
  for (auto v : {RewardVariant::softmax_tau, RewardVariant::softmax, RewardVariant::sigmoid})
    if (to_string(v) == s) return v;
  return std::nullopt;
}

void RewardConfig::validate() const {
  if (!(alpha >= 0)) throw ConfigError("reward alpha must be >= 0");
  if (!(tau > 0)) throw ConfigError("reward tau must be > 0");
  if (q1 < 1) throw ConfigError("reward q1 must be >= 1");
}

nlohmann::json RewardConfig::to_json() const {
  return {{"alpha", alpha}, {"tau", tau}, {"q1", q1}, {"variant", std::string(to_string(variant))}};
}

RewardConfig RewardConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"alpha", "tau", "q1", "variant"}, "reward");
  RewardConfig c;
  try {
    c.alpha = j.value("alpha", c.alpha);
    c.tau = j.value("tau", c.tau);
    c.q1 = j.value("q1", c.q1);
    if (j.contains("variant")) {
      auto v = parse_reward_variant(j.at("variant").get<std::string>());
      if (!v) throw ConfigError("unknown reward variant: " + j.at("variant").get<std::string>());
      c.variant = *v;
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("reward config: ") + e.what());
  }
  c.validate();
  return c;
}

double unambiguity_reward(std::span<const double> scores, int k, const RewardConfig& cfg) {
  if (k < 0 || k >= int(scores.size())) throw ContractViolation("unambiguity_reward: target out of range");
  if (cfg.variant == RewardVariant::sigmoid) return 1.0 / (1.0 + std::exp(-scores[std::size_t(k)]));
  const double tau = cfg.variant == RewardVariant::softmax ? 1.0 : cfg.tau;
  const double top = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp((s - top) / tau);
  return std::exp((scores[std::size_t(k)] - top) / tau) / z;
}

double combined_reward(std::span<const double> scores, int k, double cider, const RewardConfig& cfg) {
  if (cider < 0) throw ContractViolation("combined_reward: negative cider");
  return cfg.alpha * unambiguity_reward(scores, k, cfg) + cider;
}

void apply_baseline(std::span<RewardSample> samples) {
  if (samples.empty()) return;
  double mean = 0.0;
  for (const auto& s : samples) mean += s.reward;
  mean /= double(samples.size());
  for (auto& s : samples) s.advantage = s.reward - mean;
}

template <typename T>
nn::Var<T> policy_gradient_loss(std::span<const nn::Var<T>> log_probs,
                                std::span<const RewardSample> samples) {
  if (samples.empty()) throw ContractViolation("policy_gradient_loss: no samples");
  if (log_probs.size() != samples.size()) throw ContractViolation("policy_gradient_loss: size mismatch");
  const double norm = samples.size() > 1 ? double(samples.size() - 1) : 1.0;
  nn::Var<T> total = nn::scale(log_probs[0], T(-samples[0].advantage / norm));
  for (std::size_t j = 1; j < samples.size(); ++j)
    total = nn::add(total, nn::scale(log_probs[j], T(-samples[j].advantage / norm)));
  return total;
}

std::vector<std::vector<int>> enumerate_sequences(int vocab_size, int max_generated, int pad_id, int begin_id,
                                                  int end_id, long budget) {
  if (max_generated < 1) throw ContractViolation("enumerate_sequences: max_generated must be >= 1");
  std::vector<int> generable;
  for (int v = 0; v < vocab_size; ++v)
    if (v != pad_id && v != begin_id) generable.push_back(v);
  double count = std::pow(double(generable.size()), max_generated);
  if (count > double(budget)) throw ContractViolation("enumeration budget exceeded");

  std::vector<std::vector<int>> out;
  std::vector<int> prefix{begin_id};
  std::function<void()> grow = [&] {
    for (int tok : generable) {
      prefix.push_back(tok);
      if (tok == end_id || int(prefix.size()) - 1 == max_generated)
        out.push_back(prefix);
      else
        grow();
      prefix.pop_back();
    }
  };
  grow();
  return out;
}

template <typename T>
ExactExpectation<T> exact_expected_reward(nn::Tape<T>& t, const model::RegHead<T>& reg, nn::Var<T> indicated,
                                          int max_generated,
                                          const std::function<double(const std::vector<int>&)>& reward) {
  const auto& cfg = reg.config();
  auto seqs = enumerate_sequences(cfg.vocab_size, max_generated, 0, reg.begin_id(), reg.end_id());
  ExactExpectation<T> e;
  e.sequences = int(seqs.size());
  for (const auto& y : seqs) {
    nn::Var<T> p = nn::exp(reg.policy_log_prob(t, y, indicated));
    e.probability_mass += double(p.item());
    nn::Var<T> term = nn::scale(p, T(reward(y)));
    e.value = e.value.valid() ? nn::add(e.value, term) : term;
  }
  return e;
}

template <typename T>
std::vector<nn::Matrix<T>> exact_expected_reward_grad(nn::ParameterStore<T>& store, const model::RegHead<T>& reg,
                                                      const std::function<nn::Var<T>(nn::Tape<T>&)>& indicated,
                                                      int max_generated,
                                                      const std::function<double(const std::vector<int>&)>& reward) {
  store.zero_grad();
  nn::Tape<T> t;
  auto e = exact_expected_reward(t, reg, indicated(t), max_generated, reward);
  t.backward(e.value);
  std::vector<nn::Matrix<T>> grads;
  for (auto& p : store) grads.push_back(p.grad.size() ? p.grad : nn::Matrix<T>::Zero(p.value.rows(), p.value.cols()));
  return grads;
}

#define REFER_INSTANTIATE_REWARDS(T)                                                                               \
  template nn::Var<T> policy_gradient_loss<T>(std::span<const nn::Var<T>>, std::span<const RewardSample>);                                     \
  template ExactExpectation<T> exact_expected_reward<T>(nn::Tape<T>&, const model::RegHead<T>&, nn::Var<T>, int,  \
                                                        const std::function<double(const std::vector<int>&)>&);   \
  template std::vector<nn::Matrix<T>> exact_expected_reward_grad<T>(                                             \
      nn::ParameterStore<T>&, const model::RegHead<T>&, const std::function<nn::Var<T>(nn::Tape<T>&)>&, int,     \
      const std::function<double(const std::vector<int>&)>&);

REFER_INSTANTIATE_REWARDS(float)
REFER_INSTANTIATE_REWARDS(double)

}  // namespace refer::mutual
