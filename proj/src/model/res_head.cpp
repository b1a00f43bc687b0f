#include "refer/model/res_head.hpp"

#include <string>

#include "refer/errors.hpp"

namespace refer::model {

template <typename T>
ResHead<T>::ResHead(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng) {
  for (int i = 0; i < cfg.res_layers; ++i)
    layers_.emplace_back(store, "res.dec" + std::to_string(i), cfg.dim, cfg.heads, cfg.hidden(), rng);
  norm_ = nn::LayerNorm<T>(store, "res.norm", cfg.dim, rng);
  hidden_ = nn::Linear<T>(store, "res.mlp0", cfg.dim, cfg.dim, rng);
  score_ = nn::Linear<T>(store, "res.mlp1", cfg.dim, 1, rng);
}

template <typename T>
nn::Var<T> ResHead<T>::matching_scores(nn::Tape<T>& t, nn::Var<T> proposals, const TextFeatures<T>& text) const {
  if (proposals.cols() != text.features.cols()) throw ContractViolation("proposal and text widths differ");
  nn::Var<T> x = proposals;
  for (const auto& layer : layers_) x = layer(t, x, text.features, false, text.valid);
  return score_(t, nn::gelu(hidden_(t, norm_(t, x))));
}

template <typename T>
nn::Var<T> selection_loss(nn::Tape<T>& t, nn::Var<T> scores, int target, T weight) {
  nn::Var<T> row = scores.rows() == 1 ? scores : nn::transpose(scores);
  if (target < 0 || target >= row.cols()) throw ContractViolation("selection target out of range");
  const int tg[1] = {target};
  return nn::scale(nn::sum_log_prob(row, std::span<const int>(tg, 1)), -weight);
}

int select(std::span<const double> scores) {
  if (scores.empty()) throw ContractViolation("select on empty scores");
  int best = 0;
  for (int i = 1; i < int(scores.size()); ++i)
    if (scores[std::size_t(i)] > scores[std::size_t(best)]) best = i;
  return best;
}

template class ResHead<float>;
template class ResHead<double>;
template nn::Var<float> selection_loss<float>(nn::Tape<float>&, nn::Var<float>, int, float);
template nn::Var<double> selection_loss<double>(nn::Tape<double>&, nn::Var<double>, int, double);

}  // namespace refer::model
