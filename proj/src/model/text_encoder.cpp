#include "refer/model/text_encoder.hpp"

#include <string>

#include "refer/errors.hpp"

namespace refer::model {

template <typename T>
TextEncoder<T>::TextEncoder(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  embed_ = &store.add("text.embed", cfg.vocab_size, cfg.dim, nn::Init::normal, rng, 1.0);
  position_ = &store.add("text.position", cfg.max_len, cfg.dim, nn::Init::normal, rng, 0.5);
  for (int i = 0; i < cfg.text_layers; ++i)
    layers_.emplace_back(store, "text.enc" + std::to_string(i), cfg.dim, cfg.heads, cfg.hidden(), rng);
  norm_ = nn::LayerNorm<T>(store, "text.norm", cfg.dim, rng);
}

template <typename T>
TextFeatures<T> TextEncoder<T>::encode(nn::Tape<T>& t, std::span<const int> tokens, int valid_len) const {
  const int len = int(tokens.size());
  if (len == 0) throw InputError("empty token sequence");
  if (len > cfg_.max_len) throw InputError("token sequence longer than " + std::to_string(cfg_.max_len));
  for (int id : tokens)
    if (id < 0 || id >= cfg_.vocab_size) throw InputError("unknown token id " + std::to_string(id));
  if (valid_len < 0 || valid_len > len) valid_len = len;

  TextFeatures<T> out;
  out.valid.assign(std::size_t(len), 0);
  for (int i = 0; i < valid_len; ++i) out.valid[std::size_t(i)] = 1;
  std::vector<int> pos(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) pos[std::size_t(i)] = i;
  nn::Var<T> x = nn::add(nn::gather_rows(t.param(*embed_), tokens),
                         nn::gather_rows(t.param(*position_), std::span<const int>(pos)));
  for (const auto& layer : layers_) x = layer(t, x, out.valid);
  out.features = norm_(t, x);
  return out;
}

template class TextEncoder<float>;
template class TextEncoder<double>;

}  // namespace refer::model
