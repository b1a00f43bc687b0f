#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "refer/errors.hpp"
#include "refer/nn/ops.hpp"
#include "refer/nn/tape.hpp"

namespace refer::nn {

enum class Init { zeros, ones, xavier, normal };

/// Owns parameters with stable addresses, in creation order.
template <typename T>
class ParameterStore {
 public:
  Parameter<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, Init init,
                    std::mt19937_64& rng, double stddev = 0.02) {
    for (const auto& p : params_)
      if (p.name == name) throw ContractViolation("duplicate parameter " + name);
    Parameter<T> p;
    p.name = name;
    p.value.resize(rows, cols);
    switch (init) {
      case Init::zeros:
        p.value.setZero();
        p.decay = false;
        break;
      case Init::ones:
        p.value.setOnes();
        p.decay = false;
        break;
      case Init::xavier: {
        double a = std::sqrt(6.0 / double(rows + cols));
        std::uniform_real_distribution<double> u(-a, a);
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = T(u(rng));
        break;
      }
      case Init::normal: {
        std::normal_distribution<double> n(0.0, stddev);
        for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = T(n(rng));
        p.decay = false;
        break;
      }
    }
    p.zero_grad();
    params_.push_back(std::move(p));
    return params_.back();
  }

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += std::size_t(p.value.size());
    return n;
  }
  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;
};

template <typename T>
struct Linear {
  Parameter<T>* w = nullptr;  // in x out
  Parameter<T>* b = nullptr;  // 1 x out

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, std::mt19937_64& rng,
         bool bias = true) {
    w = &store.add(name + ".w", in, out, Init::xavier, rng);
    if (bias) b = &store.add(name + ".b", 1, out, Init::zeros, rng);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    Var<T> y = matmul(x, t.param(*w));
    return b ? add_row(y, t.param(*b)) : y;
  }
};

template <typename T>
struct LayerNorm {
  Parameter<T>* gain = nullptr;
  Parameter<T>* bias = nullptr;

  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& name, int dim, std::mt19937_64& rng) {
    gain = &store.add(name + ".g", 1, dim, Init::ones, rng);
    bias = &store.add(name + ".b", 1, dim, Init::zeros, rng);
  }

  Var<T> operator()(Tape<T>& t, Var<T> x) const {
    return layer_norm(x, t.param(*gain), t.param(*bias));
  }
};

template <typename T>
struct MultiHeadAttention {
  Linear<T> q, k, v, o;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParameterStore<T>& store, const std::string& name, int dim, int heads_,
                     std::mt19937_64& rng)
      : q(store, name + ".q", dim, dim, rng),
        k(store, name + ".k", dim, dim, rng),
        v(store, name + ".v", dim, dim, rng),
        o(store, name + ".o", dim, dim, rng),
        heads(heads_) {}

  Var<T> operator()(Tape<T>& t, Var<T> x, Var<T> mem, bool causal,
                    std::span<const std::uint8_t> key_valid = {}) const {
    return o(t, attention(q(t, x), k(t, mem), v(t, mem), heads, causal, key_valid));
  }

  /// Cross-attention with keys and values already projected.
  Var<T> attend(Tape<T>& t, Var<T> x, Var<T> keys, Var<T> values,
                std::span<const std::uint8_t> key_valid = {}) const {
    return o(t, attention(q(t, x), keys, values, heads, false, key_valid));
  }
};

template <typename T>
struct FeedForward {
  Linear<T> up, down;

  FeedForward() = default;
  FeedForward(ParameterStore<T>& store, const std::string& name, int dim, int hidden,
              std::mt19937_64& rng)
      : up(store, name + ".up", dim, hidden, rng), down(store, name + ".down", hidden, dim, rng) {}

  Var<T> operator()(Tape<T>& t, Var<T> x) const { return down(t, gelu(up(t, x))); }
};

/// Pre-norm self-attention block.
template <typename T>
struct EncoderLayer {
  LayerNorm<T> n1, n2;
  MultiHeadAttention<T> attn;
  FeedForward<T> ffn;

  EncoderLayer() = default;
  EncoderLayer(ParameterStore<T>& store, const std::string& name, int dim, int heads, int hidden,
               std::mt19937_64& rng)
      : n1(store, name + ".n1", dim, rng),
        n2(store, name + ".n2", dim, rng),
        attn(store, name + ".sa", dim, heads, rng),
        ffn(store, name + ".ffn", dim, hidden, rng) {}

  Var<T> operator()(Tape<T>& t, Var<T> x, std::span<const std::uint8_t> key_valid = {}) const {
    Var<T> h = n1(t, x);
    x = add(x, attn(t, h, h, false, key_valid));
    return add(x, ffn(t, n2(t, x)));
  }
};

/// Pre-norm decoder block: self-attention, cross-attention, feed-forward.
template <typename T>
struct DecoderLayer {
  LayerNorm<T> n1, n2, n3;
  MultiHeadAttention<T> self_attn, cross_attn;
  FeedForward<T> ffn;

  DecoderLayer() = default;
  DecoderLayer(ParameterStore<T>& store, const std::string& name, int dim, int heads, int hidden,
               std::mt19937_64& rng)
      : n1(store, name + ".n1", dim, rng),
        n2(store, name + ".n2", dim, rng),
        n3(store, name + ".n3", dim, rng),
        self_attn(store, name + ".sa", dim, heads, rng),
        cross_attn(store, name + ".ca", dim, heads, rng),
        ffn(store, name + ".ffn", dim, hidden, rng) {}

  Var<T> operator()(Tape<T>& t, Var<T> x, Var<T> mem, bool causal,
                    std::span<const std::uint8_t> mem_valid = {}) const {
    Var<T> h = n1(t, x);
    x = add(x, self_attn(t, h, h, causal));
    x = add(x, cross_attn(t, n2(t, x), mem, false, mem_valid));
    return add(x, ffn(t, n3(t, x)));
  }
};

}  // namespace refer::nn
