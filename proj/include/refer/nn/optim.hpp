#pragma once

#include <cmath>
#include <cstdint>
#include <istream>
#include <ostream>
#include <vector>

#include "refer/errors.hpp"
#include "refer/nn/layers.hpp"

namespace refer::nn {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double clip_norm = 1.0;  // <= 0 disables global-norm clipping
};

/// Piecewise-constant schedule: linear warmup, then x0.1 at 2/3 and again
/// at 8/9 of the budget.
inline double scheduled_lr(double base, long step, long total, long warmup) {
  double lr = base;
  if (warmup > 0 && step < warmup) lr *= double(step + 1) / double(warmup);
  if (3 * step >= 2 * total) lr *= 0.1;
  if (9 * step >= 8 * total) lr *= 0.1;
  return lr;
}

/// Adam with decoupled weight decay. Frozen parameters are skipped entirely,
/// so their values and moments stay bit-identical.
template <typename T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return t_; }

  /// Returns the pre-clipping global gradient norm.
  double step(ParameterStore<T>& store, double lr) {
    ensure_state(store);
    double sq = 0.0;
    for (const auto& p : store)
      if (!p.frozen && p.grad.size()) sq += double(p.grad.squaredNorm());
    const double norm = std::sqrt(sq);
    const double clip = (cfg_.clip_norm > 0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    std::size_t i = 0;
    for (auto& p : store) {
      auto& m = m_[i];
      auto& v = v_[i];
      ++i;
      if (p.frozen || p.grad.size() == 0) continue;
      const T b1 = T(cfg_.beta1), b2 = T(cfg_.beta2);
      Matrix<T> g = p.grad * T(clip);
      m = b1 * m + (T(1) - b1) * g;
      v = b2 * v + (T(1) - b2) * g.cwiseProduct(g);
      if (p.decay) p.value *= T(1.0 - lr * cfg_.weight_decay);
      p.value.array() -= T(lr) * (m.array() / T(bc1)) / ((v.array() / T(bc2)).sqrt() + T(cfg_.eps));
    }
    return norm;
  }

  void save(std::ostream& os) const {
    write_pod(os, std::int64_t(t_));
    write_pod(os, std::uint64_t(m_.size()));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      write_matrix(os, m_[i]);
      write_matrix(os, v_[i]);
    }
  }

  void load(std::istream& is, ParameterStore<T>& store) {
    std::int64_t t = read_pod<std::int64_t>(is);
    std::uint64_t n = read_pod<std::uint64_t>(is);
    m_.clear();
    v_.clear();
    if (n != 0 && n != store.size()) throw FormatError("optimizer state size mismatch");
    for (std::uint64_t i = 0; i < n; ++i) {
      m_.push_back(read_matrix<T>(is));
      v_.push_back(read_matrix<T>(is));
    }
    t_ = long(t);
    if (n) {
      std::size_t i = 0;
      for (const auto& p : store) {
        if (m_[i].rows() != p.value.rows() || m_[i].cols() != p.value.cols())
          throw FormatError("optimizer state shape mismatch for " + p.name);
        ++i;
      }
    }
  }

  template <typename P>
  static void write_pod(std::ostream& os, P v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(P));
  }
  template <typename P>
  static P read_pod(std::istream& is) {
    P v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(P))) throw FormatError("truncated binary data");
    return v;
  }
  static void write_matrix(std::ostream& os, const Matrix<T>& m) {
    write_pod(os, std::int64_t(m.rows()));
    write_pod(os, std::int64_t(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), std::streamsize(sizeof(T) * std::size_t(m.size())));
  }
  template <typename U>
  static Matrix<U> read_matrix(std::istream& is) {
    auto r = read_pod<std::int64_t>(is);
    auto c = read_pod<std::int64_t>(is);
    if (r < 0 || c < 0 || r * c > (std::int64_t(1) << 28)) throw FormatError("bad matrix header");
    Matrix<U> m(r, c);
    if (!is.read(reinterpret_cast<char*>(m.data()), std::streamsize(sizeof(U) * std::size_t(m.size()))))
      throw FormatError("truncated matrix data");
    return m;
  }

 private:
  void ensure_state(const ParameterStore<T>& store) {
    if (m_.size() == store.size()) return;
    m_.clear();
    v_.clear();
    for (const auto& p : store) {
      m_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  AdamWConfig cfg_;
  long t_ = 0;
  std::vector<Matrix<T>> m_, v_;
};

/// Parameters by name and shape; load requires an exact layout match.
template <typename T>
void save_parameters(std::ostream& os, const ParameterStore<T>& store) {
  AdamW<T>::write_pod(os, std::uint64_t(store.size()));
  for (const auto& p : store) {
    AdamW<T>::write_pod(os, std::uint32_t(p.name.size()));
    os.write(p.name.data(), std::streamsize(p.name.size()));
    AdamW<T>::write_matrix(os, p.value);
  }
}

template <typename T>
void load_parameters(std::istream& is, ParameterStore<T>& store) {
  auto n = AdamW<T>::template read_pod<std::uint64_t>(is);
  if (n != store.size()) throw FormatError("parameter count mismatch");
  for (auto& p : store) {
    auto len = AdamW<T>::template read_pod<std::uint32_t>(is);
    if (len > 4096) throw FormatError("bad parameter name");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw FormatError("truncated parameter name");
    if (name != p.name) throw FormatError("parameter layout mismatch: " + name + " vs " + p.name);
    Matrix<T> m = AdamW<T>::template read_matrix<T>(is);
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols())
      throw FormatError("parameter shape mismatch for " + name);
    p.value = std::move(m);
  }
}

}  // namespace refer::nn
