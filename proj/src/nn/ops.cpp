#include "refer/nn/ops.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace refer::nn {

namespace {

template <typename T>
bool needs(const Tape<T>& t, std::initializer_list<int> ids) {
  for (int id : ids)
    if (t.requires_grad(id)) return true;
  return false;
}

template <typename T>
void check_same_tape(Var<T> a, Var<T> b) {
  if (a.tape() != b.tape()) throw std::logic_error("vars from different tapes");
}

template <typename T>
void check_shape(bool ok, const char* what) {
  if (!ok) throw std::logic_error(std::string("shape mismatch in ") + what);
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  check_shape<T>(a.cols() == b.rows(), "matmul");
  auto& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() * b.value();
  return t.push(std::move(out), needs(t, {ia, ib}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_ref(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad_ref(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  check_shape<T>(a.cols() == b.cols(), "matmul_nt");
  auto& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() * b.value().transpose();
  return t.push(std::move(out), needs(t, {ia, ib}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_ref(ia).noalias() += g * t.value(ib);
    if (t.requires_grad(ib)) t.grad_ref(ib).noalias() += g.transpose() * t.value(ia);
  });
}

template <typename T>
Var<T> transpose(Var<T> a) {
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out = a.value().transpose();
  return t.push(std::move(out), needs(t, {ia}), [ia](Tape<T>& t, int self) {
    t.grad_ref(ia) += t.grad(self).transpose();
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  check_shape<T>(a.rows() == b.rows() && a.cols() == b.cols(), "add");
  auto& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() + b.value();
  return t.push(std::move(out), needs(t, {ia, ib}), [ia, ib](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) t.grad_ref(ia) += t.grad(self);
    if (t.requires_grad(ib)) t.grad_ref(ib) += t.grad(self);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  check_shape<T>(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
  auto& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Matrix<T> out = a.value() - b.value();
  return t.push(std::move(out), needs(t, {ia, ib}), [ia, ib](Tape<T>& t, int self) {
    if (t.requires_grad(ia)) t.grad_ref(ia) += t.grad(self);
    if (t.requires_grad(ib)) t.grad_ref(ib) -= t.grad(self);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_tape(a, b);
  check_shape<T>(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
  auto& t = *a.tape();
  int ia = a.id(), ib = b.id();
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return t.push(std::move(out), needs(t, {ia, ib}), [ia, ib](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_ref(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad_ref(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out = a.value() * s;
  return t.push(std::move(out), needs(t, {ia}), [ia, s](Tape<T>& t, int self) {
    t.grad_ref(ia) += t.grad(self) * s;
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  check_same_tape(a, row);
  check_shape<T>(row.rows() == 1 && row.cols() == a.cols(), "add_row");
  auto& t = *a.tape();
  int ia = a.id(), ir = row.id();
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return t.push(std::move(out), needs(t, {ia, ir}), [ia, ir](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(ia)) t.grad_ref(ia) += g;
    if (t.requires_grad(ir)) t.grad_ref(ir) += g.colwise().sum();
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  auto& t = *a.tape();
  int ia = a.id();
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T k = T(0.044715);
  const auto& x = a.value();
  Matrix<T> th(x.rows(), x.cols());
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    T v = x.data()[i];
    T u = std::tanh(c * (v + k * v * v * v));
    th.data()[i] = u;
    out.data()[i] = T(0.5) * v * (T(1) + u);
  }
  return t.push(std::move(out), needs(t, {ia}), [ia, th = std::move(th), c, k](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    const auto& x = t.value(ia);
    auto& gx = t.grad_ref(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      T v = x.data()[i];
      T u = th.data()[i];
      T d = T(0.5) * (T(1) + u) + T(0.5) * v * (T(1) - u * u) * c * (T(1) + T(3) * k * v * v);
      gx.data()[i] += g.data()[i] * d;
    }
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out = a.value().cwiseMax(T(0));
  return t.push(std::move(out), needs(t, {ia}), [ia](Tape<T>& t, int self) {
    const auto& x = t.value(ia);
    t.grad_ref(ia) += (x.array() > T(0)).select(t.grad(self), T(0)).matrix();
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out = (T(1) / (T(1) + (-a.value().array()).exp())).matrix();
  return t.push(std::move(out), needs(t, {ia}), [ia](Tape<T>& t, int self) {
    const auto& y = t.value(self);
    t.grad_ref(ia) += (t.grad(self).array() * y.array() * (T(1) - y.array())).matrix();
  });
}

template <typename T>
Var<T> exp(Var<T> a) {
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out = a.value().array().exp().matrix();
  return t.push(std::move(out), needs(t, {ia}), [ia](Tape<T>& t, int self) {
    t.grad_ref(ia) += t.grad(self).cwiseProduct(t.value(self));
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index begin, Eigen::Index count) {
  check_shape<T>(begin >= 0 && count >= 0 && begin + count <= a.rows(), "slice_rows");
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out = a.value().middleRows(begin, count);
  return t.push(std::move(out), needs(t, {ia}), [ia, begin, count](Tape<T>& t, int self) {
    t.grad_ref(ia).middleRows(begin, count) += t.grad(self);
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::logic_error("concat_rows of nothing");
  auto& t = *parts[0].tape();
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  std::vector<int> ids;
  bool rg = false;
  for (const auto& p : parts) {
    check_shape<T>(p.cols() == cols, "concat_rows");
    rows += p.rows();
    ids.push_back(p.id());
    rg = rg || t.requires_grad(p.id());
  }
  Matrix<T> out(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), rg, [ids = std::move(ids)](Tape<T>& t, int self) {
    Eigen::Index r = 0;
    for (int id : ids) {
      const auto n = t.value(id).rows();
      if (t.requires_grad(id)) t.grad_ref(id) += t.grad(self).middleRows(r, n);
      r += n;
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  auto& t = *table.tape();
  int it = table.id();
  const auto& v = table.value();
  Matrix<T> out(Eigen::Index(ids.size()), v.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= v.rows()) throw std::out_of_range("gather_rows index");
    out.row(Eigen::Index(i)) = v.row(ids[i]);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return t.push(std::move(out), needs(t, {it}), [it, idx = std::move(idx)](Tape<T>& t, int self) {
    auto& g = t.grad_ref(it);
    const auto& go = t.grad(self);
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += go.row(Eigen::Index(i));
  });
}

template <typename T>
Var<T> permute_rows(Var<T> a, std::span<const int> order) {
  check_shape<T>(Eigen::Index(order.size()) == a.rows(), "permute_rows");
  return gather_rows(a, order);
}

template <typename T>
Var<T> sum(Var<T> a) {
  auto& t = *a.tape();
  int ia = a.id();
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), needs(t, {ia}), [ia](Tape<T>& t, int self) {
    t.grad_ref(ia).array() += t.grad(self)(0, 0);
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / T(a.value().size()));
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  check_shape<T>(gain.rows() == 1 && gain.cols() == x.cols() && bias.cols() == x.cols(), "layer_norm");
  auto& t = *x.tape();
  int ix = x.id(), ig = gain.id(), ib = bias.id();
  const auto& xv = x.value();
  const Eigen::Index n = xv.cols();
  Matrix<T> xhat(xv.rows(), n);
  Matrix<T> inv_std(xv.rows(), 1);
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    T mu = xv.row(r).mean();
    T var = (xv.row(r).array() - mu).square().mean();
    T is = T(1) / std::sqrt(var + eps);
    inv_std(r, 0) = is;
    xhat.row(r) = (xv.row(r).array() - mu) * is;
  }
  Matrix<T> out = (xhat.array().rowwise() * gain.value().row(0).array()).matrix();
  out.rowwise() += bias.value().row(0);
  return t.push(std::move(out), needs(t, {ix, ig, ib}),
                [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, int self) {
                  const auto& g = t.grad(self);
                  if (t.requires_grad(ig)) t.grad_ref(ig) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.requires_grad(ib)) t.grad_ref(ib) += g.colwise().sum();
                  if (t.requires_grad(ix)) {
                    Matrix<T> dxhat = (g.array().rowwise() * t.value(ig).row(0).array()).matrix();
                    auto& gx = t.grad_ref(ix);
                    const T n = T(dxhat.cols());
                    for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                      T m1 = dxhat.row(r).sum() / n;
                      T m2 = dxhat.row(r).dot(xhat.row(r)) / n;
                      gx.row(r).array() +=
                          inv_std(r, 0) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                    }
                  }
                });
}

template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, bool causal,
                 std::span<const std::uint8_t> key_valid) {
  check_same_tape(q, k);
  check_same_tape(q, v);
  const Eigen::Index lq = q.rows(), lk = k.rows(), c = q.cols();
  check_shape<T>(k.cols() == c && v.cols() == c && v.rows() == lk, "attention");
  check_shape<T>(heads > 0 && c % heads == 0, "attention heads");
  check_shape<T>(key_valid.empty() || Eigen::Index(key_valid.size()) == lk, "attention key mask");
  auto& t = *q.tape();
  int iq = q.id(), ik = k.id(), iv = v.id();
  const Eigen::Index d = c / heads;
  const T s = T(1) / std::sqrt(T(d));

  // Allowed (query, key) pairs.
  Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> allowed(lq, lk);
  for (Eigen::Index i = 0; i < lq; ++i)
    for (Eigen::Index j = 0; j < lk; ++j)
      allowed(i, j) = (!causal || j <= i) && (key_valid.empty() || key_valid[std::size_t(j)] != 0);

  std::vector<Matrix<T>> probs(static_cast<std::size_t>(heads));
  Matrix<T> out(lq, c);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  for (int h = 0; h < heads; ++h) {
    Matrix<T> scores = (qv.middleCols(h * d, d) * kv.middleCols(h * d, d).transpose()) * s;
    for (Eigen::Index i = 0; i < lq; ++i) {
      T mx = -std::numeric_limits<T>::infinity();
      for (Eigen::Index j = 0; j < lk; ++j)
        if (allowed(i, j)) mx = std::max(mx, scores(i, j));
      T z = 0;
      for (Eigen::Index j = 0; j < lk; ++j) {
        T e = allowed(i, j) ? std::exp(scores(i, j) - mx) : T(0);
        scores(i, j) = e;
        z += e;
      }
      if (z > T(0)) scores.row(i) /= z;
    }
    out.middleCols(h * d, d).noalias() = scores * vv.middleCols(h * d, d);
    probs[std::size_t(h)] = std::move(scores);
  }

  return t.push(std::move(out), needs(t, {iq, ik, iv}),
                [iq, ik, iv, heads, d, s, probs = std::move(probs)](Tape<T>& t, int self) {
                  const auto& g = t.grad(self);
                  const auto& qv = t.value(iq);
                  const auto& kv = t.value(ik);
                  const auto& vv = t.value(iv);
                  const bool gq = t.requires_grad(iq), gk = t.requires_grad(ik), gv = t.requires_grad(iv);
                  for (int h = 0; h < heads; ++h) {
                    const auto& p = probs[std::size_t(h)];
                    auto go = g.middleCols(h * d, d);
                    if (gv) t.grad_ref(iv).middleCols(h * d, d).noalias() += p.transpose() * go;
                    if (!gq && !gk) continue;
                    Matrix<T> dp = go * vv.middleCols(h * d, d).transpose();
                    Matrix<T> ds = p.cwiseProduct(dp);
                    Matrix<T> rs = ds.rowwise().sum();
                    ds -= (p.array().colwise() * rs.col(0).array()).matrix();
                    ds *= s;
                    if (gq) t.grad_ref(iq).middleCols(h * d, d).noalias() += ds * kv.middleCols(h * d, d);
                    if (gk) t.grad_ref(ik).middleCols(h * d, d).noalias() += ds.transpose() * qv.middleCols(h * d, d);
                  }
                });
}

template <typename T>
Var<T> im2col3x3(Var<T> x, int h, int w) {
  check_shape<T>(x.rows() == Eigen::Index(h) * w, "im2col3x3");
  auto& t = *x.tape();
  int ix = x.id();
  const Eigen::Index c = x.cols();
  const auto& xv = x.value();
  Matrix<T> out = Matrix<T>::Zero(xv.rows(), 9 * c);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      const Eigen::Index row = Eigen::Index(y) * w + xx;
      for (int dy = -1; dy <= 1; ++dy) {
        for (int dx = -1; dx <= 1; ++dx) {
          int sy = y + dy, sx = xx + dx;
          if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
          Eigen::Index slot = (dy + 1) * 3 + (dx + 1);
          out.block(row, slot * c, 1, c) = xv.row(Eigen::Index(sy) * w + sx);
        }
      }
    }
  }
  return t.push(std::move(out), needs(t, {ix}), [ix, h, w, c](Tape<T>& t, int self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad_ref(ix);
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        const Eigen::Index row = Eigen::Index(y) * w + xx;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            int sy = y + dy, sx = xx + dx;
            if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
            Eigen::Index slot = (dy + 1) * 3 + (dx + 1);
            gx.row(Eigen::Index(sy) * w + sx) += g.block(row, slot * c, 1, c);
          }
        }
      }
    }
  });
}

template <typename T>
Matrix<T> log_softmax_rows(const Matrix<T>& x) {
  Matrix<T> out(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T mx = x.row(r).maxCoeff();
    T lse = mx + std::log((x.row(r).array() - mx).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

template <typename T>
Matrix<T> softmax_rows(const Matrix<T>& x) {
  return log_softmax_rows(x).array().exp().matrix();
}

template <typename T>
Var<T> sum_log_prob(Var<T> logits, std::span<const int> targets) {
  check_shape<T>(Eigen::Index(targets.size()) == logits.rows(), "sum_log_prob");
  auto& t = *logits.tape();
  int il = logits.id();
  Matrix<T> ls = log_softmax_rows(logits.value());
  Matrix<T> out(1, 1);
  out(0, 0) = 0;
  std::vector<int> tg(targets.begin(), targets.end());
  for (std::size_t i = 0; i < tg.size(); ++i) {
    if (tg[i] < 0 || tg[i] >= ls.cols()) throw std::out_of_range("sum_log_prob target");
    out(0, 0) += ls(Eigen::Index(i), tg[i]);
  }
  return t.push(std::move(out), needs(t, {il}), [il, ls = std::move(ls), tg = std::move(tg)](Tape<T>& t, int self) {
    const T g = t.grad(self)(0, 0);
    auto& gl = t.grad_ref(il);
    for (std::size_t i = 0; i < tg.size(); ++i) {
      const auto r = Eigen::Index(i);
      gl.row(r).array() -= g * ls.row(r).array().exp();
      gl(r, tg[i]) += g;
    }
  });
}

template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Matrix<T>& targets, const Matrix<T>& weights) {
  check_shape<T>(targets.rows() == logits.rows() && targets.cols() == logits.cols(), "bce_with_logits");
  check_shape<T>(weights.size() == 0 || (weights.rows() == logits.rows() && weights.cols() == logits.cols()),
                 "bce_with_logits weights");
  auto& t = *logits.tape();
  int il = logits.id();
  const auto& x = logits.value();
  Matrix<T> w = weights.size() ? weights : Matrix<T>::Ones(x.rows(), x.cols());
  Matrix<T> out(1, 1);
  T total = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    T v = x.data()[i];
    T l = std::max(v, T(0)) - v * targets.data()[i] + std::log1p(std::exp(-std::abs(v)));
    total += w.data()[i] * l;
  }
  out(0, 0) = total;
  return t.push(std::move(out), needs(t, {il}), [il, targets, w = std::move(w)](Tape<T>& t, int self) {
    const T g = t.grad(self)(0, 0);
    const auto& x = t.value(il);
    auto& gl = t.grad_ref(il);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      T p = T(1) / (T(1) + std::exp(-x.data()[i]));
      gl.data()[i] += g * w.data()[i] * (p - targets.data()[i]);
    }
  });
}

template <typename T>
Var<T> dice_loss(Var<T> logits, const Matrix<T>& targets) {
  check_shape<T>(logits.rows() == 1 && targets.rows() == 1 && targets.cols() == logits.cols(), "dice_loss");
  auto& t = *logits.tape();
  int il = logits.id();
  Matrix<T> p = (T(1) / (T(1) + (-logits.value().array()).exp())).matrix();
  const T num = T(2) * p.cwiseProduct(targets).sum() + T(1);
  const T den = p.sum() + targets.sum() + T(1);
  Matrix<T> out(1, 1);
  out(0, 0) = T(1) - num / den;
  return t.push(std::move(out), needs(t, {il}), [il, p = std::move(p), targets, num, den](Tape<T>& t, int self) {
    const T g = t.grad(self)(0, 0);
    auto& gl = t.grad_ref(il);
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      T dp = -(T(2) * targets.data()[i] * den - num) / (den * den);
      T pi = p.data()[i];
      gl.data()[i] += g * dp * pi * (T(1) - pi);
    }
  });
}

#define REFER_INSTANTIATE_OPS(T)                                                             \
  template Var<T> matmul(Var<T>, Var<T>);                                                    \
  template Var<T> matmul_nt(Var<T>, Var<T>);                                                 \
  template Var<T> transpose(Var<T>);                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                       \
  template Var<T> scale(Var<T>, T);                                                          \
  template Var<T> add_row(Var<T>, Var<T>);                                                   \
  template Var<T> gelu(Var<T>);                                                              \
  template Var<T> relu(Var<T>);                                                              \
  template Var<T> sigmoid(Var<T>);                                                           \
  template Var<T> exp(Var<T>);                                                               \
  template Var<T> slice_rows(Var<T>, Eigen::Index, Eigen::Index);                            \
  template Var<T> concat_rows(std::span<const Var<T>>);                                      \
  template Var<T> gather_rows(Var<T>, std::span<const int>);                                 \
  template Var<T> permute_rows(Var<T>, std::span<const int>);                                \
  template Var<T> sum(Var<T>);                                                               \
  template Var<T> mean(Var<T>);                                                              \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                     \
  template Var<T> attention(Var<T>, Var<T>, Var<T>, int, bool, std::span<const std::uint8_t>); \
  template Var<T> im2col3x3(Var<T>, int, int);                                               \
  template Var<T> sum_log_prob(Var<T>, std::span<const int>);                                \
  template Var<T> bce_with_logits(Var<T>, const Matrix<T>&, const Matrix<T>&);               \
  template Var<T> dice_loss(Var<T>, const Matrix<T>&);                                       \
  template Matrix<T> softmax_rows(const Matrix<T>&);                                         \
  template Matrix<T> log_softmax_rows(const Matrix<T>&);

REFER_INSTANTIATE_OPS(float)
REFER_INSTANTIATE_OPS(double)

}  // namespace refer::nn
