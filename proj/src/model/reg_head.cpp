#include "refer/model/reg_head.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <string>

#include "refer/errors.hpp"

namespace refer::model {

namespace {

template <typename T>
Matrix<T> plain_norm(const Matrix<T>& x, const nn::LayerNorm<T>& n) {
  Matrix<T> y(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T mu = x.row(r).mean();
    T var = (x.row(r).array() - mu).square().mean();
    T is = T(1) / std::sqrt(var + T(1e-5));
    y.row(r) = ((x.row(r).array() - mu) * is) * n.gain->value.row(0).array() + n.bias->value.row(0).array();
  }
  return y;
}

template <typename T>
Matrix<T> plain_linear(const Matrix<T>& x, const nn::Linear<T>& l) {
  Matrix<T> y = x * l.w->value;
  if (l.b) y.rowwise() += l.b->value.row(0);
  return y;
}

template <typename T>
Matrix<T> plain_gelu(const Matrix<T>& x) {
  const T c = T(0.7978845608028654), k = T(0.044715);
  return x.unaryExpr([c, k](T v) { return T(0.5) * v * (T(1) + std::tanh(c * (v + k * v * v * v))); });
}

/// One query row against all keys.
template <typename T>
Matrix<T> plain_attention(const Matrix<T>& q, const Matrix<T>& k, const Matrix<T>& v, int heads) {
  const Eigen::Index c = q.cols(), d = c / heads;
  const T s = T(1) / std::sqrt(T(d));
  Matrix<T> out(1, c);
  for (int h = 0; h < heads; ++h) {
    Matrix<T> sc = (q.middleCols(h * d, d) * k.middleCols(h * d, d).transpose()) * s;
    T mx = sc.maxCoeff();
    sc = (sc.array() - mx).exp().matrix();
    sc /= sc.sum();
    out.middleCols(h * d, d).noalias() = sc * v.middleCols(h * d, d);
  }
  return out;
}

template <typename T>
void append_row(Matrix<T>& m, const Matrix<T>& row) {
  m.conservativeResize(m.rows() + 1, row.cols());
  m.row(m.rows() - 1) = row.row(0);
}

}  // namespace

template <typename T>
struct RegHead<T>::Cache {
  std::vector<Matrix<T>> mem_k, mem_v, self_k, self_v;
  int position = 0;
};

template <typename T>
RegHead<T>::RegHead(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng, int pad_id,
                    int begin_id, int end_id)
    : cfg_(cfg), pad_(pad_id), begin_(begin_id), end_(end_id) {
  i_pos_ = &store.add("reg.indicator_pos", 1, cfg.dim, nn::Init::normal, rng, 1.0);
  i_neg_ = &store.add("reg.indicator_neg", 1, cfg.dim, nn::Init::normal, rng, 1.0);
  embed_ = &store.add("reg.embed", cfg.vocab_size, cfg.dim, nn::Init::normal, rng, 1.0);
  position_ = &store.add("reg.position", cfg.max_len, cfg.dim, nn::Init::normal, rng, 0.5);
  for (int i = 0; i < cfg.reg_layers; ++i)
    layers_.emplace_back(store, "reg.dec" + std::to_string(i), cfg.dim, cfg.heads, cfg.hidden(), rng);
  norm_ = nn::LayerNorm<T>(store, "reg.norm", cfg.dim, rng);
  out_ = nn::Linear<T>(store, "reg.out", cfg.dim, cfg.vocab_size, rng);
}

template <typename T>
Matrix<T> RegHead<T>::build_indicator(int n, int k) const {
  if (n < 1 || k < 0 || k >= n) throw ContractViolation("indicator slot " + std::to_string(k) + " out of range");
  Matrix<T> m(n, cfg_.dim);
  for (int i = 0; i < n; ++i) m.row(i) = (i == k ? i_pos_ : i_neg_)->value.row(0);
  return m;
}

template <typename T>
Var<T> RegHead<T>::indicator(nn::Tape<T>& t, int n, int k) const {
  if (n < 1 || k < 0 || k >= n) throw ContractViolation("indicator slot " + std::to_string(k) + " out of range");
  std::vector<Var<T>> pair{t.param(*i_neg_), t.param(*i_pos_)};
  Var<T> table = nn::concat_rows(std::span<const Var<T>>(pair));
  std::vector<int> ids(std::size_t(n), 0);
  ids[std::size_t(k)] = 1;
  return nn::gather_rows(table, std::span<const int>(ids));
}

template <typename T>
Var<T> RegHead<T>::indicate(nn::Tape<T>& t, Var<T> proposals, int k) const {
  return nn::add(proposals, indicator(t, int(proposals.rows()), k));
}

template <typename T>
Var<T> RegHead<T>::logits(nn::Tape<T>& t, std::span<const int> tokens, Var<T> indicated) const {
  const int len = int(tokens.size());
  if (len < 1 || len > cfg_.max_len) throw ContractViolation("token sequence length out of range");
  for (int id : tokens)
    if (id < 0 || id >= cfg_.vocab_size) throw InputError("unknown token id " + std::to_string(id));
  std::vector<int> pos(static_cast<std::size_t>(len));
  for (int i = 0; i < len; ++i) pos[std::size_t(i)] = i;
  Var<T> x = nn::add(nn::gather_rows(t.param(*embed_), tokens),
                     nn::gather_rows(t.param(*position_), std::span<const int>(pos)));
  for (const auto& layer : layers_) x = layer(t, x, indicated, true);
  return out_(t, norm_(t, x));
}

template <typename T>
Var<T> RegHead<T>::generation_loss(nn::Tape<T>& t, std::span<const int> tokens, Var<T> proposals, int k,
                                   T weight) const {
  if (tokens.size() < 2) throw ContractViolation("generation_loss needs at least two tokens");
  Var<T> ind = indicate(t, proposals, k);
  Var<T> lg = logits(t, tokens.first(tokens.size() - 1), ind);
  return nn::scale(nn::sum_log_prob(lg, tokens.subspan(1)), -weight);
}

template <typename T>
Var<T> RegHead<T>::policy_log_prob(nn::Tape<T>& t, std::span<const int> tokens, Var<T> indicated) const {
  if (tokens.size() < 2) throw ContractViolation("policy_log_prob needs at least two tokens");
  Var<T> lg = logits(t, tokens.first(tokens.size() - 1), indicated);
  Matrix<T> mask = Matrix<T>::Zero(lg.rows(), lg.cols());
  mask.col(pad_).setConstant(-std::numeric_limits<T>::infinity());
  mask.col(begin_).setConstant(-std::numeric_limits<T>::infinity());
  return nn::sum_log_prob(nn::add(lg, t.constant(std::move(mask))), tokens.subspan(1));
}

template <typename T>
void RegHead<T>::prepare(const Matrix<T>& indicated, Cache& c) const {
  if (indicated.cols() != cfg_.dim) throw ContractViolation("indicated features have the wrong width");
  c.mem_k.clear();
  c.mem_v.clear();
  c.self_k.assign(layers_.size(), Matrix<T>(0, cfg_.dim));
  c.self_v.assign(layers_.size(), Matrix<T>(0, cfg_.dim));
  for (const auto& l : layers_) {
    c.mem_k.push_back(plain_linear(indicated, l.cross_attn.k));
    c.mem_v.push_back(plain_linear(indicated, l.cross_attn.v));
  }
  c.position = 0;
}

template <typename T>
Matrix<T> RegHead<T>::step(Cache& c, int token) const {
  if (c.position >= cfg_.max_len) throw ContractViolation("prefix longer than the maximum length");
  if (token < 0 || token >= cfg_.vocab_size) throw InputError("unknown token id " + std::to_string(token));
  Matrix<T> x = embed_->value.row(token) + position_->value.row(c.position);
  ++c.position;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    Matrix<T> h = plain_norm(x, l.n1);
    append_row(c.self_k[i], plain_linear(h, l.self_attn.k));
    append_row(c.self_v[i], plain_linear(h, l.self_attn.v));
    x += plain_linear(plain_attention(plain_linear(h, l.self_attn.q), c.self_k[i], c.self_v[i], l.self_attn.heads),
                      l.self_attn.o);
    h = plain_norm(x, l.n2);
    x += plain_linear(plain_attention(plain_linear(h, l.cross_attn.q), c.mem_k[i], c.mem_v[i], l.cross_attn.heads),
                      l.cross_attn.o);
    x += plain_linear(plain_gelu(plain_linear(plain_norm(x, l.n3), l.ffn.up)), l.ffn.down);
  }
  return plain_linear(plain_norm(x, norm_), out_);
}

template <typename T>
Matrix<T> RegHead<T>::next_token_logits(std::span<const int> prefix, const Matrix<T>& indicated) const {
  if (prefix.empty() || prefix[0] != begin_) throw ContractViolation("prefix must start with the begin marker");
  if (int(prefix.size()) > cfg_.max_len) throw ContractViolation("prefix longer than the maximum length");
  Cache c;
  prepare(indicated, c);
  Matrix<T> lg;
  for (int tok : prefix) lg = step(c, tok);
  return lg;
}

template <typename T>
Matrix<T> RegHead<T>::policy_log_softmax(const Matrix<T>& logits) const {
  Matrix<T> l = logits;
  l(0, pad_) = -std::numeric_limits<T>::infinity();
  l(0, begin_) = -std::numeric_limits<T>::infinity();
  return nn::log_softmax_rows(l);
}

template <typename T>
std::vector<BeamHypothesis> RegHead<T>::decode_beam(const Matrix<T>& indicated, int beam_width, int max_len) const {
  if (beam_width < 1) throw ContractViolation("beam_width must be >= 1");
  max_len = std::clamp(max_len, 1, max_generated());
  struct Live {
    BeamHypothesis hyp;
    Cache cache;
    Matrix<T> logp;  // policy log-probs of the next token
  };
  Cache root;
  prepare(indicated, root);
  Live start{BeamHypothesis{{begin_}, 0.0, false}, root, {}};
  start.logp = policy_log_softmax(step(start.cache, begin_));
  std::vector<Live> alive;
  alive.push_back(std::move(start));
  std::vector<BeamHypothesis> finished;

  for (int len = 1; len <= max_len && !alive.empty(); ++len) {
    struct Cand {
      int from;
      int token;
      double score;
    };
    std::vector<Cand> cands;
    for (int a = 0; a < int(alive.size()); ++a)
      for (int v = 0; v < cfg_.vocab_size; ++v) {
        if (v == pad_ || v == begin_) continue;
        cands.push_back({a, v, alive[std::size_t(a)].hyp.log_prob + double(alive[std::size_t(a)].logp(0, v))});
      }
    // All candidates have the same length here, so raw and normalized
    // orderings agree.
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& x, const Cand& y) { return x.score > y.score; });
    if (int(cands.size()) > beam_width) cands.resize(std::size_t(beam_width));
    std::vector<Live> next;
    for (const auto& c : cands) {
      const Live& src = alive[std::size_t(c.from)];
      BeamHypothesis h = src.hyp;
      h.tokens.push_back(c.token);
      h.log_prob = c.score;
      if (c.token == end_ || len == max_len) {
        h.finished = true;
        finished.push_back(std::move(h));
        continue;
      }
      Live l{std::move(h), src.cache, {}};
      l.logp = policy_log_softmax(step(l.cache, c.token));
      next.push_back(std::move(l));
    }
    alive = std::move(next);
  }

  std::stable_sort(finished.begin(), finished.end(),
                   [](const BeamHypothesis& a, const BeamHypothesis& b) { return a.normalized() > b.normalized(); });
  std::vector<BeamHypothesis> out;
  std::set<std::vector<int>> seen;
  for (auto& h : finished) {
    if (int(out.size()) >= beam_width) break;
    if (seen.insert(h.tokens).second) out.push_back(std::move(h));
  }
  return out;
}

template <typename T>
BeamHypothesis RegHead<T>::greedy(const Matrix<T>& indicated, int max_len) const {
  max_len = std::clamp(max_len, 1, max_generated());
  Cache c;
  prepare(indicated, c);
  BeamHypothesis h{{begin_}, 0.0, false};
  Matrix<T> lp = policy_log_softmax(step(c, begin_));
  for (int len = 1; len <= max_len; ++len) {
    Eigen::Index best;
    lp.row(0).maxCoeff(&best);
    h.tokens.push_back(int(best));
    h.log_prob += double(lp(0, best));
    if (int(best) == end_ || len == max_len) break;
    lp = policy_log_softmax(step(c, int(best)));
  }
  h.finished = true;
  return h;
}

template <typename T>
BeamHypothesis RegHead<T>::sample(const Matrix<T>& indicated, int max_len, std::mt19937_64& rng) const {
  max_len = std::clamp(max_len, 1, max_generated());
  Cache c;
  prepare(indicated, c);
  BeamHypothesis h{{begin_}, 0.0, false};
  Matrix<T> lp = policy_log_softmax(step(c, begin_));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int len = 1; len <= max_len; ++len) {
    // Inverse-CDF draw; the last generable token absorbs rounding slack.
    double r = u(rng), acc = 0.0;
    int pick = -1, last = -1;
    for (int v = 0; v < cfg_.vocab_size; ++v) {
      if (v == pad_ || v == begin_) continue;
      last = v;
      acc += std::exp(double(lp(0, v)));
      if (r < acc) {
        pick = v;
        break;
      }
    }
    if (pick < 0) pick = last;
    h.tokens.push_back(pick);
    h.log_prob += double(lp(0, pick));
    if (pick == end_ || len == max_len) break;
    lp = policy_log_softmax(step(c, pick));
  }
  h.finished = true;
  return h;
}

template class RegHead<float>;
template class RegHead<double>;

}  // namespace refer::model
