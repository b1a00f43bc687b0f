#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "../common/gradcheck.hpp"
#include "refer/nn/optim.hpp"

using namespace refer;
using refer::nn::Matrix;
using refer::nn::Tape;
using refer::nn::Var;

namespace {

Matrix<double> random_matrix(int r, int c, std::mt19937_64& rng, double s = 1.0) {
  std::normal_distribution<double> n(0.0, s);
  Matrix<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

/// Projects an op's output onto fixed random weights so every output
/// element contributes to the scalar.
Var<double> project(Tape<double>& t, Var<double> y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return nn::sum(nn::mul(y, t.constant(random_matrix(int(y.rows()), int(y.cols()), rng))));
}

struct Fixture {
  std::mt19937_64 rng{11};
  nn::ParameterStore<double> store;
  nn::Parameter<double>& a = store.add("a", 4, 6, nn::Init::xavier, rng);
  nn::Parameter<double>& b = store.add("b", 6, 6, nn::Init::xavier, rng);
  nn::Parameter<double>& c = store.add("c", 4, 6, nn::Init::xavier, rng);
  nn::Parameter<double>& row = store.add("row", 1, 6, nn::Init::xavier, rng);
};

}  // namespace

TEST_CASE("elementwise and linear ops match finite differences") {
  Fixture f;
  auto r = testing::grad_check(f.store, [&](Tape<double>& t) {
    Var<double> a = t.param(f.a), b = t.param(f.b), c = t.param(f.c), row = t.param(f.row);
    Var<double> y = nn::matmul(a, b);
    y = nn::add(y, nn::scale(c, 0.7));
    y = nn::sub(y, nn::mul(a, c));
    y = nn::add_row(y, row);
    y = nn::add(nn::gelu(y), nn::sigmoid(nn::matmul_nt(c, b)));
    y = nn::add(y, nn::transpose(nn::matmul_nt(b, a)));
    y = nn::add(y, nn::exp(nn::scale(a, 0.3)));
    return nn::add(project(t, y, 1), nn::mean(nn::mul(y, y)));
  });
  CHECK(r.max_rel < 1e-6);
  INFO(r.worst);
}

TEST_CASE("shape ops match finite differences") {
  Fixture f;
  auto r = testing::grad_check(f.store, [&](Tape<double>& t) {
    Var<double> a = t.param(f.a), c = t.param(f.c);
    std::vector<Var<double>> parts{nn::slice_rows(a, 1, 2), c, t.param(f.row)};
    Var<double> y = nn::concat_rows(std::span<const Var<double>>(parts));
    std::vector<int> ids{0, 3, 3, 6, 2};
    std::vector<int> perm{6, 5, 4, 3, 2, 1, 0};
    Var<double> g = nn::gather_rows(y, std::span<const int>(ids));
    Var<double> p = nn::permute_rows(y, std::span<const int>(perm));
    return nn::add(project(t, g, 2), project(t, p, 3));
  });
  CHECK(r.max_rel < 1e-6);
  INFO(r.worst);
}

TEST_CASE("layer norm, attention and im2col match finite differences") {
  std::mt19937_64 rng(5);
  nn::ParameterStore<double> store;
  auto& x = store.add("x", 9, 8, nn::Init::xavier, rng);
  auto& kv = store.add("kv", 5, 8, nn::Init::xavier, rng);
  auto& g = store.add("g", 1, 8, nn::Init::normal, rng, 1.0);
  auto& b = store.add("b", 1, 8, nn::Init::normal, rng, 1.0);
  x.value *= 3.0;
  kv.value *= 3.0;
  std::vector<std::uint8_t> valid{1, 0, 1, 1, 0};
  auto r = testing::grad_check(store, [&](Tape<double>& t) {
    Var<double> xv = t.param(x), kvv = t.param(kv);
    Var<double> n = nn::layer_norm(xv, t.param(g), t.param(b));
    Var<double> self = nn::attention(n, n, xv, 2, true);
    Var<double> cross = nn::attention(xv, kvv, nn::scale(kvv, -1.5), 4, false, valid);
    Var<double> conv = nn::im2col3x3(n, 3, 3);
    return nn::add(nn::add(project(t, self, 4), project(t, cross, 5)), project(t, conv, 6));
  });
  CHECK(r.max_rel < 1e-5);
  INFO(r.worst);
}

TEST_CASE("loss ops match finite differences and reference values") {
  std::mt19937_64 rng(8);
  nn::ParameterStore<double> store;
  auto& z = store.add("z", 3, 5, nn::Init::xavier, rng);
  z.value *= 4.0;
  Matrix<double> tg(1, 5);
  tg << 1, 0, 1, 1, 0;
  Matrix<double> w(1, 5);
  w << 0.5, 1, 2, 1, 0.1;
  std::vector<int> targets{4, 0, 2};
  auto r = testing::grad_check(store, [&](Tape<double>& t) {
    Var<double> zz = t.param(z);
    Var<double> row = nn::slice_rows(zz, 1, 1);
    Var<double> l = nn::add(nn::sum_log_prob(zz, std::span<const int>(targets)), nn::bce_with_logits(row, tg, w));
    return nn::add(l, nn::dice_loss(row, tg));
  });
  CHECK(r.max_rel < 1e-6);
  INFO(r.worst);

  // Values against direct formulas.
  Tape<double> t;
  Var<double> zz = t.param(z);
  double slp = nn::sum_log_prob(zz, std::span<const int>(targets)).item();
  double ref = 0;
  for (int i = 0; i < 3; ++i) {
    double lse = std::log(z.value.row(i).array().exp().sum());
    ref += z.value(i, targets[std::size_t(i)]) - lse;
  }
  CHECK(slp == doctest::Approx(ref).epsilon(1e-12));
  Var<double> row = nn::slice_rows(zz, 1, 1);
  double bce = nn::bce_with_logits(row, tg, w).item();
  double bref = 0, inter = 0, psum = 0;
  for (int j = 0; j < 5; ++j) {
    double p = 1 / (1 + std::exp(-z.value(1, j)));
    bref += w(0, j) * -(tg(0, j) * std::log(p) + (1 - tg(0, j)) * std::log(1 - p));
    inter += p * tg(0, j);
    psum += p;
  }
  CHECK(bce == doctest::Approx(bref).epsilon(1e-10));
  CHECK(nn::dice_loss(row, tg).item() == doctest::Approx(1 - (2 * inter + 1) / (psum + 3 + 1)).epsilon(1e-12));
}

TEST_CASE("attention masking") {
  Tape<double> t(false);
  std::mt19937_64 rng(3);
  Var<double> q = t.constant(random_matrix(3, 4, rng));
  Var<double> k = t.constant(random_matrix(3, 4, rng));
  Var<double> v = t.constant(random_matrix(3, 4, rng));
  SUBCASE("causal first row sees only the first key") {
    Var<double> o = nn::attention(q, k, v, 2, true);
    CHECK((o.value().row(0) - v.value().row(0)).norm() < 1e-12);
  }
  SUBCASE("fully masked keys give zero rows") {
    std::vector<std::uint8_t> none{0, 0, 0};
    Var<double> o = nn::attention(q, k, v, 1, false, none);
    CHECK(o.value().norm() == 0.0);
  }
  SUBCASE("masked key value changes do not matter") {
    std::vector<std::uint8_t> valid{1, 1, 0};
    Matrix<double> v2 = v.value();
    v2.row(2).setConstant(100.0);
    Var<double> o1 = nn::attention(q, k, v, 2, false, valid);
    Var<double> o2 = nn::attention(q, k, t.constant(v2), 2, false, valid);
    CHECK((o1.value() - o2.value()).norm() < 1e-12);
  }
}

TEST_CASE("frozen parameters receive no gradient") {
  std::mt19937_64 rng(1);
  nn::ParameterStore<double> store;
  auto& a = store.add("a", 2, 2, nn::Init::xavier, rng);
  auto& b = store.add("b", 2, 2, nn::Init::xavier, rng);
  b.frozen = true;
  Tape<double> t;
  t.backward(nn::sum(nn::matmul(t.param(a), t.param(b))));
  CHECK(a.grad.norm() > 0);
  CHECK(b.grad.norm() == 0);
}

TEST_CASE("adamw skips frozen parameters and applies decoupled decay") {
  std::mt19937_64 rng(2);
  nn::ParameterStore<float> store;
  auto& a = store.add("a", 3, 3, nn::Init::xavier, rng);
  auto& b = store.add("b", 3, 3, nn::Init::xavier, rng);
  b.frozen = true;
  Matrix<float> b0 = b.value;
  a.grad.setZero();
  Matrix<float> a0 = a.value;
  nn::AdamW<float> opt;
  opt.step(store, 0.1);
  // Zero gradient: only weight decay moves the weights.
  CHECK((a.value - a0 * float(1 - 0.1 * 0.05)).norm() < 1e-6f);
  CHECK(b.value == b0);

  a.grad.setConstant(1.0f);
  Matrix<float> a1 = a.value;
  opt.step(store, 0.01);
  CHECK(a.value(0, 0) < a1(0, 0));
}

TEST_CASE("learning-rate schedule decays at two thirds and eight ninths") {
  CHECK(nn::scheduled_lr(1.0, 0, 900, 0) == 1.0);
  CHECK(nn::scheduled_lr(1.0, 599, 900, 0) == 1.0);
  CHECK(nn::scheduled_lr(1.0, 600, 900, 0) == doctest::Approx(0.1));
  CHECK(nn::scheduled_lr(1.0, 800, 900, 0) == doctest::Approx(0.01));
  CHECK(nn::scheduled_lr(1.0, 0, 900, 10) == doctest::Approx(0.1));
}

TEST_CASE("parameter and optimizer state round trip") {
  std::mt19937_64 rng(4);
  nn::ParameterStore<float> s1, s2;
  s1.add("w", 3, 4, nn::Init::xavier, rng);
  s1.add("b", 1, 4, nn::Init::zeros, rng);
  s2.add("w", 3, 4, nn::Init::zeros, rng);
  s2.add("b", 1, 4, nn::Init::zeros, rng);
  for (auto& p : s1) p.grad.setConstant(0.5f);
  nn::AdamW<float> o1;
  o1.step(s1, 0.01);
  std::stringstream ss;
  nn::save_parameters(ss, s1);
  o1.save(ss);
  nn::AdamW<float> o2;
  nn::load_parameters(ss, s2);
  o2.load(ss, s2);
  auto it = s2.begin();
  for (const auto& p : s1) CHECK(p.value == (it++)->value);
  CHECK(o2.steps() == 1);

  nn::ParameterStore<float> s3;
  s3.add("other", 3, 4, nn::Init::zeros, rng);
  s3.add("b", 1, 4, nn::Init::zeros, rng);
  std::stringstream again;
  nn::save_parameters(again, s1);
  CHECK_THROWS_AS(nn::load_parameters(again, s3), FormatError);
}
