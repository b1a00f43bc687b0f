#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <random>
#include <vector>

#include "doctest.h"
#include "../common/gradcheck.hpp"
#include "refer/errors.hpp"
#include "refer/mutual/pseudo.hpp"
#include "refer/mutual/rewards.hpp"
#include "refer/world/dataset.hpp"
#include "test_scenes.hpp"

using namespace refer;
using namespace refer::mutual;
using nn::Tape;
using nn::Var;

TEST_CASE("unambiguity reward values") {
  RewardConfig cfg;
  CHECK(cfg.alpha == 4.0);
  CHECK(cfg.tau == 2.5);
  std::vector<double> equal{0.3, 0.3, 0.3, 0.3};
  for (int k = 0; k < 4; ++k) CHECK(unambiguity_reward(equal, k, cfg) == doctest::Approx(0.25).epsilon(1e-12));
  std::vector<double> two{2.5, 0.0};
  const double e = std::exp(1.0);
  CHECK(std::abs(unambiguity_reward(two, 0, cfg) - e / (e + 1)) < 1e-12);
  CHECK(combined_reward(equal, 2, 0.0, cfg) == doctest::Approx(1.0).epsilon(1e-12));
  RewardConfig zero = cfg;
  zero.alpha = 0;
  CHECK(combined_reward(two, 1, 3.25, zero) == 3.25);
  CHECK_THROWS_AS(unambiguity_reward(two, 2, cfg), ContractViolation);
  CHECK_THROWS_AS(combined_reward(two, 0, -0.1, cfg), ContractViolation);

  RewardConfig sm = cfg, sm1 = cfg, sg = cfg;
  sm.variant = RewardVariant::softmax;
  sm1.tau = 1.0;
  sg.variant = RewardVariant::sigmoid;
  std::vector<double> s{0.5, -1.0, 2.0};
  for (int k = 0; k < 3; ++k) {
    CHECK(unambiguity_reward(s, k, sm) == unambiguity_reward(s, k, sm1));
    CHECK(unambiguity_reward(s, k, sg) == doctest::Approx(1 / (1 + std::exp(-s[std::size_t(k)]))));
  }
}

TEST_CASE("softmax rewards normalise and are shift invariant") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 3.0);
  for (auto variant : {RewardVariant::softmax_tau, RewardVariant::softmax}) {
    RewardConfig cfg;
    cfg.variant = variant;
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<double> s(1 + rng() % 16);
      for (double& x : s) x = n(rng);
      std::vector<double> shifted = s;
      const double c = n(rng) * 10;
      for (double& x : shifted) x += c;
      double total = 0;
      for (int k = 0; k < int(s.size()); ++k) {
        double r = unambiguity_reward(s, k, cfg);
        CHECK(r > 0.0);
        CHECK(r <= 1.0);
        CHECK(std::abs(r - unambiguity_reward(shifted, k, cfg)) < 1e-12);
        total += r;
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
  std::vector<double> huge{1000.0, -1000.0};
  CHECK(std::isfinite(unambiguity_reward(huge, 1, RewardConfig{})));
}

TEST_CASE("reward config json") {
  RewardConfig c;
  c.variant = RewardVariant::sigmoid;
  c.q1 = 7;
  auto back = RewardConfig::from_json(c.to_json());
  CHECK(back.q1 == 7);
  CHECK(back.variant == RewardVariant::sigmoid);
  CHECK_THROWS_AS(RewardConfig::from_json({{"tau", 0.0}}), ConfigError);
  CHECK_THROWS_AS(RewardConfig::from_json({{"beta", 1.0}}), ConfigError);
  CHECK_THROWS_AS(RewardConfig::from_json({{"variant", "cosine"}}), ConfigError);
}

namespace {

struct MicroPolicy {
  model::ModelConfig cfg = testing::micro_config();
  nn::ParameterStore<double> store;
  model::RegHead<double> reg;
  nn::Matrix<double> proposals;

  explicit MicroPolicy(std::uint64_t seed, int vocab = 6) {
    cfg.vocab_size = vocab;
    std::mt19937_64 rng(seed);
    reg = model::RegHead<double>(store, cfg, rng);
    std::normal_distribution<double> n(0, 1);
    proposals.resize(cfg.queries, cfg.dim);
    for (Eigen::Index i = 0; i < proposals.size(); ++i) proposals.data()[i] = n(rng);
    // Sharpen the output layer so the policy is far from uniform.
    for (auto& p : store)
      if (p.name == "reg.out.w") p.value *= 4.0;
  }

  Var<double> indicated(Tape<double>& t) const { return reg.indicate(t, t.constant(proposals), 1); }
};

}  // namespace

TEST_CASE("policy gradient surrogate") {
  MicroPolicy m(3);
  std::mt19937_64 rng(4);
  Tape<double> t0(false);
  const auto ind0 = m.indicated(t0).value();
  std::vector<RewardSample> samples(4);
  for (auto& s : samples) s.tokens = m.reg.sample(ind0, 3, rng).tokens;

  auto surrogate = [&](std::vector<RewardSample> ss, Tape<double>& t) {
    apply_baseline(ss);
    Var<double> ind = m.indicated(t);
    std::vector<Var<double>> lps;
    for (const auto& s : ss) lps.push_back(m.reg.policy_log_prob(t, s.tokens, ind));
    return policy_gradient_loss<double>(lps, ss);
  };

  SUBCASE("equal rewards give exactly zero gradient") {
    for (auto& s : samples) s.reward = 2.5;
    m.store.zero_grad();
    Tape<double> t;
    auto l = surrogate(samples, t);
    t.backward(l);
    CHECK(l.item() == 0.0);
    for (auto& p : m.store) CHECK((p.grad.size() == 0 || p.grad.norm() == 0.0));
  }
  SUBCASE("doubling rewards doubles advantages and the surrogate") {
    double r = 0.5;
    for (auto& s : samples) s.reward = (r += 0.7);
    auto doubled = samples;
    for (auto& s : doubled) s.reward *= 2;
    apply_baseline(samples);
    apply_baseline(doubled);
    for (std::size_t j = 0; j < samples.size(); ++j) CHECK(doubled[j].advantage == 2 * samples[j].advantage);
    Tape<double> t(false);
    CHECK(surrogate(doubled, t).item() == doctest::Approx(2 * surrogate(samples, t).item()).epsilon(1e-12));
  }
  SUBCASE("contract") {
    Tape<double> t(false);
    std::vector<Var<double>> none;
    CHECK_THROWS_AS(policy_gradient_loss<double>(none, std::vector<RewardSample>{}), ContractViolation);
    Var<double> ind = m.indicated(t);
    std::vector<Var<double>> one{m.reg.policy_log_prob(t, samples[0].tokens, ind)};
    CHECK_THROWS_AS(policy_gradient_loss<double>(one, samples), ContractViolation);
  }
}

TEST_CASE("sequence enumeration") {
  auto seqs = enumerate_sequences(6, 3);
  CHECK(seqs.size() == 1 + 3 + 9 + 27);
  for (const auto& s : seqs) {
    CHECK(s.front() == 1);
    CHECK(s.size() >= 2);
    CHECK(s.size() <= 4);
    for (std::size_t i = 1; i + 1 < s.size(); ++i) CHECK(s[i] >= 3);
  }
  CHECK_THROWS_AS(enumerate_sequences(25, 11), ContractViolation);
  CHECK_NOTHROW(enumerate_sequences(12, 5));  // 10^5 exactly
}

TEST_CASE("exact expected reward") {
  MicroPolicy m(8);
  SUBCASE("probabilities sum to one") {
    Tape<double> t(false);
    auto e = exact_expected_reward<double>(t, m.reg, m.indicated(t), 3, [](const std::vector<int>&) { return 1.0; });
    CHECK(e.sequences == 40);
    CHECK(std::abs(e.probability_mass - 1.0) < 1e-9);
    CHECK(std::abs(e.value.item() - 1.0) < 1e-9);
  }
  SUBCASE("constant reward has zero gradient") {
    auto g = exact_expected_reward_grad<double>(
        m.store, m.reg, [&](Tape<double>& t) { return m.indicated(t); }, 3,
        [](const std::vector<int>&) { return 3.0; });
    double norm = 0, scale = 0;
    for (const auto& x : g) norm += x.squaredNorm();
    auto g2 = exact_expected_reward_grad<double>(
        m.store, m.reg, [&](Tape<double>& t) { return m.indicated(t); }, 3,
        [](const std::vector<int>& y) { return double(y.size()); });
    for (const auto& x : g2) scale += x.squaredNorm();
    CHECK(std::sqrt(norm) < 1e-12 * std::max(1.0, std::sqrt(scale)) + 1e-12);
    CHECK(scale > 0);
  }
  SUBCASE("two outcomes by hand") {
    MicroPolicy two(5, 4);  // generable: end marker and one word
    const double r0 = 0.3, r1 = 1.7;
    auto reward = [&](const std::vector<int>& y) { return y.back() == 2 ? r0 : r1; };
    auto g = exact_expected_reward_grad<double>(
        two.store, two.reg, [&](Tape<double>& t) { return two.indicated(t); }, 1, reward);
    Tape<double> t(false);
    auto logits = two.reg.next_token_logits(std::vector<int>{1}, two.indicated(t).value());
    const double p0 = 1 / (1 + std::exp(logits(0, 3) - logits(0, 2)));
    const double p1 = 1 - p0;
    std::size_t i = 0;
    for (auto& p : two.store) {
      if (p.name == "reg.out.b") {
        CHECK(g[i](0, 0) == 0.0);
        CHECK(g[i](0, 1) == 0.0);
        CHECK(g[i](0, 2) == doctest::Approx(p0 * p1 * (r0 - r1)).epsilon(1e-9));
        CHECK(g[i](0, 3) == doctest::Approx(p0 * p1 * (r1 - r0)).epsilon(1e-9));
      }
      ++i;
    }
  }
}

TEST_CASE("area filter") {
  PseudoConfig cfg;
  cfg.min_area = 1024;
  std::vector<Instance> in{{0, 0, 900}, {0, 1, 2000}, {1, 0, 1024}, {1, 1, 50}, {2, 0, 4000}};
  auto kept = area_filter(in, cfg);
  CHECK(kept.size() == 3);
  for (const auto& i : kept) CHECK(i.area >= 1024);
  CHECK(std::none_of(kept.begin(), kept.end(), [](const Instance& i) { return i.area == 900; }));

  cfg.filter_mode = FilterMode::none;
  auto all = area_filter(in, cfg);
  REQUIRE(all.size() == in.size());
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(all[i].area == in[i].area);

  cfg.filter_mode = FilterMode::random;
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Instance> many;
    for (int j = 0; j < 40; ++j) many.push_back({j, 0, long(rng() % 3000)});
    cfg.seed = std::uint64_t(trial);
    auto area_cfg = cfg;
    area_cfg.filter_mode = FilterMode::area;
    auto r1 = area_filter(many, cfg), r2 = area_filter(many, cfg);
    CHECK(r1.size() == area_filter(many, area_cfg).size());
    REQUIRE(r1.size() == r2.size());
    for (std::size_t j = 0; j < r1.size(); ++j) CHECK(r1[j].scene == r2[j].scene);
  }
}

TEST_CASE("pseudo config json") {
  PseudoConfig c;
  CHECK(c.q2 == 3);
  CHECK(c.pseudo_weight == 0.1);
  auto back = PseudoConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK_THROWS_AS(PseudoConfig::from_json({{"pseudo_weight", 0.0}}), ConfigError);
  CHECK_THROWS_AS(PseudoConfig::from_json({{"min_area", -1}}), ConfigError);
  CHECK_THROWS_AS(PseudoConfig::from_json({{"filter_mode", "size"}}), ConfigError);
}

namespace {

world::Scene tiny_scene(const std::string& id, bool annotated) {
  using namespace world;
  auto s = testing::make_scene({testing::make_object(0, Shape::square, Color::red, SizeClass::large, {1, 1, 7, 7}, 16, 16),
                                testing::make_object(1, Shape::circle, Color::blue, SizeClass::small, {10, 10, 13, 13}, 16, 16)},
                               16, 16);
  s.id = id;
  s.annotated = annotated;
  if (annotated) {
    Expression e;
    e.object_id = 0;
    e.tokens = {1, 3, 2};
    s.expressions.push_back(e);
  }
  return s;
}

}  // namespace

TEST_CASE("pseudo generation") {
  model::Model<double> m(testing::micro_config(), 2);
  std::vector<world::Scene> scenes{tiny_scene("a", true), tiny_scene("b", false), tiny_scene("c", false)};
  PseudoConfig cfg;
  cfg.filter_mode = FilterMode::none;
  auto r = generate_pseudo<double>(scenes, m, cfg);
  CHECK(r.report.candidates == 4);
  CHECK(r.report.retained == 4);
  CHECK(r.report.expressions == long(r.items.size()));
  std::map<std::pair<int, int>, std::set<std::vector<int>>> per;
  for (const auto& it : r.items) {
    CHECK(it.scene != 0);
    CHECK(it.expression.weight == 0.1);
    CHECK(it.expression.provenance == world::Provenance::pseudo);
    CHECK(it.expression.tokens.front() == 1);
    per[{it.scene, it.expression.object_id}].insert(it.expression.tokens);
  }
  CHECK(per.size() == 4);
  for (const auto& [key, set] : per) CHECK(set.size() <= 3);
  std::size_t distinct = 0;
  for (const auto& [key, set] : per) distinct += set.size();
  CHECK(distinct == r.items.size());

  auto again = generate_pseudo<double>(scenes, m, cfg);
  REQUIRE(again.items.size() == r.items.size());
  for (std::size_t i = 0; i < r.items.size(); ++i) CHECK(again.items[i].expression.tokens == r.items[i].expression.tokens);

  cfg.filter_mode = FilterMode::area;
  cfg.min_area = 20;
  auto big = generate_pseudo<double>(scenes, m, cfg);
  CHECK(big.report.retained == 2);
  for (const auto& it : big.items) CHECK(it.expression.object_id == 0);
}

TEST_CASE("merge datasets") {
  std::vector<world::Scene> real{tiny_scene("a", true), tiny_scene("b", false)};
  auto same = merge_datasets(real, {});
  CHECK(same.added == 0);
  CHECK(world::serialize_dataset(same.scenes) == world::serialize_dataset(real));

  world::Expression e;
  e.object_id = 1;
  e.tokens = {1, 4, 2};
  e.weight = 0.1;
  e.provenance = world::Provenance::pseudo;
  std::vector<PseudoItem> pseudo{{1, "b", e}, {0, "a", e}};
  auto merged = merge_datasets(real, pseudo);
  CHECK(merged.added == 2);
  CHECK(world::count_expressions(merged.scenes) == world::count_expressions(real) + 2);
  for (const auto& s : merged.scenes)
    for (const auto& x : s.expressions)
      CHECK(x.weight == (x.provenance == world::Provenance::pseudo ? 0.1 : 1.0));

  // A pseudo copy of a real expression is dropped.
  auto dup = pseudo[1];
  dup.expression.object_id = 0;
  dup.expression.tokens = {1, 3, 2};
  std::vector<PseudoItem> with_dup{dup};
  auto d = merge_datasets(real, with_dup);
  CHECK(d.dropped == 1);
  CHECK(d.added == 0);
  std::vector<PseudoItem> unknown{{0, "zz", e}};
  CHECK_THROWS_AS(merge_datasets(real, unknown), InputError);
}
