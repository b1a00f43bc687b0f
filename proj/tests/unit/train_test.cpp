#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "refer/errors.hpp"
#include "refer/train/checkpoint.hpp"
#include "refer/train/evaluate.hpp"
#include "refer/train/trainer.hpp"
#include "refer/world/dataset.hpp"

using namespace refer;
using train::TrainConfig;
using train::TrainState;

namespace {

// Tiny network over real 64x64 scenes: grid 4, width 16.
TrainConfig tiny_config() {
  TrainConfig c;
  c.model.patch = 16;
  c.model.dim = 16;
  c.model.queries = 8;
  c.model.heads = 2;
  c.model.pixel_layers = 1;
  c.model.query_layers = 1;
  c.model.text_layers = 1;
  c.model.reg_layers = 1;
  c.model.res_layers = 1;
  c.step1 = {1e-3, 6, 2, 1};
  c.step2 = {1e-3, 4, 2, 0};
  c.step3 = {1e-3, 4, 2, 0};
  c.reward.q1 = 3;
  c.beam_width = 2;
  c.log_interval = 1;
  c.seed = 5;
  c.validate();
  return c;
}

const std::vector<world::Scene>& tiny_data() {
  static const auto data = [] {
    world::GenerationParams p;
    p.max_objects = 4;
    return world::generate_dataset(20, p, 3);
  }();
  return data;
}

std::map<std::string, nn::Matrix<float>> snapshot(const model::Model<float>& m) {
  std::map<std::string, nn::Matrix<float>> out;
  for (const auto& p : m.store) out[p.name] = p.value;
  return out;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("refer_train_test_" + name);
}

TrainState step1_state() {
  static const auto path = [] {
    auto p = temp_path("step1.ckpt");
    train::save_checkpoint(p, train::train_step1(tiny_config(), tiny_data()));
    return p;
  }();
  return train::load_checkpoint(path);
}

}  // namespace

TEST_CASE("train config JSON round trip, canonical hash and unknown keys") {
  const auto c = tiny_config();
  const auto back = TrainConfig::from_json(nlohmann::json::parse(c.to_json().dump()));
  CHECK(back.to_json() == c.to_json());
  CHECK(back.hash() == c.hash());

  auto changed = c;
  changed.pseudo.filter_mode = mutual::FilterMode::random;
  CHECK(changed.hash() != c.hash());

  // Defaults fill missing keys.
  const auto d = TrainConfig::from_json(nlohmann::json::object());
  CHECK(d.step2.lr == doctest::Approx(1e-6));
  CHECK(d.reward.alpha == 4.0);
  CHECK(d.reward.tau == 2.5);
  CHECK(d.pseudo.pseudo_weight == doctest::Approx(0.1));

  auto j = c.to_json();
  j["lerning_rate"] = 1;
  CHECK_THROWS_AS(TrainConfig::from_json(j), ConfigError);
  auto k = c.to_json();
  k["step1"]["iterations"] = 0;
  CHECK_THROWS_AS(TrainConfig::from_json(k).validate(), ConfigError);
}

TEST_CASE("checkpoint round trip preserves weights, optimiser and RNG state") {
  auto cfg = tiny_config();
  train::RunOptions half;
  half.stop_after = 3;
  auto s = train::train_step1(cfg, tiny_data(), half);
  CHECK(s.iteration == 3);
  CHECK_FALSE(s.complete);
  s.rng.discard(17);
  const auto path = temp_path("roundtrip.ckpt");
  train::save_checkpoint(path, s);
  auto r = train::load_checkpoint(path);
  CHECK(r.weights_hash() == s.weights_hash());
  CHECK(r.step == 1);
  CHECK(r.iteration == 3);
  CHECK(r.complete == false);
  CHECK(r.config_hash == s.config_hash);
  CHECK(r.data_hash == s.data_hash);
  CHECK(r.rng() == s.rng());
  CHECK(r.config.to_json() == s.config.to_json());

  // Identical continuation implies the optimiser moments survived.
  auto a = train::resume(cfg, std::move(s), tiny_data());
  auto b = train::resume(cfg, std::move(r), tiny_data());
  CHECK(a.complete);
  CHECK(a.weights_hash() == b.weights_hash());

  CHECK_THROWS_AS(train::load_checkpoint(temp_path("does_not_exist.ckpt")), InputError);
  {
    std::ofstream bad(temp_path("garbage.ckpt"), std::ios::binary);
    bad << "NOTACHECKPOINT";
  }
  CHECK_THROWS_AS(train::load_checkpoint(temp_path("garbage.ckpt")), FormatError);
  {
    // Truncated after the header.
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::ofstream out(temp_path("truncated.ckpt"), std::ios::binary);
    out << bytes.substr(0, bytes.size() / 2);
  }
  CHECK_THROWS_AS(train::load_checkpoint(temp_path("truncated.ckpt")), FormatError);
}

TEST_CASE("interrupted and resumed step 1 is bit-identical to an uninterrupted run") {
  const auto cfg = tiny_config();
  const auto straight = train::train_step1(cfg, tiny_data());
  CHECK(straight.complete);
  CHECK(straight.iteration == cfg.step1.iterations);

  train::RunOptions stop;
  stop.stop_after = 2;
  const auto path = temp_path("resume1.ckpt");
  train::save_checkpoint(path, train::train_step1(cfg, tiny_data(), stop));
  auto mid = train::resume(cfg, train::load_checkpoint(path), tiny_data(), stop);  // 2 more
  CHECK(mid.iteration == 4);
  train::save_checkpoint(path, mid);
  const auto done = train::resume(cfg, train::load_checkpoint(path), tiny_data());
  CHECK(done.complete);
  CHECK(done.weights_hash() == straight.weights_hash());
}

TEST_CASE("interrupted step 2 with sampled candidates resumes bit-identically") {
  auto cfg = tiny_config();
  cfg.candidates = train::CandidateMode::sample;
  const auto straight = train::train_step2(cfg, step1_state(), tiny_data());
  train::RunOptions stop;
  stop.stop_after = 1;
  const auto path = temp_path("resume2.ckpt");
  train::save_checkpoint(path, train::train_step2(cfg, step1_state(), tiny_data(), stop));
  const auto done = train::resume(cfg, train::load_checkpoint(path), tiny_data());
  CHECK(done.complete);
  CHECK(done.weights_hash() == straight.weights_hash());
}

TEST_CASE("step 2 updates only generation-head parameters") {
  auto cfg = tiny_config();
  cfg.step2.lr = 1e-2;  // large enough that every trainable tensor moves
  auto from = step1_state();
  const auto before = snapshot(*from.model);
  const auto after_state = train::train_step2(cfg, std::move(from), tiny_data());
  const auto after = snapshot(*after_state.model);
  int reg_changed = 0, reg_total = 0;
  for (const auto& [name, value] : before) {
    const bool is_reg = name.rfind("reg.", 0) == 0;
    const bool same = (after.at(name).array() == value.array()).all();
    if (is_reg) {
      ++reg_total;
      reg_changed += !same;
    } else {
      INFO(name);
      CHECK(same);
    }
  }
  CHECK(reg_total > 0);
  CHECK(reg_changed > 0);
  // The freeze survives a checkpoint round trip.
  const auto path = temp_path("freeze.ckpt");
  train::save_checkpoint(path, after_state);
  const auto loaded = train::load_checkpoint(path);
  for (const auto& p : loaded.model->store) CHECK(p.frozen == (p.name.rfind("reg.", 0) != 0));
}

TEST_CASE("steps refuse checkpoints with the wrong step tag or model") {
  const auto cfg = tiny_config();
  // Step 2 from an incomplete step-1 state.
  train::RunOptions stop;
  stop.stop_after = 1;
  CHECK_THROWS_AS(train::train_step2(cfg, train::train_step1(cfg, tiny_data(), stop), tiny_data()),
                  ContractViolation);
  // Step 3 from step 1.
  CHECK_THROWS_AS(train::train_step3(cfg, step1_state(), tiny_data()), ContractViolation);
  // Step 2 from step 2.
  const auto s2 = train::train_step2(cfg, step1_state(), tiny_data());
  train::save_checkpoint(temp_path("tags.ckpt"), s2);
  CHECK_THROWS_AS(train::train_step2(cfg, train::load_checkpoint(temp_path("tags.ckpt")), tiny_data()),
                  ContractViolation);
  // A different network.
  auto other = cfg;
  other.model.dim = 32;
  CHECK_THROWS_AS(train::train_step2(other, step1_state(), tiny_data()), ConfigError);
  // Non-network settings may change between steps.
  auto relaxed = cfg;
  relaxed.pseudo.filter_mode = mutual::FilterMode::none;
  relaxed.step3.iterations = 1;
  const auto s3 = train::train_step3(relaxed, s2, tiny_data());
  CHECK(s3.step == 3);
  CHECK(s3.complete);
  CHECK(s3.config_hash == relaxed.hash());
}

TEST_CASE("resume refuses a different config or different data") {
  const auto cfg = tiny_config();
  train::RunOptions stop;
  stop.stop_after = 1;
  const auto path = temp_path("refuse.ckpt");
  train::save_checkpoint(path, train::train_step1(cfg, tiny_data(), stop));
  auto other = cfg;
  other.step1.lr = 2e-3;
  CHECK_THROWS_AS(train::resume(other, train::load_checkpoint(path), tiny_data()), ConfigError);
  auto data = tiny_data();
  data.front().expressions.pop_back();
  CHECK_THROWS_AS(train::resume(cfg, train::load_checkpoint(path), data), ConfigError);
}

TEST_CASE("a pseudo expression contributes its weight times a real one") {
  const auto cfg = tiny_config();
  const auto state = train::fresh_state(cfg, 1);
  world::Scene scene;
  for (const auto& s : tiny_data())
    if (s.split == world::Split::train && s.expressions.size() >= 2) {
      scene = s;
      break;
    }
  REQUIRE(scene.expressions.size() >= 2);
  auto pseudo = scene.expressions[1];
  scene.expressions.resize(1);

  auto losses = [&](const world::Scene& s, bool include_pseudo) {
    nn::Tape<float> t(false);
    auto sl = train::scene_loss(t, *state.model, cfg, s, include_pseudo);
    return std::pair{double(sl.reg.item()), double(sl.res.item())};
  };
  const auto base = losses(scene, true);

  auto with_real = scene;
  with_real.expressions.push_back(pseudo);
  const auto real = losses(with_real, true);

  auto with_pseudo = scene;
  pseudo.provenance = world::Provenance::pseudo;
  pseudo.weight = cfg.pseudo.pseudo_weight;
  with_pseudo.expressions.push_back(pseudo);
  const auto weighted = losses(with_pseudo, true);
  const auto excluded = losses(with_pseudo, false);

  CHECK(weighted.first - base.first == doctest::Approx(0.1 * (real.first - base.first)).epsilon(1e-4));
  CHECK(weighted.second - base.second == doctest::Approx(0.1 * (real.second - base.second)).epsilon(1e-4));
  CHECK(excluded.first == base.first);
  CHECK(excluded.second == base.second);
}

TEST_CASE("training log is JSON Lines with start, train, eval and end events") {
  const auto cfg = tiny_config();
  std::ostringstream log;
  train::RunOptions opts;
  opts.log = &log;
  const auto val = train::select_split(tiny_data(), world::Split::val);
  REQUIRE_FALSE(val.empty());
  opts.eval_scenes = val;
  opts.eval_interval = 3;
  train::train_step1(cfg, tiny_data(), opts);
  std::istringstream in(log.str());
  std::map<std::string, int> events;
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    events[j.at("event").get<std::string>()]++;
    if (j["event"] == "train") {
      CHECK(j.contains("loss"));
      CHECK(j.contains("lr"));
      CHECK(std::isfinite(j["loss"].get<double>()));
    }
    if (j["event"] == "eval") CHECK(j["report"].contains("miou"));
  }
  CHECK(events["start"] == 1);
  CHECK(events["train"] == 6);
  CHECK(events["eval"] == 2);
  CHECK(events["end"] == 1);
}
