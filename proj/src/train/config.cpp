#include "refer/train/config.hpp"

#include <fstream>

#include "refer/errors.hpp"
#include "refer/json_util.hpp"

namespace refer::train {

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

nlohmann::json StepBudget::to_json() const {
  return {{"lr", lr}, {"iterations", iterations}, {"batch", batch}, {"warmup", warmup}};
}

StepBudget StepBudget::from_json(const nlohmann::json& j, StepBudget d) {
  reject_unknown(j, {"lr", "iterations", "batch", "warmup"}, "step budget");
  d.lr = j.value("lr", d.lr);
  d.iterations = j.value("iterations", d.iterations);
  d.batch = j.value("batch", d.batch);
  d.warmup = j.value("warmup", d.warmup);
  return d;
}

std::string_view to_string(CandidateMode m) { return m == CandidateMode::beam ? "beam" : "sample"; }

void TrainConfig::validate() const {
  model.validate();
  reward.validate();
  pseudo.validate();
  for (const auto* b : {&step1, &step2, &step3}) {
    if (b->iterations <= 0 || b->batch <= 0) throw ConfigError("step budgets must be positive");
    if (!(b->lr > 0) || b->warmup < 0) throw ConfigError("learning rates must be positive, warmup >= 0");
  }
  if (w_extractor < 0 || w_reg < 0 || w_res < 0) throw ConfigError("loss weights must be non-negative");
  if (optimizer.weight_decay < 0 || optimizer.eps <= 0) throw ConfigError("bad optimizer settings");
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
  if (log_interval < 1 || checkpoint_interval < 0) throw ConfigError("bad logging intervals");
}

const StepBudget& TrainConfig::budget(int step) const {
  switch (step) {
    case 1: return step1;
    case 2: return step2;
    case 3: return step3;
  }
  throw ContractViolation("no such training step: " + std::to_string(step));
}

nlohmann::json TrainConfig::to_json() const {
  return {{"model", model.to_json()},
          {"extractor", extractor.to_json()},
          {"optimizer",
           {{"beta1", optimizer.beta1},
            {"beta2", optimizer.beta2},
            {"eps", optimizer.eps},
            {"weight_decay", optimizer.weight_decay},
            {"clip_norm", optimizer.clip_norm}}},
          {"step1", step1.to_json()},
          {"step2", step2.to_json()},
          {"step3", step3.to_json()},
          {"loss_weights", {{"extractor", w_extractor}, {"reg", w_reg}, {"res", w_res}}},
          {"reward", reward.to_json()},
          {"candidates", std::string(to_string(candidates))},
          {"pseudo", pseudo.to_json()},
          {"beam_width", beam_width},
          {"log_interval", log_interval},
          {"checkpoint_interval", checkpoint_interval},
          {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"model", "extractor", "optimizer", "step1", "step2", "step3", "loss_weights", "reward", "candidates",
                  "pseudo", "beam_width", "log_interval", "checkpoint_interval", "seed"},
                 "train config");
  TrainConfig c;
  try {
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"]);
    if (j.contains("extractor")) c.extractor = model::ExtractorWeights::from_json(j["extractor"]);
    if (j.contains("optimizer")) {
      const auto& o = j["optimizer"];
      reject_unknown(o, {"beta1", "beta2", "eps", "weight_decay", "clip_norm"}, "optimizer");
      c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
      c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
      c.optimizer.eps = o.value("eps", c.optimizer.eps);
      c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
      c.optimizer.clip_norm = o.value("clip_norm", c.optimizer.clip_norm);
    }
    if (j.contains("step1")) c.step1 = StepBudget::from_json(j["step1"], c.step1);
    if (j.contains("step2")) c.step2 = StepBudget::from_json(j["step2"], c.step2);
    if (j.contains("step3")) c.step3 = StepBudget::from_json(j["step3"], c.step3);
    if (j.contains("loss_weights")) {
      const auto& w = j["loss_weights"];
      reject_unknown(w, {"extractor", "reg", "res"}, "loss_weights");
      c.w_extractor = w.value("extractor", c.w_extractor);
      c.w_reg = w.value("reg", c.w_reg);
      c.w_res = w.value("res", c.w_res);
    }
    if (j.contains("reward")) c.reward = mutual::RewardConfig::from_json(j["reward"]);
    if (j.contains("candidates")) {
      const auto m = j["candidates"].get<std::string>();
      if (m == "beam")
        c.candidates = CandidateMode::beam;
      else if (m == "sample")
        c.candidates = CandidateMode::sample;
      else
        throw ConfigError("candidates must be beam or sample");
    }
    if (j.contains("pseudo")) c.pseudo = mutual::PseudoConfig::from_json(j["pseudo"]);
    c.beam_width = j.value("beam_width", c.beam_width);
    c.log_interval = j.value("log_interval", c.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t TrainConfig::hash() const { return fnv1a(to_json().dump()); }

}  // namespace refer::train
