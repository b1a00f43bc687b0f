#include "refer/train/trainer.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>
#include <string>

#include "refer/errors.hpp"
#include "refer/metrics/metrics.hpp"
#include "refer/mutual/rewards.hpp"
#include "refer/train/evaluate.hpp"
#include "refer/world/dataset.hpp"

namespace refer::train {

using nn::Tape;
using nn::Var;

namespace {

bool usable(const world::Expression& e, bool include_pseudo) {
  return include_pseudo || e.provenance == world::Provenance::real;
}

/// Position-addressed stream of per-epoch shuffles: batch contents depend
/// only on (seed, step, iteration), so resumed runs see the same batches.
class BatchStream {
 public:
  BatchStream(std::size_t items, std::uint64_t seed, int step) : n_(items), seed_(seed), step_(step) {}

  std::vector<std::size_t> batch(long iteration, int size) {
    std::vector<std::size_t> out;
    for (long pos = iteration * size; pos < (iteration + 1) * size; ++pos) {
      const long epoch = pos / long(n_);
      if (epoch != epoch_) shuffle(epoch);
      out.push_back(order_[std::size_t(pos % long(n_))]);
    }
    return out;
  }

 private:
  void shuffle(long epoch) {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t(0));
    std::mt19937_64 rng(seed_ ^ (0x2545f4914f6cdd1dULL * std::uint64_t(step_)) ^
                        (0x9e3779b97f4a7c15ULL * std::uint64_t(epoch + 1)));
    std::shuffle(order_.begin(), order_.end(), rng);
    epoch_ = epoch;
  }

  std::size_t n_;
  std::uint64_t seed_;
  int step_;
  long epoch_ = -1;
  std::vector<std::size_t> order_;
};

/// Running means for the log.
struct Meter {
  std::map<std::string, double> sum;
  long count = 0;
  void add(const std::map<std::string, double>& v) {
    for (const auto& [k, x] : v) sum[k] += x;
    ++count;
  }
  nlohmann::json flush() {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, x] : sum) j[k] = count ? x / double(count) : 0.0;
    sum.clear();
    count = 0;
    return j;
  }
};

void log_event(const RunOptions& opts, nlohmann::json event) {
  if (!opts.log) return;
  *opts.log << event.dump() << '\n';
  opts.log->flush();
}

std::vector<std::size_t> scene_items(std::span<const world::Scene> data, bool include_pseudo) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].split != world::Split::train) continue;
    if (std::any_of(data[i].expressions.begin(), data[i].expressions.end(),
                    [&](const world::Expression& e) { return usable(e, include_pseudo); }))
      out.push_back(i);
  }
  return out;
}

struct ObjectItem {
  std::size_t scene;
  int object;
};

std::vector<ObjectItem> object_items(std::span<const world::Scene> data) {
  std::vector<ObjectItem> out;
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].split != world::Split::train) continue;
    std::set<int> objects;
    for (const auto& e : data[i].expressions)
      if (e.provenance == world::Provenance::real) objects.insert(e.object_id);
    for (int o : objects) out.push_back({i, o});
  }
  return out;
}

std::uint64_t items_hash(std::span<const world::Scene> data, const std::vector<std::size_t>& scenes) {
  std::vector<world::Scene> picked;
  for (auto i : scenes) picked.push_back(data[i]);
  return dataset_hash(picked);
}

void after_iteration(TrainState& state, const RunOptions& opts, Meter& meter) {
  const auto& cfg = state.config;
  if (state.iteration % cfg.log_interval == 0) {
    nlohmann::json e = {{"event", "train"}, {"step", state.step}, {"iteration", state.iteration}};
    e.update(meter.flush());
    log_event(opts, e);
  }
  if (cfg.checkpoint_interval > 0 && !opts.checkpoint_path.empty() && state.iteration % cfg.checkpoint_interval == 0)
    save_checkpoint(opts.checkpoint_path, state);
  const bool periodic = opts.eval_interval > 0 && state.iteration % opts.eval_interval == 0;
  const bool last = state.iteration == cfg.budget(state.step).iterations;
  if (!opts.eval_scenes.empty() && (periodic || last)) {
    EvalOptions eo;
    eo.beam_width = cfg.beam_width;
    auto report = evaluate(*state.model, opts.eval_scenes, "val", eo);
    log_event(opts, {{"event", "eval"}, {"step", state.step}, {"iteration", state.iteration}, {"report", report.to_json()}});
  }
}

void run_supervised(TrainState& state, std::span<const world::Scene> data, const RunOptions& opts) {
  const auto& cfg = state.config;
  const bool include_pseudo = state.step == 3;
  const auto items = scene_items(data, include_pseudo);
  if (items.empty()) throw InputError("no training scenes with expressions");
  const auto& budget = cfg.budget(state.step);
  BatchStream stream(items.size(), cfg.seed, state.step);
  auto& m = *state.model;
  Meter meter;
  long done = 0;
  while (state.iteration < budget.iterations) {
    if (opts.stop_after >= 0 && done >= opts.stop_after) break;
    const auto batch = stream.batch(state.iteration, budget.batch);
    // Weighted mean: a pseudo expression counts its weight in the denominator too.
    double expressions = 0;
    for (auto b : batch)
      for (const auto& e : data[items[b]].expressions)
        if (usable(e, include_pseudo)) expressions += e.weight;

    m.store.zero_grad();
    std::map<std::string, double> stats;
    const float scene_scale = float(cfg.w_extractor / double(batch.size()));
    const float expr_scale = expressions > 0 ? float(1.0 / expressions) : 0.0f;
    for (auto b : batch) {
      Tape<float> t;
      auto sl = scene_loss(t, m, cfg, data[items[b]], include_pseudo);
      Var<float> root = nn::scale(sl.extractor, scene_scale);
      if (sl.expressions > 0) {
        root = nn::add(root, nn::scale(sl.reg, float(cfg.w_reg) * expr_scale));
        root = nn::add(root, nn::scale(sl.res, float(cfg.w_res) * expr_scale));
        stats["reg"] += double(sl.reg.item()) * expr_scale;
        stats["res"] += double(sl.res.item()) * expr_scale;
      }
      t.backward(root);
      stats["loss"] += double(root.item());
      stats["extractor"] += double(sl.extractor.item()) / double(batch.size());
      stats["mask_bce"] += sl.mask_bce / double(batch.size());
      stats["dice"] += sl.dice / double(batch.size());
      stats["objectness"] += sl.objectness / double(batch.size());
    }
    const double lr = nn::scheduled_lr(budget.lr, state.iteration, budget.iterations, budget.warmup);
    stats["grad_norm"] = state.optimizer.step(m.store, lr);
    stats["lr"] = lr;
    meter.add(stats);
    ++state.iteration;
    ++done;
    state.complete = state.iteration >= budget.iterations;
    after_iteration(state, opts, meter);
  }
  state.complete = state.iteration >= budget.iterations;
}

/// Frozen-perception features of a step-2 scene.
struct SceneCache {
  nn::Matrix<float> proposals;
  std::vector<int> query_of;
};

void run_disambiguation(TrainState& state, std::span<const world::Scene> data, const RunOptions& opts) {
  const auto& cfg = state.config;
  const auto items = object_items(data);
  if (items.empty()) throw InputError("no annotated objects for step 2");
  auto& m = *state.model;
  m.train_only("reg");
  const auto& budget = cfg.budget(2);

  std::map<std::size_t, SceneCache> cache;
  std::vector<std::vector<metrics::Tokens>> refs(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& scene = data[items[i].scene];
    for (const auto& e : scene.expressions)
      if (e.object_id == items[i].object && e.provenance == world::Provenance::real)
        refs[i].push_back(metrics::content_tokens(e.tokens));
    if (!cache.count(items[i].scene)) {
      Tape<float> t(false);
      auto [props, pix] = m.perception.extract(t, scene.image);
      cache[items[i].scene] = {props.proposals.value(),
                               model::match_instances<float>(model::gt_mask_targets<float>(scene, cfg.model.grid()),
                                                             props.mask_logits.value())};
    }
  }
  const metrics::CorpusStats stats(refs);

  BatchStream stream(items.size(), cfg.seed, 2);
  Meter meter;
  long done = 0;
  const int max_gen = m.reg.max_generated();
  while (state.iteration < budget.iterations) {
    if (opts.stop_after >= 0 && done >= opts.stop_after) break;
    const auto batch = stream.batch(state.iteration, budget.batch);
    m.store.zero_grad();
    std::map<std::string, double> log;
    for (auto b : batch) {
      const auto& c = cache.at(items[b].scene);
      const int k = c.query_of[std::size_t(items[b].object)];
      Tape<float> t;
      Var<float> indicated = m.reg.indicate(t, t.constant(c.proposals), k);

      std::vector<mutual::RewardSample> samples;
      if (cfg.candidates == CandidateMode::beam) {
        for (auto& h : m.reg.decode_beam(indicated.value(), cfg.reward.q1, max_gen))
          samples.push_back({h.tokens, h.log_prob});
      } else {
        for (int j = 0; j < cfg.reward.q1; ++j) {
          auto h = m.reg.sample(indicated.value(), max_gen, state.rng);
          samples.push_back({h.tokens, h.log_prob});
        }
      }
      for (auto& s : samples) {
        Tape<float> frozen(false);
        auto text = m.text.encode(frozen, s.tokens);
        const auto& sc = m.res.matching_scores(frozen, frozen.constant(c.proposals), text).value();
        std::vector<double> scores(sc.data(), sc.data() + sc.size());
        s.unambiguity = mutual::unambiguity_reward(scores, k, cfg.reward);
        s.cider = metrics::cider(metrics::content_tokens(s.tokens), refs[b], stats);
        s.reward = cfg.reward.alpha * s.unambiguity + s.cider;
        log["reward"] += s.reward / double(samples.size() * batch.size());
        log["unambiguity"] += s.unambiguity / double(samples.size() * batch.size());
        log["cider"] += s.cider / double(samples.size() * batch.size());
      }
      if (samples.size() < 2) continue;
      mutual::apply_baseline(samples);
      std::vector<Var<float>> lps;
      for (const auto& s : samples) lps.push_back(m.reg.policy_log_prob(t, s.tokens, indicated));
      auto loss = mutual::policy_gradient_loss<float>(lps, samples);
      t.backward(loss, 1.0f / float(batch.size()));
      log["surrogate"] += double(loss.item()) / double(batch.size());
    }
    const double lr = nn::scheduled_lr(budget.lr, state.iteration, budget.iterations, budget.warmup);
    log["grad_norm"] = state.optimizer.step(m.store, lr);
    log["lr"] = lr;
    meter.add(log);
    ++state.iteration;
    ++done;
    state.complete = state.iteration >= budget.iterations;
    after_iteration(state, opts, meter);
  }
  state.complete = state.iteration >= budget.iterations;
}

std::uint64_t step_data_hash(int step, std::span<const world::Scene> data) {
  if (step == 2) {
    std::vector<std::size_t> scenes;
    for (const auto& it : object_items(data))
      if (scenes.empty() || scenes.back() != it.scene) scenes.push_back(it.scene);
    return items_hash(data, scenes);
  }
  return items_hash(data, scene_items(data, step == 3));
}

void run(TrainState& state, std::span<const world::Scene> data, const RunOptions& opts) {
  log_event(opts, {{"event", "start"},
                   {"step", state.step},
                   {"iteration", state.iteration},
                   {"config_hash", state.config_hash},
                   {"data_hash", state.data_hash}});
  if (state.step == 2)
    run_disambiguation(state, data, opts);
  else
    run_supervised(state, data, opts);
  log_event(opts, {{"event", "end"}, {"step", state.step}, {"iteration", state.iteration}, {"complete", state.complete}});
}

void check_config(const TrainConfig& cfg, const TrainState& state) {
  if (cfg.hash() != state.config_hash)
    throw ConfigError("config hash " + std::to_string(cfg.hash()) + " does not match checkpoint " +
                      std::to_string(state.config_hash));
}

// Steps may change budgets, rewards or the pseudo filter, not the network.
void check_model_config(const TrainConfig& cfg, const TrainState& from) {
  if (cfg.model.to_json() != from.config.model.to_json())
    throw ConfigError("model config differs from the checkpoint's");
}

}  // namespace

SceneLoss scene_loss(Tape<float>& t, const model::Model<float>& m, const TrainConfig& cfg, const world::Scene& scene,
                     bool include_pseudo) {
  auto [props, pix] = m.perception.extract(t, scene.image);
  const auto targets = model::gt_mask_targets<float>(scene, cfg.model.grid());
  auto ex = model::extractor_loss<float>(t, props, targets, cfg.extractor);
  SceneLoss sl;
  sl.extractor = ex.total;
  sl.mask_bce = ex.mask_bce;
  sl.dice = ex.dice;
  sl.objectness = ex.objectness;
  for (const auto& e : scene.expressions) {
    if (!usable(e, include_pseudo)) continue;
    const int k = ex.assignment.query_of[std::size_t(e.object_id)];
    const auto w = float(e.weight);
    Var<float> gen = m.reg.generation_loss(t, e.tokens, props.proposals, k, w);
    auto text = m.text.encode(t, e.tokens);
    Var<float> sel = model::selection_loss<float>(t, m.res.matching_scores(t, props.proposals, text), k, w);
    sl.reg = sl.reg.valid() ? nn::add(sl.reg, gen) : gen;
    sl.res = sl.res.valid() ? nn::add(sl.res, sel) : sel;
    ++sl.expressions;
  }
  return sl;
}

std::uint64_t dataset_hash(std::span<const world::Scene> scenes) {
  return fnv1a(world::serialize_dataset(scenes));
}

TrainState train_step1(const TrainConfig& cfg, std::span<const world::Scene> data, const RunOptions& opts) {
  TrainState s = fresh_state(cfg, 1);
  s.data_hash = step_data_hash(1, data);
  run(s, data, opts);
  return s;
}

TrainState train_step2(const TrainConfig& cfg, TrainState from, std::span<const world::Scene> data,
                       const RunOptions& opts) {
  if (from.step != 1 || !from.complete) throw ContractViolation("step 2 needs a complete step-1 checkpoint");
  check_model_config(cfg, from);
  from.config = cfg;
  from.config_hash = cfg.hash();
  from.step = 2;
  from.iteration = 0;
  from.complete = false;
  from.optimizer = nn::AdamW<float>(cfg.optimizer);
  from.rng.seed(cfg.seed ^ (0x9e3779b97f4a7c15ULL * 2));
  from.data_hash = step_data_hash(2, data);
  run(from, data, opts);
  return from;
}

TrainState train_step3(const TrainConfig& cfg, const TrainState& from, std::span<const world::Scene> data,
                       const RunOptions& opts) {
  if (from.step != 2 || !from.complete) throw ContractViolation("step 3 needs a complete step-2 checkpoint");
  check_model_config(cfg, from);
  TrainState s = fresh_state(cfg, 3);
  s.data_hash = step_data_hash(3, data);
  run(s, data, opts);
  return s;
}

TrainState resume(const TrainConfig& cfg, TrainState state, std::span<const world::Scene> data,
                  const RunOptions& opts) {
  check_config(cfg, state);
  if (step_data_hash(state.step, data) != state.data_hash)
    throw ConfigError("training data differ from the data the checkpoint was trained on");
  if (!state.complete) run(state, data, opts);
  return state;
}

}  // namespace refer::train
