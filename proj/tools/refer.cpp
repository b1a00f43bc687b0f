// Command-line entry point: data generation, the three training steps,
// pseudo-expression generation, inference, evaluation and the human
// evaluation service.

#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include "CLI11.hpp"
#include "refer/errors.hpp"
#include "refer/mutual/pseudo.hpp"
#include "refer/service/eval_service.hpp"
#include "refer/train/checkpoint.hpp"
#include "refer/train/evaluate.hpp"
#include "refer/train/trainer.hpp"
#include "refer/world/dataset.hpp"
#include "refer/world/rle.hpp"

using namespace refer;

namespace {

train::TrainConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  train::TrainConfig cfg = path.empty() ? train::TrainConfig{} : train::TrainConfig::load(path);
  if (seed) cfg.seed = *seed;
  cfg.validate();
  return cfg;
}

const world::Scene& find_scene(const std::vector<world::Scene>& scenes, const std::string& id) {
  for (const auto& s : scenes)
    if (s.id == id) return s;
  throw InputError("no scene with id " + id);
}

world::Split parse_split_or_throw(const std::string& s) {
  auto split = world::parse_split(s);
  if (!split) throw InputError("unknown split " + s);
  return *split;
}

void write_json(const std::string& path, const nlohmann::json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring expression generation and segmentation with mutual supervision"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Seed for all randomness (overrides the config)");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic scene dataset (JSON Lines)");
  std::string gen_out, gen_params, gen_vocab;
  int gen_scenes = 2000;
  std::optional<double> gen_annotated;
  std::optional<int> gen_max_objects;
  std::string gen_register;
  gen->add_option("--out", gen_out, "Dataset path")->required();
  gen->add_option("--scenes", gen_scenes, "Number of scenes")->check(CLI::PositiveNumber);
  gen->add_option("--params", gen_params, "Generation parameters (JSON)")->check(CLI::ExistingFile);
  gen->add_option("--annotated-fraction", gen_annotated, "Fraction of train scenes with expressions");
  gen->add_option("--max-objects", gen_max_objects, "Objects per scene upper bound");
  gen->add_option("--register", gen_register, "Expression register")->check(CLI::IsMember({"plain", "no_location"}));
  gen->add_option("--vocab", gen_vocab, "Also write the vocabulary here");

  // train
  auto* tr = app.add_subcommand("train", "Run one training step");
  int tr_step = 1;
  std::string tr_config, tr_data, tr_init, tr_resume, tr_out, tr_log;
  long tr_eval_interval = 0, tr_stop_after = -1;
  tr->add_option("--step", tr_step, "Training step")->required()->check(CLI::IsMember({1, 2, 3}));
  tr->add_option("--config", tr_config, "Training config (JSON)")->check(CLI::ExistingFile);
  tr->add_option("--data", tr_data, "Dataset (JSON Lines)")->required()->check(CLI::ExistingFile);
  tr->add_option("--init", tr_init, "Checkpoint of the previous step (steps 2 and 3)")->check(CLI::ExistingFile);
  tr->add_option("--resume", tr_resume, "Continue an interrupted run of this step")->check(CLI::ExistingFile);
  tr->add_option("--out", tr_out, "Output checkpoint")->required();
  tr->add_option("--log", tr_log, "Training log (JSON Lines)");
  tr->add_option("--eval-interval", tr_eval_interval, "Evaluate on val every N iterations (0: end only)");
  tr->add_option("--stop-after", tr_stop_after, "Stop after N iterations (checkpoint stays resumable)");
  tr->get_option("--resume")->excludes(tr->get_option("--init"));

  // pseudo
  auto* ps = app.add_subcommand("pseudo", "Generate pseudo expressions and merge them into the dataset");
  std::string ps_config, ps_data, ps_ckpt, ps_out, ps_report, ps_mode;
  ps->add_option("--config", ps_config, "Training config (JSON)")->check(CLI::ExistingFile);
  ps->add_option("--data", ps_data, "Dataset (JSON Lines)")->required()->check(CLI::ExistingFile);
  ps->add_option("--checkpoint", ps_ckpt, "Step-2 checkpoint")->required()->check(CLI::ExistingFile);
  ps->add_option("--out", ps_out, "Merged dataset")->required();
  ps->add_option("--report", ps_report, "Sidecar report (default: <out>.report.json)");
  ps->add_option("--filter-mode", ps_mode, "Instance filter")->check(CLI::IsMember({"none", "random", "area"}));

  // infer-reg
  auto* ireg = app.add_subcommand("infer-reg", "Generate an expression for an object");
  std::string ireg_ckpt, ireg_data, ireg_scene;
  int ireg_object = 0, ireg_beam = 0;
  ireg->add_option("--checkpoint", ireg_ckpt)->required()->check(CLI::ExistingFile);
  ireg->add_option("--data", ireg_data)->required()->check(CLI::ExistingFile);
  ireg->add_option("--scene", ireg_scene, "Scene id")->required();
  ireg->add_option("--object", ireg_object, "Object index")->required();
  ireg->add_option("--beam", ireg_beam, "Beam width (default: config)");

  // infer-res
  auto* ires = app.add_subcommand("infer-res", "Segment the object an expression refers to");
  std::string ires_ckpt, ires_data, ires_scene, ires_query;
  ires->add_option("--checkpoint", ires_ckpt)->required()->check(CLI::ExistingFile);
  ires->add_option("--data", ires_data)->required()->check(CLI::ExistingFile);
  ires->add_option("--scene", ires_scene, "Scene id")->required();
  ires->add_option("--query", ires_query, "Expression text")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a split");
  std::string ev_ckpt, ev_data, ev_split = "test", ev_metrics = "res,reg", ev_judge, ev_out;
  int ev_beam = 0;
  ev->add_option("--checkpoint", ev_ckpt)->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data)->required()->check(CLI::ExistingFile);
  ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--metrics", ev_metrics, "Comma-separated subset of res,reg");
  ev->add_option("--judge", ev_judge, "Independently trained checkpoint for Refer-back accuracy")
      ->check(CLI::ExistingFile);
  ev->add_option("--out", ev_out, "Report path (default: stdout)");
  ev->add_option("--beam", ev_beam, "Beam width (default: config)");

  // serve
  auto* sv = app.add_subcommand("serve", "Run the human-evaluation service");
  std::string sv_data, sv_ckpt, sv_host = "127.0.0.1", sv_answers = "answers.jsonl", sv_split = "test";
  int sv_port = 8080, sv_batch = 100, sv_batches = 1, sv_max_sessions = 0;
  sv->add_option("--port", sv_port);
  sv->add_option("--host", sv_host);
  sv->add_option("--data", sv_data)->required()->check(CLI::ExistingFile);
  sv->add_option("--checkpoint", sv_ckpt, "Generate expressions with this model (default: ground truth)")
      ->check(CLI::ExistingFile);
  sv->add_option("--split", sv_split)->check(CLI::IsMember({"train", "val", "test"}));
  sv->add_option("--batch-size", sv_batch)->check(CLI::PositiveNumber);
  sv->add_option("--batches", sv_batches)->check(CLI::PositiveNumber);
  sv->add_option("--max-sessions", sv_max_sessions);
  sv->add_option("--answers", sv_answers, "Answer store (JSON Lines)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      world::GenerationParams params;
      if (!gen_params.empty()) {
        std::ifstream in(gen_params);
        params = world::GenerationParams::from_json(nlohmann::json::parse(in));
      }
      if (gen_annotated) params.annotated_fraction = *gen_annotated;
      if (gen_max_objects) params.max_objects = *gen_max_objects;
      if (!gen_register.empty()) params.reg = *world::parse_register(gen_register);
      params.validate();
      auto scenes = world::generate_dataset(gen_scenes, params, seed.value_or(0));
      world::write_dataset(gen_out, scenes);
      if (!gen_vocab.empty()) world::write_vocabulary(gen_vocab, world::Vocabulary::standard());
      std::cout << nlohmann::json{{"scenes", scenes.size()}, {"expressions", world::count_expressions(scenes)}}.dump()
                << '\n';
      return 0;
    }

    if (tr->parsed()) {
      const auto cfg = load_config(tr_config, seed);
      const auto data = world::read_dataset(tr_data);
      const auto val = train::select_split(data, world::Split::val);
      std::ofstream log;
      if (!tr_log.empty()) {
        log.open(tr_log, std::ios::app);
        if (!log) throw InputError("cannot open log " + tr_log);
      }
      train::RunOptions opts;
      opts.log = tr_log.empty() ? nullptr : &log;
      opts.checkpoint_path = tr_out;
      opts.stop_after = tr_stop_after;
      opts.eval_scenes = val;
      opts.eval_interval = tr_eval_interval;

      train::TrainState state;
      if (!tr_resume.empty()) {
        state = train::load_checkpoint(tr_resume);
        if (state.step != tr_step)
          throw ContractViolation("checkpoint is from step " + std::to_string(state.step) + ", not " +
                                  std::to_string(tr_step));
        state = train::resume(cfg, std::move(state), data, opts);
      } else if (tr_step == 1) {
        state = train::train_step1(cfg, data, opts);
      } else {
        if (tr_init.empty())
          throw ContractViolation("train --step " + std::to_string(tr_step) + " needs --init with a step-" +
                                  std::to_string(tr_step - 1) + " checkpoint");
        auto from = train::load_checkpoint(tr_init);
        state = tr_step == 2 ? train::train_step2(cfg, std::move(from), data, opts)
                             : train::train_step3(cfg, from, data, opts);
      }
      train::save_checkpoint(tr_out, state);
      std::cout << nlohmann::json{{"step", state.step},
                                  {"iteration", state.iteration},
                                  {"complete", state.complete},
                                  {"weights_hash", state.weights_hash()}}
                       .dump()
                << '\n';
      return 0;
    }

    if (ps->parsed()) {
      auto cfg = load_config(ps_config, seed);
      if (!ps_mode.empty()) cfg.pseudo.filter_mode = *mutual::parse_filter_mode(ps_mode);
      if (seed) cfg.pseudo.seed = *seed;
      const auto state = train::load_checkpoint(ps_ckpt);
      if (state.step != 2 || !state.complete) throw ContractViolation("pseudo needs a complete step-2 checkpoint");
      auto data = world::read_dataset(ps_data);
      auto result = mutual::generate_pseudo<float>(data, *state.model, cfg.pseudo);
      auto merged = mutual::merge_datasets(std::move(data), result.items);
      result.report.dropped_duplicates = merged.dropped;
      world::write_dataset(ps_out, merged.scenes);
      auto report = result.report.to_json();
      report["min_area"] = cfg.pseudo.min_area;
      report["q2"] = cfg.pseudo.q2;
      report["pseudo_weight"] = cfg.pseudo.pseudo_weight;
      report["added"] = merged.added;
      write_json(ps_report.empty() ? ps_out + ".report.json" : ps_report, report);
      std::cout << report.dump() << '\n';
      return 0;
    }

    if (ireg->parsed()) {
      const auto state = train::load_checkpoint(ireg_ckpt);
      const auto data = world::read_dataset(ireg_data);
      const auto& scene = find_scene(data, ireg_scene);
      const auto beams =
          train::infer_reg(*state.model, scene, ireg_object, ireg_beam > 0 ? ireg_beam : state.config.beam_width);
      const auto& vocab = world::Vocabulary::standard();
      nlohmann::json out = {{"scene", scene.id},
                            {"object", ireg_object},
                            {"expression", vocab.decode(beams.front().tokens)},
                            {"tokens", beams.front().tokens},
                            {"log_prob", beams.front().log_prob},
                            {"denotes_exactly_target",
                             world::evaluate_expression(scene, beams.front().tokens) == std::set<int>{ireg_object}}};
      for (const auto& b : beams) out["beams"].push_back({{"expression", vocab.decode(b.tokens)}, {"log_prob", b.log_prob}});
      std::cout << out.dump() << '\n';
      return 0;
    }

    if (ires->parsed()) {
      const auto state = train::load_checkpoint(ires_ckpt);
      const auto data = world::read_dataset(ires_data);
      const auto& scene = find_scene(data, ires_scene);
      const auto tokens = world::Vocabulary::standard().encode(ires_query);
      const auto r = train::infer_res(*state.model, scene, tokens);
      std::cout << nlohmann::json{{"proposal", r.proposal},
                                  {"rle", world::encode_rle(r.mask)},
                                  {"width", r.mask.width()},
                                  {"height", r.mask.height()},
                                  {"scores", r.scores}}
                       .dump()
                << '\n';
      return 0;
    }

    if (ev->parsed()) {
      const auto state = train::load_checkpoint(ev_ckpt);
      const auto data = world::read_dataset(ev_data);
      const auto scenes = train::select_split(data, parse_split_or_throw(ev_split));
      train::EvalOptions eo;
      eo.res = ev_metrics.find("res") != std::string::npos;
      eo.reg = ev_metrics.find("reg") != std::string::npos;
      if (!eo.res && !eo.reg) throw InputError("--metrics must name res and/or reg");
      eo.beam_width = ev_beam > 0 ? ev_beam : state.config.beam_width;
      eo.model_hash = state.weights_hash();
      std::optional<train::TrainState> judge;
      if (!ev_judge.empty()) {
        judge = train::load_checkpoint(ev_judge);
        eo.judge = judge->model.get();
        eo.judge_hash = judge->weights_hash();
      }
      write_json(ev_out, train::evaluate(*state.model, scenes, ev_split, eo).to_json());
      return 0;
    }

    if (sv->parsed()) {
      const auto data = world::read_dataset(sv_data);
      const auto scenes = train::select_split(data, parse_split_or_throw(sv_split));
      std::optional<train::TrainState> state;
      if (!sv_ckpt.empty()) state = train::load_checkpoint(sv_ckpt);
      const auto& vocab = world::Vocabulary::standard();
      std::vector<service::TaskSource> pool;
      for (const auto& s : scenes) {
        for (const auto& o : s.objects) {
          std::string text;
          if (state) {
            text = vocab.decode(train::infer_reg(*state->model, s, o.id, state->config.beam_width).front().tokens);
          } else {
            for (const auto& e : s.expressions)
              if (e.object_id == o.id && e.provenance == world::Provenance::real) {
                text = e.text;
                break;
              }
          }
          if (!text.empty()) pool.push_back({s, o.id, text});
        }
      }
      service::ServiceConfig sc;
      sc.batch_size = sv_batch;
      sc.batches = sv_batches;
      sc.max_sessions = sv_max_sessions;
      sc.seed = seed.value_or(0);
      sc.answer_log = sv_answers;
      service::EvalService svc(std::move(pool), sc);
      service::HttpServer http(svc);
      const int port = http.bind(sv_host, sv_port);
      if (port < 0) throw InputError("cannot bind " + sv_host + ":" + std::to_string(sv_port));
      std::cout << "listening on http://" << sv_host << ':' << port << '\n' << std::flush;
      http.listen();
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
