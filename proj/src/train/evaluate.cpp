#include "refer/train/evaluate.hpp"

#include <map>
#include <set>

#include "refer/errors.hpp"
#include "refer/world/grammar.hpp"

namespace refer::train {

using nn::Tape;

std::vector<world::Scene> select_split(std::span<const world::Scene> scenes, world::Split split) {
  std::vector<world::Scene> out;
  for (const auto& s : scenes)
    if (s.split == split) out.push_back(s);
  return out;
}

std::vector<int> proposal_of_objects(const model::Model<float>& m, const world::Scene& scene) {
  Tape<float> t(false);
  auto [props, pix] = m.perception.extract(t, scene.image);
  return model::match_instances<float>(model::gt_mask_targets<float>(scene, m.config().grid()),
                                       props.mask_logits.value());
}

ResPrediction infer_res(const model::Model<float>& m, const world::Scene& scene, const std::vector<int>& tokens) {
  Tape<float> t(false);
  auto [props, pix] = m.perception.extract(t, scene.image);
  auto text = m.text.encode(t, tokens);
  const auto& s = m.res.matching_scores(t, props.proposals, text).value();
  ResPrediction r;
  r.scores.assign(s.data(), s.data() + s.size());
  r.proposal = model::select(std::span<const double>(r.scores));
  r.mask = model::predict_mask<float>(props.mask_logits.value(), r.proposal, m.config().grid(), scene.width,
                                      scene.height);
  return r;
}

std::vector<model::BeamHypothesis> infer_reg(const model::Model<float>& m, const world::Scene& scene, int object,
                                             int beam_width) {
  if (object < 0 || object >= int(scene.objects.size()))
    throw InputError("scene " + scene.id + " has no object " + std::to_string(object));
  Tape<float> t(false);
  auto [props, pix] = m.perception.extract(t, scene.image);
  const auto query_of = model::match_instances<float>(model::gt_mask_targets<float>(scene, m.config().grid()),
                                                      props.mask_logits.value());
  const auto indicated = m.reg.indicate(t, props.proposals, query_of[std::size_t(object)]).value();
  return m.reg.decode_beam(indicated, beam_width, m.reg.max_generated());
}

namespace {

std::vector<metrics::Tokens> real_refs(const world::Scene& scene, int object) {
  std::vector<metrics::Tokens> refs;
  for (const auto& e : scene.expressions)
    if (e.object_id == object && e.provenance == world::Provenance::real)
      refs.push_back(metrics::content_tokens(e.tokens));
  return refs;
}

}  // namespace

metrics::EvalReport evaluate(const model::Model<float>& m, std::span<const world::Scene> scenes,
                             const std::string& split, const EvalOptions& opts) {
  metrics::EvalReport report;
  report.split = split;
  const int grid = m.config().grid();

  std::vector<metrics::IoUSample> ious;
  std::vector<world::BBox> pred_boxes, gt_boxes;
  long selected_right = 0;

  struct RegItem {
    const world::Scene* scene;
    int object;
    metrics::Tokens generated;
    std::vector<metrics::Tokens> refs;
    std::vector<int> full;
  };
  std::vector<RegItem> reg_items;

  for (const auto& scene : scenes) {
    bool any = false;
    for (const auto& e : scene.expressions) any |= e.provenance == world::Provenance::real;
    if (!any) continue;
    Tape<float> t(false);
    auto [props, pix] = m.perception.extract(t, scene.image);
    const nn::Matrix<float> logits = props.mask_logits.value();  // tape storage may move
    const auto query_of = model::match_instances<float>(model::gt_mask_targets<float>(scene, grid), logits);

    if (opts.res) {
      for (const auto& e : scene.expressions) {
        if (e.provenance != world::Provenance::real) continue;
        auto text = m.text.encode(t, e.tokens);
        const int sel = model::select(m.res.matching_scores(t, props.proposals, text).value());
        const auto mask = model::predict_mask<float>(logits, sel, grid, scene.width, scene.height);
        const auto& obj = scene.objects[std::size_t(e.object_id)];
        ious.push_back(metrics::iou_sample(mask, obj.mask));
        pred_boxes.push_back(metrics::mask_to_box(mask));
        gt_boxes.push_back(obj.bbox);
        selected_right += sel == query_of[std::size_t(e.object_id)];
      }
    }
    if (opts.reg) {
      std::set<int> objects;
      for (const auto& e : scene.expressions)
        if (e.provenance == world::Provenance::real) objects.insert(e.object_id);
      for (int obj : objects) {
        const auto indicated = m.reg.indicate(t, props.proposals, query_of[std::size_t(obj)]).value();
        const auto beams = m.reg.decode_beam(indicated, opts.beam_width, m.reg.max_generated());
        RegItem it{&scene, obj, metrics::content_tokens(beams.front().tokens), real_refs(scene, obj),
                   beams.front().tokens};
        reg_items.push_back(std::move(it));
      }
    }
  }

  if (opts.res && !ious.empty()) {
    report.n = long(ious.size());
    report.miou = metrics::miou(ious);
    report.oiou = metrics::oiou(ious);
    for (const char* x : {"0.5", "0.7", "0.9"}) report.pr[x] = metrics::precision_at(ious, std::stod(x));
    report.rec_acc = metrics::rec_accuracy(pred_boxes, gt_boxes);
    report.sel_acc = double(selected_right) / double(ious.size());
  }

  if (opts.reg && !reg_items.empty()) {
    std::vector<std::vector<metrics::Tokens>> docs;
    for (const auto& it : reg_items) docs.push_back(it.refs);
    const metrics::CorpusStats stats(docs);
    double cider = 0, meteor = 0;
    long exact = 0;
    for (const auto& it : reg_items) {
      cider += metrics::cider(it.generated, it.refs, stats);
      meteor += metrics::meteor_exact(it.generated, it.refs);
      exact += world::evaluate_expression(*it.scene, it.full) == std::set<int>{it.object};
    }
    const double n = double(reg_items.size());
    report.n_reg = long(reg_items.size());
    report.cider = cider / n;
    report.meteor_exact = meteor / n;
    report.reg_acc = double(exact) / n;

    if (opts.judge) {
      std::vector<metrics::ReferBackItem> items;
      for (const auto& it : reg_items) items.push_back({it.scene, it.object, it.full});
      std::map<const world::Scene*, std::pair<nn::Matrix<float>, std::vector<int>>> cache;
      const auto& judge = *opts.judge;
      auto judge_fn = [&](const metrics::ReferBackItem& item) {
        auto found = cache.find(item.scene);
        if (found == cache.end()) {
          Tape<float> t(false);
          auto [props, pix] = judge.perception.extract(t, item.scene->image);
          auto q = model::match_instances<float>(model::gt_mask_targets<float>(*item.scene, judge.config().grid()),
                                                 props.mask_logits.value());
          found = cache.emplace(item.scene, std::make_pair(props.proposals.value(), std::move(q))).first;
        }
        Tape<float> t(false);
        auto text = judge.text.encode(t, item.tokens);
        const int sel = model::select(judge.res.matching_scores(t, t.constant(found->second.first), text).value());
        const auto& q = found->second.second;
        for (std::size_t o = 0; o < q.size(); ++o)
          if (q[o] == sel) return int(o);
        return -1;
      };
      report.rb_acc = metrics::refer_back_accuracy(items, judge_fn, opts.judge_hash, opts.model_hash);
    }
  }
  return report;
}

}  // namespace refer::train
