#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refer/world/scene.hpp"

namespace refer::metrics {

using Tokens = std::vector<int>;

// ---- Mask overlap ---------------------------------------------------------

struct IoUSample {
  long intersection = 0;
  long union_ = 0;

  /// Both masks empty counts as perfect agreement.
  double iou() const { return union_ == 0 ? 1.0 : double(intersection) / double(union_); }
};

/// Throws ContractViolation on size mismatch.
IoUSample iou_sample(const world::Mask& pred, const world::Mask& gt);

/// Mean of per-sample IoUs. All three throw ContractViolation on empty input.
double miou(std::span<const IoUSample> samples);
/// Total intersection over total union.
double oiou(std::span<const IoUSample> samples);
/// Fraction of samples with IoU strictly greater than x.
double precision_at(std::span<const IoUSample> samples, double x);

// ---- Boxes ----------------------------------------------------------------

/// Tight half-open box; an empty mask gives the zero box.
world::BBox mask_to_box(const world::Mask& mask);
double box_iou(const world::BBox& a, const world::BBox& b);
/// Fraction of pairs with box IoU > 0.5; empty predicted boxes are misses.
double rec_accuracy(std::span<const world::BBox> pred, std::span<const world::BBox> gt);

// ---- Text -----------------------------------------------------------------

/// Document frequencies of 1..4-grams, one document per reference set.
class CorpusStats {
 public:
  CorpusStats() = default;
  explicit CorpusStats(const std::vector<std::vector<Tokens>>& documents);

  int documents() const { return documents_; }
  int frequency(const Tokens& ngram) const;
  /// log(documents), the CIDEr-D reference length constant.
  double log_documents() const;

 private:
  std::map<Tokens, int> df_;
  int documents_ = 0;
};

/// CIDEr-D in [0, 10]: tf-idf n-gram vectors (n = 1..4) with clipping to the
/// reference, Gaussian length penalty (sigma 6), averaged over n and refs,
/// scaled by 10. Throws ContractViolation on empty refs; empty candidate
/// scores 0.
double cider(const Tokens& candidate, const std::vector<Tokens>& refs, const CorpusStats& stats);

/// Exact-match Meteor: greedy longest-run unigram alignment, recall-weighted
/// harmonic mean, fragmentation penalty 0.5 (chunks/matches)^3; max over refs.
double meteor_exact(const Tokens& candidate, const std::vector<Tokens>& refs);

/// Token ids with begin/end/pad markers removed.
Tokens content_tokens(std::span<const int> tokens, int pad = 0, int begin = 1, int end = 2);

// ---- Refer-back -----------------------------------------------------------

struct ReferBackItem {
  const world::Scene* scene = nullptr;
  int object = 0;  // proposal index the expression was generated for
  Tokens tokens;
};

/// Fraction of items whose judge argmax equals the target. The judge must
/// come from an independently trained checkpoint: equal hashes throw
/// ContractViolation.
double refer_back_accuracy(std::span<const ReferBackItem> items,
                           const std::function<int(const ReferBackItem&)>& judge, std::uint64_t judge_hash,
                           std::uint64_t model_hash);

// ---- Report ---------------------------------------------------------------

struct EvalReport {
  std::string split;
  long n = 0;
  std::optional<double> miou, oiou, cider, meteor_exact, rb_acc, rec_acc;
  std::map<std::string, double> pr;  // "0.5" -> Pr@0.5
  // Diagnostics beyond the standard layout: selection accuracy of the RES
  // head and the fraction of generated expressions that denote exactly the
  // target under the grammar.
  std::optional<double> sel_acc, reg_acc;
  long n_reg = 0;  // objects described

  nlohmann::json to_json() const;
};

}  // namespace refer::metrics
