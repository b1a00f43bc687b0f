#include "refer/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "refer/errors.hpp"

namespace refer::metrics {

IoUSample iou_sample(const world::Mask& pred, const world::Mask& gt) {
  if (pred.width() != gt.width() || pred.height() != gt.height())
    throw ContractViolation("iou_sample: mask sizes differ");
  IoUSample s;
  const auto& a = pred.cells();
  const auto& b = gt.cells();
  for (std::size_t i = 0; i < a.size(); ++i) {
    s.intersection += (a[i] && b[i]);
    s.union_ += (a[i] || b[i]);
  }
  return s;
}

double miou(std::span<const IoUSample> samples) {
  if (samples.empty()) throw ContractViolation("miou of no samples");
  double acc = 0;
  for (const auto& s : samples) acc += s.iou();
  return acc / double(samples.size());
}

double oiou(std::span<const IoUSample> samples) {
  if (samples.empty()) throw ContractViolation("oiou of no samples");
  long i = 0, u = 0;
  for (const auto& s : samples) {
    i += s.intersection;
    u += s.union_;
  }
  return u == 0 ? 1.0 : double(i) / double(u);
}

double precision_at(std::span<const IoUSample> samples, double x) {
  if (samples.empty()) throw ContractViolation("precision_at of no samples");
  long hits = 0;
  for (const auto& s : samples) hits += s.iou() > x;
  return double(hits) / double(samples.size());
}

world::BBox mask_to_box(const world::Mask& mask) { return mask.bounding_box(); }

double box_iou(const world::BBox& a, const world::BBox& b) {
  world::BBox i{std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1), std::min(a.y1, b.y1)};
  const long inter = i.area();
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? double(inter) / double(uni) : 0.0;
}

double rec_accuracy(std::span<const world::BBox> pred, std::span<const world::BBox> gt) {
  if (pred.size() != gt.size()) throw ContractViolation("rec_accuracy: size mismatch");
  if (pred.empty()) throw ContractViolation("rec_accuracy of no boxes");
  long hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += !pred[i].empty() && box_iou(pred[i], gt[i]) > 0.5;
  return double(hits) / double(pred.size());
}

namespace {

constexpr int kMaxN = 4;
constexpr double kSigma = 6.0;

using Counts = std::map<Tokens, int>;

Counts ngram_counts(const Tokens& s) {
  Counts c;
  for (int n = 1; n <= kMaxN; ++n)
    for (std::size_t i = 0; i + std::size_t(n) <= s.size(); ++i) ++c[Tokens(s.begin() + long(i), s.begin() + long(i) + n)];
  return c;
}

struct TfIdf {
  std::map<Tokens, double> vec[kMaxN];
  double norm[kMaxN] = {0, 0, 0, 0};
  int length = 0;  // bigram count, as in the reference CIDEr-D code
};

TfIdf tfidf(const Counts& counts, const CorpusStats& stats) {
  TfIdf v;
  const double ref_len = stats.log_documents();
  for (const auto& [g, tf] : counts) {
    const int n = int(g.size()) - 1;
    const double df = std::log(std::max(1.0, double(stats.frequency(g))));
    const double w = double(tf) * (ref_len - df);
    v.vec[n][g] = w;
    v.norm[n] += w * w;
    if (n == 1) v.length += tf;
  }
  for (double& x : v.norm) x = std::sqrt(x);
  return v;
}

}  // namespace

CorpusStats::CorpusStats(const std::vector<std::vector<Tokens>>& documents) : documents_(int(documents.size())) {
  for (const auto& refs : documents) {
    std::set<Tokens> seen;
    for (const auto& r : refs)
      for (const auto& [g, c] : ngram_counts(r)) seen.insert(g);
    for (const auto& g : seen) ++df_[g];
  }
}

int CorpusStats::frequency(const Tokens& ngram) const {
  auto it = df_.find(ngram);
  return it == df_.end() ? 0 : it->second;
}

double CorpusStats::log_documents() const { return documents_ > 0 ? std::log(double(documents_)) : 0.0; }

double cider(const Tokens& candidate, const std::vector<Tokens>& refs, const CorpusStats& stats) {
  if (refs.empty()) throw ContractViolation("cider needs at least one reference");
  if (candidate.empty()) return 0.0;
  const TfIdf hyp = tfidf(ngram_counts(candidate), stats);
  double total = 0.0;
  for (const auto& r : refs) {
    const TfIdf ref = tfidf(ngram_counts(r), stats);
    const double delta = double(hyp.length - ref.length);
    const double penalty = std::exp(-(delta * delta) / (2 * kSigma * kSigma));
    for (int n = 0; n < kMaxN; ++n) {
      double val = 0.0;
      for (const auto& [g, w] : hyp.vec[n]) {
        auto it = ref.vec[n].find(g);
        if (it != ref.vec[n].end()) val += std::min(w, it->second) * it->second;
      }
      if (hyp.norm[n] != 0 && ref.norm[n] != 0) val /= hyp.norm[n] * ref.norm[n];
      total += val * penalty;
    }
  }
  return std::clamp(total / kMaxN / double(refs.size()) * 10.0, 0.0, 10.0);
}

namespace {

double meteor_single(const Tokens& c, const Tokens& r) {
  if (c.empty() || r.empty()) return 0.0;
  std::vector<char> cu(c.size(), 0), ru(r.size(), 0);
  std::vector<std::pair<int, int>> pairs;
  for (;;) {
    int bi = -1, bj = -1, blen = 0;
    for (int i = 0; i < int(c.size()); ++i)
      for (int j = 0; j < int(r.size()); ++j) {
        int len = 0;
        while (i + len < int(c.size()) && j + len < int(r.size()) && !cu[std::size_t(i + len)] &&
               !ru[std::size_t(j + len)] && c[std::size_t(i + len)] == r[std::size_t(j + len)])
          ++len;
        if (len > blen) {
          blen = len;
          bi = i;
          bj = j;
        }
      }
    if (blen == 0) break;
    for (int d = 0; d < blen; ++d) {
      cu[std::size_t(bi + d)] = ru[std::size_t(bj + d)] = 1;
      pairs.emplace_back(bi + d, bj + d);
    }
  }
  const double m = double(pairs.size());
  if (m == 0) return 0.0;
  std::sort(pairs.begin(), pairs.end());
  int chunks = 1;
  for (std::size_t k = 1; k < pairs.size(); ++k)
    if (pairs[k].first != pairs[k - 1].first + 1 || pairs[k].second != pairs[k - 1].second + 1) ++chunks;
  const double p = m / double(c.size()), rc = m / double(r.size());
  const double fmean = 10 * p * rc / (rc + 9 * p);
  const double frag = double(chunks) / m;
  return fmean * (1 - 0.5 * frag * frag * frag);
}

}  // namespace

double meteor_exact(const Tokens& candidate, const std::vector<Tokens>& refs) {
  double best = 0.0;
  for (const auto& r : refs) best = std::max(best, meteor_single(candidate, r));
  return best;
}

Tokens content_tokens(std::span<const int> tokens, int pad, int begin, int end) {
  Tokens out;
  for (int t : tokens)
    if (t != pad && t != begin && t != end) out.push_back(t);
  return out;
}

double refer_back_accuracy(std::span<const ReferBackItem> items, const std::function<int(const ReferBackItem&)>& judge,
                           std::uint64_t judge_hash, std::uint64_t model_hash) {
  if (judge_hash == model_hash) throw ContractViolation("refer-back judge shares the checkpoint under test");
  if (items.empty()) throw ContractViolation("refer_back_accuracy of no items");
  long hits = 0;
  for (const auto& it : items) hits += judge(it) == it.object;
  return double(hits) / double(items.size());
}

nlohmann::json EvalReport::to_json() const {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  nlohmann::json prj = nlohmann::json::object();
  for (const auto& [k, v] : pr) prj[k] = v;
  return {{"split", split},   {"n", n},           {"miou", opt(miou)},
          {"oiou", opt(oiou)}, {"pr", prj},        {"cider", opt(cider)},
          {"meteor_exact", opt(meteor_exact)}, {"rb_acc", opt(rb_acc)}, {"rec_acc", opt(rec_acc)},
          {"sel_acc", opt(sel_acc)},   {"reg_acc", opt(reg_acc)},       {"n_reg", n_reg}};
}

}  // namespace refer::metrics
