#include "refer/world/grammar.hpp"

#include <algorithm>
#include <array>
#include <tuple>

#include "refer/errors.hpp"

namespace refer::world {

namespace {

constexpr std::array<std::string_view, 4> kDirections{"left", "right", "top", "bottom"};
constexpr std::array<std::string_view, 3> kOrdinals{"first", "second", "third"};

bool matches(const NounPhrase& np, const SceneObject& o) {
  if (o.shape != np.shape) return false;
  if (np.size && *np.size != o.size_class) return false;
  if (np.color && *np.color != o.color) return false;
  return true;
}

std::vector<const SceneObject*> denoted(const Scene& scene, const NounPhrase& np) {
  std::vector<const SceneObject*> out;
  for (const auto& o : scene.objects)
    if (matches(np, o)) out.push_back(&o);
  return out;
}

// Doubled centre coordinate; smaller means earlier along the direction.
int order_key(const SceneObject& o, Direction d) {
  switch (d) {
    case Direction::left: return o.bbox.x0 + o.bbox.x1;
    case Direction::right: return -(o.bbox.x0 + o.bbox.x1);
    case Direction::top: return o.bbox.y0 + o.bbox.y1;
    case Direction::bottom: return -(o.bbox.y0 + o.bbox.y1);
  }
  return 0;
}

bool related(const SceneObject& o, const SceneObject& a, Relation r) {
  switch (r) {
    case Relation::left_of: return o.bbox.x1 <= a.bbox.x0;
    case Relation::right_of: return o.bbox.x0 >= a.bbox.x1;
    case Relation::above: return o.bbox.y1 <= a.bbox.y0;
    case Relation::below: return o.bbox.y0 >= a.bbox.y1;
  }
  return false;
}

void append_np(std::vector<std::string>& out, const NounPhrase& np) {
  if (np.size) out.emplace_back(to_string(*np.size));
  if (np.color) out.emplace_back(to_string(*np.color));
  out.emplace_back(to_string(np.shape));
}

int attribute_count(const NounPhrase& np) { return int(np.size.has_value()) + int(np.color.has_value()); }

std::vector<NounPhrase> phrases_for(const SceneObject& o) {
  NounPhrase bare{std::nullopt, std::nullopt, o.shape};
  NounPhrase sized{o.size_class, std::nullopt, o.shape};
  NounPhrase colored{std::nullopt, o.color, o.shape};
  NounPhrase full{o.size_class, o.color, o.shape};
  return {bare, sized, colored, full};
}

}  // namespace

std::string_view to_string(Register r) { return r == Register::plain ? "plain" : "no_location"; }

std::optional<Register> parse_register(std::string_view s) {
  if (s == "plain") return Register::plain;
  if (s == "no_location") return Register::no_location;
  return std::nullopt;
}

std::optional<ParsedExpression> parse_expression(const std::vector<int>& tokens,
                                                 const Vocabulary& vocab) {
  std::vector<std::string_view> w;
  std::size_t start = (!tokens.empty() && tokens[0] == vocab.begin()) ? 1 : 0;
  for (std::size_t i = start; i < tokens.size(); ++i) {
    int t = tokens[i];
    if (t == vocab.end()) break;
    if (t < 0 || t >= vocab.size() || vocab.is_reserved(t)) return std::nullopt;
    w.push_back(vocab.token(t));
  }

  std::size_t i = 0;
  auto parse_np = [&](NounPhrase& np) -> bool {
    if (i < w.size()) {
      if (auto s = parse_size(w[i])) np.size = s, ++i;
    }
    if (i < w.size()) {
      if (auto c = parse_color(w[i])) np.color = c, ++i;
    }
    if (i >= w.size()) return false;
    auto shape = parse_shape(w[i]);
    if (!shape) return false;
    np.shape = *shape;
    ++i;
    return true;
  };
  auto expect = [&](std::string_view word) {
    if (i < w.size() && w[i] == word) {
      ++i;
      return true;
    }
    return false;
  };
  auto parse_direction = [&]() -> std::optional<Direction> {
    if (i >= w.size()) return std::nullopt;
    for (std::size_t d = 0; d < kDirections.size(); ++d) {
      if (w[i] == kDirections[d]) {
        ++i;
        return static_cast<Direction>(d);
      }
    }
    return std::nullopt;
  };

  ParsedExpression e;
  if (!parse_np(e.head)) return std::nullopt;
  if (i == w.size()) return e;

  if (expect("on")) {
    if (!expect("the")) return std::nullopt;
    e.direction = parse_direction();
    if (!e.direction) return std::nullopt;
    e.rank = 1;
  } else if (auto ord = std::find(kOrdinals.begin(), kOrdinals.end(), w[i]); ord != kOrdinals.end()) {
    ++i;
    e.rank = int(ord - kOrdinals.begin()) + 1;
    if (!expect("from") || !expect("the")) return std::nullopt;
    e.direction = parse_direction();
    if (!e.direction) return std::nullopt;
  } else if (w[i] == "left" || w[i] == "right") {
    e.relation = w[i] == "left" ? Relation::left_of : Relation::right_of;
    ++i;
    if (!expect("of") || !expect("the") || !parse_np(e.anchor)) return std::nullopt;
  } else if (w[i] == "above" || w[i] == "below") {
    e.relation = w[i] == "above" ? Relation::above : Relation::below;
    ++i;
    if (!expect("the") || !parse_np(e.anchor)) return std::nullopt;
  } else {
    return std::nullopt;
  }
  if (i != w.size()) return std::nullopt;
  return e;
}

std::vector<std::string> surface_words(const ParsedExpression& e) {
  std::vector<std::string> out;
  append_np(out, e.head);
  if (e.direction) {
    if (e.rank == 1) {
      out.emplace_back("on");
    } else {
      out.emplace_back(kOrdinals[std::size_t(e.rank - 1)]);
      out.emplace_back("from");
    }
    out.emplace_back("the");
    out.emplace_back(kDirections[std::size_t(*e.direction)]);
  } else if (e.relation) {
    switch (*e.relation) {
      case Relation::left_of: out.emplace_back("left"), out.emplace_back("of"); break;
      case Relation::right_of: out.emplace_back("right"), out.emplace_back("of"); break;
      case Relation::above: out.emplace_back("above"); break;
      case Relation::below: out.emplace_back("below"); break;
    }
    out.emplace_back("the");
    append_np(out, e.anchor);
  }
  return out;
}

std::set<int> evaluate_parsed(const Scene& scene, const ParsedExpression& e) {
  auto candidates = denoted(scene, e.head);
  std::set<int> out;
  if (e.direction) {
    for (const auto* o : candidates) {
      int before = 0;
      int key = order_key(*o, *e.direction);
      for (const auto* other : candidates)
        if (order_key(*other, *e.direction) < key) ++before;
      if (before == e.rank - 1) out.insert(o->id);
    }
  } else if (e.relation) {
    auto anchors = denoted(scene, e.anchor);
    for (const auto* o : candidates) {
      for (const auto* a : anchors) {
        if (a->id != o->id && related(*o, *a, *e.relation)) {
          out.insert(o->id);
          break;
        }
      }
    }
  } else {
    for (const auto* o : candidates) out.insert(o->id);
  }
  return out;
}

std::set<int> evaluate_expression(const Scene& scene, const std::vector<int>& tokens,
                                  const Vocabulary& vocab) {
  auto parsed = parse_expression(tokens, vocab);
  if (!parsed) return {};
  return evaluate_parsed(scene, *parsed);
}

std::vector<ParsedExpression> minimal_expressions(const Scene& scene, int k, Register reg) {
  if (k < 0 || k >= int(scene.objects.size()))
    throw ContractViolation("object index out of range");
  const auto& target = scene.objects[std::size_t(k)];
  const std::set<int> want{k};

  // (level, attribute count, ordinal) ordering; lower is cheaper.
  using Cost = std::tuple<int, int, int>;
  std::vector<std::pair<Cost, ParsedExpression>> found;
  auto consider = [&](const ParsedExpression& e, Cost cost) {
    if (evaluate_parsed(scene, e) == want) found.emplace_back(cost, e);
  };

  for (const auto& np : phrases_for(target)) {
    ParsedExpression e;
    e.head = np;
    consider(e, {0, attribute_count(np), 0});
  }
  if (found.empty() && reg == Register::plain) {
    for (const auto& np : phrases_for(target)) {
      for (std::size_t d = 0; d < kDirections.size(); ++d) {
        for (int rank = 1; rank <= 3; ++rank) {
          ParsedExpression e;
          e.head = np;
          e.direction = static_cast<Direction>(d);
          e.rank = rank;
          consider(e, {1, attribute_count(np), rank > 1 ? 1 : 0});
        }
      }
    }
  }
  if (found.empty()) {
    for (const auto& np : phrases_for(target)) {
      for (const auto& anchor_obj : scene.objects) {
        if (anchor_obj.id == k) continue;
        // Anchors are named by their cheapest unique phrase.
        std::optional<NounPhrase> anchor;
        for (const auto& cand : phrases_for(anchor_obj)) {
          if (denoted(scene, cand).size() == 1) {
            anchor = cand;
            break;
          }
        }
        if (!anchor) continue;
        for (int r = 0; r < 4; ++r) {
          ParsedExpression e;
          e.head = np;
          e.relation = static_cast<Relation>(r);
          e.anchor = *anchor;
          consider(e, {2, attribute_count(np) + attribute_count(*anchor), 0});
        }
      }
    }
  }
  if (found.empty()) return {};
  auto best = std::min_element(found.begin(), found.end(),
                               [](const auto& a, const auto& b) { return a.first < b.first; })
                  ->first;
  std::vector<ParsedExpression> out;
  for (auto& [cost, e] : found)
    if (cost == best) out.push_back(std::move(e));
  return out;
}

Expression gt_expression(const Scene& scene, int k, std::mt19937_64& rng, Register reg,
                         const Vocabulary& vocab) {
  auto options = minimal_expressions(scene, k, reg);
  if (options.empty())
    throw ContractViolation("object " + std::to_string(k) + " of scene " + scene.id +
                            " cannot be singled out by the grammar");
  std::uniform_int_distribution<std::size_t> pick(0, options.size() - 1);
  const auto& chosen = options[pick(rng)];

  Expression expr;
  expr.object_id = k;
  expr.tokens.push_back(vocab.begin());
  for (const auto& w : surface_words(chosen)) {
    expr.tokens.push_back(vocab.id(w));
    if (!expr.text.empty()) expr.text += ' ';
    expr.text += w;
  }
  expr.tokens.push_back(vocab.end());
  expr.weight = 1.0;
  expr.provenance = Provenance::real;
  return expr;
}

}  // namespace refer::world
