#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "refer/world/scene.hpp"
#include "refer/world/vocabulary.hpp"

namespace refer::world {

/// Which surface forms the generator may use.
///   plain        attributes, absolute location ("on the left", "second from
///                the right") and relations to other objects
///   no_location  attributes and relations only
enum class Register { plain, no_location };

std::string_view to_string(Register r);
std::optional<Register> parse_register(std::string_view s);

enum class Direction { left, right, top, bottom };
enum class Relation { left_of, right_of, above, below };

/// Attribute noun phrase: [size] [color] shape.
struct NounPhrase {
  std::optional<SizeClass> size;
  std::optional<Color> color;
  Shape shape = Shape::circle;
};

/// Parsed form of one expression. At most one clause is present.
struct ParsedExpression {
  NounPhrase head;
  std::optional<Direction> direction;  // with rank
  int rank = 1;                        // 1-based position along `direction`
  std::optional<Relation> relation;    // with `anchor`
  NounPhrase anchor;
};

/// Parses word tokens (reserved markers are skipped). nullopt if the
/// sequence is not in the grammar.
std::optional<ParsedExpression> parse_expression(const std::vector<int>& tokens,
                                                 const Vocabulary& vocab = Vocabulary::standard());

/// Words for a parsed expression, without markers.
std::vector<std::string> surface_words(const ParsedExpression& e);

/// Set of object ids the expression denotes. Empty for non-parsing or
/// unsatisfiable inputs.
std::set<int> evaluate_expression(const Scene& scene, const std::vector<int>& tokens,
                                  const Vocabulary& vocab = Vocabulary::standard());
std::set<int> evaluate_parsed(const Scene& scene, const ParsedExpression& e);

/// A ground-truth expression for object `k`: the cheapest surface form (fewest
/// attributes, then location, then relation) that denotes exactly {k}; ties
/// among equally cheap forms are broken by `rng`. Throws ContractViolation if
/// the object cannot be singled out under `reg`.
Expression gt_expression(const Scene& scene, int k, std::mt19937_64& rng,
                         Register reg = Register::plain,
                         const Vocabulary& vocab = Vocabulary::standard());

/// All minimal-cost candidates for `k` (empty if none exist).
std::vector<ParsedExpression> minimal_expressions(const Scene& scene, int k, Register reg);

}  // namespace refer::world
