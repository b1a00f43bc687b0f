#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "refer/errors.hpp"
#include "refer/world/dataset.hpp"
#include "refer/world/grammar.hpp"
#include "refer/world/rle.hpp"
#include "test_scenes.hpp"

using namespace refer;
using namespace refer::world;
using refer::testing::make_object;
using refer::testing::make_scene;

TEST_CASE("generate_dataset is deterministic for a fixed seed") {
  GenerationParams p;
  p.annotated_fraction = 0.5;
  auto a = generate_dataset(10, p, 7);
  auto b = generate_dataset(10, p, 7);
  CHECK(serialize_dataset(a) == serialize_dataset(b));
  auto c = generate_dataset(10, p, 8);
  CHECK(serialize_dataset(a) != serialize_dataset(c));
}

TEST_CASE("annotated fraction zero emits no expressions") {
  GenerationParams p;
  p.annotated_fraction = 0.0;
  p.train_fraction = 1.0;
  p.val_fraction = 0.0;
  auto scenes = generate_dataset(20, p, 3);
  CHECK(count_expressions(scenes) == 0);
  for (const auto& s : scenes) CHECK_FALSE(s.annotated);
}

TEST_CASE("annotated fraction selects exactly that share of train scenes") {
  GenerationParams p;
  p.annotated_fraction = 0.5;
  auto scenes = generate_dataset(40, p, 11);
  int train = 0, annotated = 0;
  for (const auto& s : scenes) {
    if (s.split != Split::train) {
      CHECK(s.annotated);
      continue;
    }
    ++train;
    if (s.annotated) {
      ++annotated;
      for (const auto& o : s.objects) {
        bool has = std::any_of(s.expressions.begin(), s.expressions.end(),
                               [&](const Expression& e) { return e.object_id == o.id; });
        CHECK(has);
      }
    } else {
      CHECK(s.expressions.empty());
    }
  }
  CHECK(train == 32);
  CHECK(annotated == 16);
}

TEST_CASE("object counts stay within [2, N_max]") {
  GenerationParams p;
  p.max_objects = 6;
  auto scenes = generate_dataset(100, p, 5);
  for (const auto& s : scenes) {
    CHECK(s.objects.size() >= 2);
    CHECK(s.objects.size() <= 6);
  }
}

TEST_CASE("invalid generation parameters are rejected") {
  GenerationParams p;
  p.annotated_fraction = 1.5;
  CHECK_THROWS_AS(generate_dataset(5, p, 1), ConfigError);
  p.annotated_fraction = -0.1;
  CHECK_THROWS_AS(generate_dataset(5, p, 1), ConfigError);
  p = GenerationParams{};
  p.max_objects = 1;
  CHECK_THROWS_AS(generate_dataset(5, p, 1), ConfigError);
  CHECK_THROWS_AS(generate_dataset(0, GenerationParams{}, 1), ConfigError);
}

TEST_CASE("scene invariants hold over a generated set") {
  GenerationParams p;
  auto scenes = generate_dataset(60, p, 21);
  for (const auto& s : scenes) {
    std::vector<int> owner(std::size_t(s.width * s.height), -1);
    for (std::size_t k = 0; k < s.objects.size(); ++k) {
      const auto& o = s.objects[k];
      CHECK(o.id == int(k));
      CHECK(o.area == o.mask.count());
      CHECK(o.bbox == o.mask.bounding_box());
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
          if (o.mask.at(x, y)) {
            CHECK(owner[std::size_t(y * s.width + x)] == -1);
            owner[std::size_t(y * s.width + x)] = o.id;
          }
    }
  }
}

TEST_CASE("every ground-truth expression denotes exactly its object") {
  for (auto reg : {Register::plain, Register::no_location}) {
    GenerationParams p;
    p.annotated_fraction = 1.0;
    p.reg = reg;
    auto scenes = generate_dataset(150, p, 99);
    std::size_t checked = 0;
    for (const auto& s : scenes) {
      for (const auto& e : s.expressions) {
        CHECK(e.tokens.front() == Vocabulary::kBegin);
        CHECK(e.tokens.back() == Vocabulary::kEnd);
        CHECK(e.tokens.size() <= 12);
        CHECK(e.weight == 1.0);
        CHECK(evaluate_expression(s, e.tokens) == std::set<int>{e.object_id});
        if (reg == Register::no_location) {
          auto words = Vocabulary::standard().words(e.tokens);
          CHECK(std::find(words.begin(), words.end(), "on") == words.end());
          CHECK(std::find(words.begin(), words.end(), "from") == words.end());
        }
        ++checked;
      }
      // Fresh draws with other rng states also single the object out.
      std::mt19937_64 rng(7);
      for (const auto& o : s.objects) {
        auto e = gt_expression(s, o.id, rng, reg);
        CHECK(evaluate_expression(s, e.tokens) == std::set<int>{o.id});
      }
    }
    CHECK(checked > 300);
  }
}

TEST_CASE("gt_expression picks color when color separates") {
  auto s = make_scene({make_object(0, Shape::circle, Color::red, SizeClass::small, {4, 4, 14, 14}),
                       make_object(1, Shape::circle, Color::blue, SizeClass::small, {30, 4, 40, 14})});
  std::mt19937_64 rng(1);
  auto e = gt_expression(s, 0, rng);
  CHECK(e.text == "red circle");
  CHECK(evaluate_expression(s, e.tokens) == std::set<int>{0});
}

TEST_CASE("gt_expression on a single-object scene is the bare shape") {
  auto s = make_scene({make_object(0, Shape::circle, Color::green, SizeClass::large, {4, 4, 24, 24})});
  std::mt19937_64 rng(1);
  auto e = gt_expression(s, 0, rng);
  CHECK(e.text == "circle");
  CHECK(evaluate_expression(s, e.tokens) == std::set<int>{0});
}

TEST_CASE("identical objects differing in x need a location clause") {
  auto s = make_scene({make_object(0, Shape::circle, Color::red, SizeClass::small, {4, 20, 14, 30}),
                       make_object(1, Shape::circle, Color::red, SizeClass::small, {40, 20, 50, 30})});
  for (int k = 0; k < 2; ++k) {
    std::mt19937_64 rng{std::uint64_t(k)};
    auto e = gt_expression(s, k, rng);
    auto words = Vocabulary::standard().words(e.tokens);
    bool spatial = std::find(words.begin(), words.end(), "left") != words.end() ||
                   std::find(words.begin(), words.end(), "right") != words.end();
    CHECK(spatial);
    CHECK(evaluate_expression(s, e.tokens) == std::set<int>{k});
  }
  // Three in a row: the middle one needs an ordinal.
  auto t = make_scene({make_object(0, Shape::square, Color::red, SizeClass::small, {2, 20, 12, 30}),
                       make_object(1, Shape::square, Color::red, SizeClass::small, {24, 20, 34, 30}),
                       make_object(2, Shape::square, Color::red, SizeClass::small, {46, 20, 56, 30})});
  std::mt19937_64 rng(3);
  auto e = gt_expression(t, 1, rng);
  CHECK(e.text.find("second from the") != std::string::npos);
  CHECK(evaluate_expression(t, e.tokens) == std::set<int>{1});
}

TEST_CASE("evaluate_expression examples") {
  const auto& v = Vocabulary::standard();
  auto s = make_scene({make_object(0, Shape::square, Color::blue, SizeClass::small, {0, 0, 8, 8}),
                       make_object(1, Shape::circle, Color::blue, SizeClass::small, {10, 0, 18, 8}),
                       make_object(2, Shape::triangle, Color::yellow, SizeClass::large, {20, 0, 36, 16}),
                       make_object(3, Shape::circle, Color::red, SizeClass::small, {40, 0, 48, 8}),
                       make_object(4, Shape::circle, Color::yellow, SizeClass::large, {0, 30, 20, 50})});
  CHECK(evaluate_expression(s, v.encode("red circle")) == std::set<int>{3});
  CHECK(evaluate_expression(s, v.encode("green square")).empty());
  CHECK(evaluate_expression(s, v.encode("circle")) == std::set<int>{1, 3, 4});
  CHECK(evaluate_expression(s, v.encode("small circle on the left")) == std::set<int>{1});
  CHECK(evaluate_expression(s, v.encode("circle second from the left")) == std::set<int>{1});
  CHECK(evaluate_expression(s, v.encode("circle on the bottom")) == std::set<int>{4});
  CHECK(evaluate_expression(s, v.encode("circle below the blue square")) == std::set<int>{4});
  CHECK(evaluate_expression(s, v.encode("circle left of the yellow triangle")) == std::set<int>{1, 4});
  CHECK(evaluate_expression(s, v.encode("small circle right of the yellow triangle")) ==
        std::set<int>{3});
  // Non-parsing inputs denote nothing.
  CHECK(evaluate_expression(s, v.encode("red")).empty());
  CHECK(evaluate_expression(s, v.encode("circle on the")).empty());
  CHECK(evaluate_expression(s, v.encode("circle circle")).empty());
  CHECK(evaluate_expression(s, {v.begin(), v.pad(), v.end()}).empty());
  CHECK(evaluate_expression(s, {v.begin(), 999, v.end()}).empty());
  CHECK(evaluate_expression(s, {}).empty());
}

TEST_CASE("evaluate_expression is invariant to object relabeling") {
  GenerationParams p;
  p.annotated_fraction = 1.0;
  auto scenes = generate_dataset(30, p, 17);
  std::mt19937_64 rng(4);
  for (const auto& s : scenes) {
    std::vector<int> perm(s.objects.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    Scene t = s;
    for (std::size_t i = 0; i < perm.size(); ++i) {
      t.objects[std::size_t(perm[i])] = s.objects[i];
      t.objects[std::size_t(perm[i])].id = perm[i];
    }
    for (const auto& e : s.expressions) {
      auto a = evaluate_expression(s, e.tokens);
      std::set<int> mapped;
      for (int id : a) mapped.insert(perm[std::size_t(id)]);
      CHECK(evaluate_expression(t, e.tokens) == mapped);
    }
  }
}

TEST_CASE("RLE examples") {
  Mask zeros(4, 4);
  CHECK(encode_rle(zeros) == std::vector<std::int64_t>{16});
  Mask ones(2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) ones.set(x, y, true);
  CHECK(encode_rle(ones) == std::vector<std::int64_t>{0, 4});
  CHECK_THROWS_AS(decode_rle({3, 4}, 2, 2), FormatError);
  CHECK_THROWS_AS(decode_rle({4}, 0, 2), FormatError);
}

TEST_CASE("RLE round trip over random masks") {
  std::mt19937_64 rng(123);
  std::uniform_int_distribution<int> dim(1, 20);
  std::uniform_real_distribution<double> density(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    Mask m(dim(rng), dim(rng));
    std::bernoulli_distribution on(density(rng));
    for (auto& c : m.cells()) c = on(rng) ? 1 : 0;
    auto runs = encode_rle(m);
    CHECK(std::accumulate(runs.begin(), runs.end(), std::int64_t{0}) == std::int64_t(m.width()) * m.height());
    CHECK(decode_rle(runs, m.width(), m.height()) == m);
  }
}

TEST_CASE("dataset JSON lines round trip") {
  GenerationParams p;
  auto scenes = generate_dataset(12, p, 31);
  auto text = serialize_dataset(scenes);
  auto path = std::filesystem::temp_directory_path() / "refer_world_roundtrip.jsonl";
  write_dataset(path, scenes);
  auto back = read_dataset(path);
  REQUIRE(back.size() == scenes.size());
  CHECK(serialize_dataset(back) == text);
  for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i].image.rgb == scenes[i].image.rgb);
  std::filesystem::remove(path);

  auto j = nlohmann::json::parse(text.substr(0, text.find('\n')));
  for (const char* key : {"id", "width", "height", "split", "annotated", "objects", "expressions"})
    CHECK(j.contains(key));
  for (const char* key : {"id", "shape", "color", "size_class", "bbox", "area", "mask_rle"})
    CHECK(j["objects"][0].contains(key));
}

TEST_CASE("vocabulary file round trip and reserved markers") {
  const auto& v = Vocabulary::standard();
  CHECK(v.pad() != v.begin());
  CHECK(v.begin() != v.end());
  auto back = Vocabulary::from_json(v.to_json());
  CHECK(back.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(back.token(i) == v.token(i));
  CHECK_THROWS_AS(v.id("zebra"), InputError);
}

TEST_CASE("downsampled masks keep every object") {
  GenerationParams p;
  auto scenes = generate_dataset(40, p, 2);
  for (const auto& s : scenes)
    for (const auto& o : s.objects) CHECK(downsample_mask(o.mask, 16, 16).count() > 0);
}

TEST_CASE("png export has a valid signature and header") {
  GenerationParams p;
  auto s = generate_dataset(1, p, 1)[0];
  auto png = encode_png(s.image, 2);
  REQUIRE(png.size() > 33);
  CHECK(png[0] == 0x89);
  CHECK(png[1] == 'P');
  CHECK(std::string(png.begin() + 12, png.begin() + 16) == "IHDR");
  std::uint32_t w = (std::uint32_t(png[16]) << 24) | (png[17] << 16) | (png[18] << 8) | png[19];
  CHECK(w == 128);
}
