#include "refer/world/dataset.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "refer/errors.hpp"
#include "refer/world/rle.hpp"

namespace refer::world {

namespace {

std::mt19937_64 scene_stream(std::uint64_t seed, int index) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(index), 0x5ce7eu};
  return std::mt19937_64(seq);
}

Mask rasterize(Shape shape, int cx, int cy, int r, int width, int height) {
  Mask m(width, height);
  for (int y = std::max(0, cy - r - 1); y < std::min(height, cy + r + 1); ++y) {
    for (int x = std::max(0, cx - r - 1); x < std::min(width, cx + r + 1); ++x) {
      const double px = x + 0.5 - cx;
      const double py = y + 0.5 - cy;
      bool inside = false;
      switch (shape) {
        case Shape::circle: inside = px * px + py * py <= double(r) * r; break;
        case Shape::square: inside = x >= cx - r && x < cx + r && y >= cy - r && y < cy + r; break;
        case Shape::triangle: {
          if (y < cy - r || y >= cy + r) break;
          const double t = (y + 0.5 - (cy - r)) / (2.0 * r);
          inside = std::abs(px) <= t * r;
          break;
        }
      }
      if (inside) m.set(x, y, true);
    }
  }
  return m;
}

bool separated(const BBox& a, const BBox& b, int gap) {
  return a.x1 + gap <= b.x0 || b.x1 + gap <= a.x0 || a.y1 + gap <= b.y0 || b.y1 + gap <= a.y0;
}

std::vector<SceneObject> place_objects(const GenerationParams& p, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count_dist(p.min_objects, p.max_objects);
  std::uniform_int_distribution<int> shape_dist(0, 2);
  std::uniform_int_distribution<int> color_dist(0, 3);
  std::bernoulli_distribution large_dist(p.large_probability);
  const int wanted = count_dist(rng);

  std::vector<SceneObject> objects;
  for (int attempt = 0; attempt < 400 && int(objects.size()) < wanted; ++attempt) {
    SceneObject o;
    o.shape = static_cast<Shape>(shape_dist(rng));
    o.color = static_cast<Color>(color_dist(rng));
    o.size_class = large_dist(rng) ? SizeClass::large : SizeClass::small;
    const bool large = o.size_class == SizeClass::large;
    std::uniform_int_distribution<int> radius_dist(large ? p.large_radius_min : p.small_radius_min,
                                                   large ? p.large_radius_max : p.small_radius_max);
    const int r = radius_dist(rng);
    if (2 * r >= p.width || 2 * r >= p.height) continue;
    std::uniform_int_distribution<int> cx_dist(r, p.width - r);
    std::uniform_int_distribution<int> cy_dist(r, p.height - r);
    const int cx = cx_dist(rng);
    const int cy = cy_dist(rng);
    o.mask = rasterize(o.shape, cx, cy, r, p.width, p.height);
    o.bbox = o.mask.bounding_box();
    o.area = o.mask.count();
    if (o.area == 0) continue;
    bool ok = std::all_of(objects.begin(), objects.end(),
                          [&](const SceneObject& other) { return separated(o.bbox, other.bbox, p.min_gap); });
    if (!ok) continue;
    o.id = int(objects.size());
    objects.push_back(std::move(o));
  }
  return objects;
}

}  // namespace

void GenerationParams::validate() const {
  if (annotated_fraction < 0.0 || annotated_fraction > 1.0)
    throw ConfigError("annotated_fraction must lie in [0, 1]");
  if (max_objects < 2) throw ConfigError("max_objects (N_max) must be at least 2");
  if (min_objects < 1 || min_objects > max_objects)
    throw ConfigError("min_objects must lie in [1, max_objects]");
  if (width <= 0 || height <= 0) throw ConfigError("image dimensions must be positive");
  if (train_fraction < 0.0 || val_fraction < 0.0 || train_fraction + val_fraction > 1.0)
    throw ConfigError("split fractions must be non-negative and sum to at most 1");
  if (small_radius_min < 1 || small_radius_min > small_radius_max ||
      large_radius_min < 1 || large_radius_min > large_radius_max)
    throw ConfigError("radius ranges must be positive and ordered");
  if (large_probability < 0.0 || large_probability > 1.0)
    throw ConfigError("large_probability must lie in [0, 1]");
  if (expressions_per_object < 1) throw ConfigError("expressions_per_object must be positive");
  if (min_gap < 0) throw ConfigError("min_gap must be non-negative");
}

nlohmann::json GenerationParams::to_json() const {
  return {{"width", width},
          {"height", height},
          {"min_objects", min_objects},
          {"max_objects", max_objects},
          {"annotated_fraction", annotated_fraction},
          {"train_fraction", train_fraction},
          {"val_fraction", val_fraction},
          {"small_radius", {small_radius_min, small_radius_max}},
          {"large_radius", {large_radius_min, large_radius_max}},
          {"large_probability", large_probability},
          {"min_gap", min_gap},
          {"expressions_per_object", expressions_per_object},
          {"register", std::string(to_string(reg))}};
}

GenerationParams GenerationParams::from_json(const nlohmann::json& j) {
  GenerationParams p;
  p.width = j.value("width", p.width);
  p.height = j.value("height", p.height);
  p.min_objects = j.value("min_objects", p.min_objects);
  p.max_objects = j.value("max_objects", p.max_objects);
  p.annotated_fraction = j.value("annotated_fraction", p.annotated_fraction);
  p.train_fraction = j.value("train_fraction", p.train_fraction);
  p.val_fraction = j.value("val_fraction", p.val_fraction);
  if (j.contains("small_radius")) {
    p.small_radius_min = j["small_radius"].at(0).get<int>();
    p.small_radius_max = j["small_radius"].at(1).get<int>();
  }
  if (j.contains("large_radius")) {
    p.large_radius_min = j["large_radius"].at(0).get<int>();
    p.large_radius_max = j["large_radius"].at(1).get<int>();
  }
  p.large_probability = j.value("large_probability", p.large_probability);
  p.min_gap = j.value("min_gap", p.min_gap);
  p.expressions_per_object = j.value("expressions_per_object", p.expressions_per_object);
  if (j.contains("register")) {
    auto r = parse_register(j["register"].get<std::string>());
    if (!r) throw ConfigError("unknown register " + j["register"].dump());
    p.reg = *r;
  }
  p.validate();
  return p;
}

Scene generate_scene(const GenerationParams& params, std::uint64_t seed, int index, Split split,
                     bool annotated) {
  auto rng = scene_stream(seed, index);
  Scene scene;
  char id[32];
  std::snprintf(id, sizeof id, "s%05d", index);
  scene.id = id;
  scene.width = params.width;
  scene.height = params.height;
  scene.split = split;
  scene.annotated = annotated;

  for (int attempt = 0;; ++attempt) {
    if (attempt > 1000) throw ConfigError("cannot place objects with the given size parameters");
    scene.objects = place_objects(params, rng);
    if (int(scene.objects.size()) < params.min_objects) continue;
    bool distinguishable = true;
    for (std::size_t k = 0; k < scene.objects.size() && distinguishable; ++k)
      distinguishable = !minimal_expressions(scene, int(k), params.reg).empty();
    if (distinguishable) break;
  }
  scene.image = render(scene);

  if (annotated) {
    for (const auto& obj : scene.objects) {
      std::vector<std::vector<int>> seen;
      for (int a = 0; a < params.expressions_per_object; ++a) {
        auto e = gt_expression(scene, obj.id, rng, params.reg);
        if (std::find(seen.begin(), seen.end(), e.tokens) != seen.end()) continue;
        seen.push_back(e.tokens);
        scene.expressions.push_back(std::move(e));
      }
    }
  }
  return scene;
}

std::vector<Scene> generate_dataset(int n_scenes, const GenerationParams& params, std::uint64_t seed) {
  if (n_scenes <= 0) throw ConfigError("n_scenes must be positive");
  params.validate();
  const int n_train = int(std::lround(params.train_fraction * n_scenes));
  const int n_val = std::min(n_scenes - n_train, int(std::lround(params.val_fraction * n_scenes)));
  const int n_annotated = int(std::lround(params.annotated_fraction * n_train));

  std::vector<Scene> scenes;
  scenes.reserve(std::size_t(n_scenes));
  for (int i = 0; i < n_scenes; ++i) {
    Split split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
    bool annotated = split != Split::train || i < n_annotated;
    scenes.push_back(generate_scene(params, seed, i, split, annotated));
  }
  return scenes;
}

std::size_t count_expressions(std::span<const Scene> scenes) {
  std::size_t n = 0;
  for (const auto& s : scenes) n += s.expressions.size();
  return n;
}

Mask downsample_mask(const Mask& mask, int grid_w, int grid_h) {
  if (grid_w <= 0 || grid_h <= 0 || mask.width() % grid_w != 0 || mask.height() % grid_h != 0)
    throw ConfigError("mask size must be a multiple of the grid size");
  const int sx = mask.width() / grid_w;
  const int sy = mask.height() / grid_h;
  const int half = (sx * sy + 1) / 2;
  Mask out(grid_w, grid_h);
  int best = 0, best_x = -1, best_y = -1;
  for (int gy = 0; gy < grid_h; ++gy) {
    for (int gx = 0; gx < grid_w; ++gx) {
      int covered = 0;
      for (int y = gy * sy; y < (gy + 1) * sy; ++y)
        for (int x = gx * sx; x < (gx + 1) * sx; ++x) covered += mask.at(x, y);
      if (covered >= half) out.set(gx, gy, true);
      if (covered > best) best = covered, best_x = gx, best_y = gy;
    }
  }
  if (best > 0 && out.count() == 0) out.set(best_x, best_y, true);
  return out;
}

nlohmann::json scene_to_json(const Scene& scene) {
  nlohmann::json objects = nlohmann::json::array();
  for (const auto& o : scene.objects) {
    objects.push_back({{"id", o.id},
                       {"shape", std::string(to_string(o.shape))},
                       {"color", std::string(to_string(o.color))},
                       {"size_class", std::string(to_string(o.size_class))},
                       {"bbox", {o.bbox.x0, o.bbox.y0, o.bbox.x1, o.bbox.y1}},
                       {"area", o.area},
                       {"mask_rle", encode_rle(o.mask)}});
  }
  nlohmann::json expressions = nlohmann::json::array();
  for (const auto& e : scene.expressions) {
    expressions.push_back({{"object_id", e.object_id},
                           {"tokens", e.tokens},
                           {"text", e.text},
                           {"weight", e.weight},
                           {"provenance", std::string(to_string(e.provenance))}});
  }
  return {{"id", scene.id},
          {"width", scene.width},
          {"height", scene.height},
          {"split", std::string(to_string(scene.split))},
          {"annotated", scene.annotated},
          {"objects", objects},
          {"expressions", expressions}};
}

Scene scene_from_json(const nlohmann::json& j) {
  try {
    Scene s;
    s.id = j.at("id").get<std::string>();
    s.width = j.at("width").get<int>();
    s.height = j.at("height").get<int>();
    auto split = parse_split(j.at("split").get<std::string>());
    if (!split) throw FormatError("unknown split in scene " + s.id);
    s.split = *split;
    s.annotated = j.at("annotated").get<bool>();
    for (const auto& jo : j.at("objects")) {
      SceneObject o;
      o.id = jo.at("id").get<int>();
      auto shape = parse_shape(jo.at("shape").get<std::string>());
      auto color = parse_color(jo.at("color").get<std::string>());
      auto size = parse_size(jo.at("size_class").get<std::string>());
      if (!shape || !color || !size) throw FormatError("bad object attributes in scene " + s.id);
      o.shape = *shape;
      o.color = *color;
      o.size_class = *size;
      const auto& b = jo.at("bbox");
      o.bbox = {b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()};
      o.area = jo.at("area").get<long>();
      o.mask = decode_rle(jo.at("mask_rle").get<std::vector<std::int64_t>>(), s.width, s.height);
      if (o.id != int(s.objects.size())) throw FormatError("object ids must be 0..n-1 in scene " + s.id);
      s.objects.push_back(std::move(o));
    }
    for (const auto& je : j.at("expressions")) {
      Expression e;
      e.object_id = je.at("object_id").get<int>();
      e.tokens = je.at("tokens").get<std::vector<int>>();
      e.text = je.at("text").get<std::string>();
      e.weight = je.at("weight").get<double>();
      auto prov = parse_provenance(je.at("provenance").get<std::string>());
      if (!prov) throw FormatError("bad provenance in scene " + s.id);
      e.provenance = *prov;
      s.expressions.push_back(std::move(e));
    }
    s.image = render(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed scene record: ") + e.what());
  }
}

std::string serialize_dataset(std::span<const Scene> scenes) {
  std::string out;
  for (const auto& s : scenes) {
    out += scene_to_json(s).dump();
    out += '\n';
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const Scene> scenes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f << serialize_dataset(scenes);
}

std::vector<Scene> read_dataset(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open dataset " + path.string());
  std::vector<Scene> scenes;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    try {
      scenes.push_back(scene_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("bad JSON line in " + path.string() + ": " + e.what());
    }
  }
  return scenes;
}

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ofstream f(path);
  if (!f) throw FormatError("cannot open " + path.string() + " for writing");
  f << vocab.to_json().dump(2) << '\n';
}

Vocabulary read_vocabulary(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open vocabulary " + path.string());
  return Vocabulary::from_json(nlohmann::json::parse(f));
}

std::vector<std::uint8_t> encode_png(const Image& image, int scale) {
  if (scale < 1) throw ConfigError("png scale must be positive");
  const std::uint32_t w = std::uint32_t(image.width * scale);
  const std::uint32_t h = std::uint32_t(image.height * scale);

  std::vector<std::uint8_t> raw;
  raw.reserve(std::size_t(h) * (w * 3 + 1));
  for (std::uint32_t y = 0; y < h; ++y) {
    raw.push_back(0);  // filter: none
    for (std::uint32_t x = 0; x < w; ++x) {
      const auto* px = &image.rgb[(std::size_t(y / scale) * image.width + x / scale) * 3];
      raw.insert(raw.end(), px, px + 3);
    }
  }
  uLongf zlen = compressBound(uLong(raw.size()));
  std::vector<std::uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), uLong(raw.size()), 6) != Z_OK)
    throw FormatError("zlib compression failed");
  z.resize(zlen);

  std::vector<std::uint8_t> png{0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
  auto put32 = [](std::vector<std::uint8_t>& v, std::uint32_t x) {
    for (int s = 24; s >= 0; s -= 8) v.push_back(std::uint8_t(x >> s));
  };
  auto chunk = [&](const char* type, const std::vector<std::uint8_t>& data) {
    put32(png, std::uint32_t(data.size()));
    std::vector<std::uint8_t> body(type, type + 4);
    body.insert(body.end(), data.begin(), data.end());
    png.insert(png.end(), body.begin(), body.end());
    put32(png, std::uint32_t(crc32(0L, body.data(), uInt(body.size()))));
  };
  std::vector<std::uint8_t> ihdr;
  put32(ihdr, w);
  put32(ihdr, h);
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB
  chunk("IHDR", ihdr);
  chunk("IDAT", z);
  chunk("IEND", {});
  return png;
}

}  // namespace refer::world
