#include "refer/world/scene.hpp"

#include <algorithm>
#include <array>

namespace refer::world {

namespace {

constexpr std::array<std::string_view, 3> kShapes{"circle", "square", "triangle"};
constexpr std::array<std::string_view, 4> kColors{"red", "green", "blue", "yellow"};
constexpr std::array<std::string_view, 2> kSizes{"small", "large"};
constexpr std::array<std::string_view, 3> kSplits{"train", "val", "test"};
constexpr std::array<std::string_view, 2> kProvenances{"real", "pseudo"};

template <typename E, std::size_t N>
std::optional<E> lookup(const std::array<std::string_view, N>& names, std::string_view s) {
  for (std::size_t i = 0; i < N; ++i)
    if (names[i] == s) return static_cast<E>(i);
  return std::nullopt;
}

constexpr std::array<std::array<std::uint8_t, 3>, 4> kPalette{{
    {220, 40, 40},
    {40, 200, 60},
    {50, 80, 230},
    {230, 210, 40},
}};

}  // namespace

std::string_view to_string(Shape s) { return kShapes[std::size_t(s)]; }
std::string_view to_string(Color c) { return kColors[std::size_t(c)]; }
std::string_view to_string(SizeClass s) { return kSizes[std::size_t(s)]; }
std::string_view to_string(Split s) { return kSplits[std::size_t(s)]; }
std::string_view to_string(Provenance p) { return kProvenances[std::size_t(p)]; }

std::optional<Shape> parse_shape(std::string_view s) { return lookup<Shape>(kShapes, s); }
std::optional<Color> parse_color(std::string_view s) { return lookup<Color>(kColors, s); }
std::optional<SizeClass> parse_size(std::string_view s) { return lookup<SizeClass>(kSizes, s); }
std::optional<Split> parse_split(std::string_view s) { return lookup<Split>(kSplits, s); }
std::optional<Provenance> parse_provenance(std::string_view s) {
  return lookup<Provenance>(kProvenances, s);
}

Mask::Mask(int width, int height)
    : width_(width), height_(height), cells_(std::size_t(width) * std::size_t(height), 0) {}

long Mask::count() const { return long(std::count(cells_.begin(), cells_.end(), std::uint8_t{1})); }

BBox Mask::bounding_box() const {
  BBox box{width_, height_, 0, 0};
  bool any = false;
  for (int y = 0; y < height_; ++y) {
    for (int x = 0; x < width_; ++x) {
      if (!at(x, y)) continue;
      any = true;
      box.x0 = std::min(box.x0, x);
      box.y0 = std::min(box.y0, y);
      box.x1 = std::max(box.x1, x + 1);
      box.y1 = std::max(box.y1, y + 1);
    }
  }
  return any ? box : BBox{};
}

Image render(const Scene& scene) {
  Image img{scene.width, scene.height,
            std::vector<std::uint8_t>(std::size_t(scene.width) * scene.height * 3, 0)};
  for (const auto& obj : scene.objects) {
    const auto& rgb = kPalette[std::size_t(obj.color)];
    for (int y = obj.bbox.y0; y < obj.bbox.y1; ++y) {
      for (int x = obj.bbox.x0; x < obj.bbox.x1; ++x) {
        if (!obj.mask.at(x, y)) continue;
        auto* px = &img.rgb[(std::size_t(y) * scene.width + x) * 3];
        px[0] = rgb[0];
        px[1] = rgb[1];
        px[2] = rgb[2];
      }
    }
  }
  return img;
}

}  // namespace refer::world
