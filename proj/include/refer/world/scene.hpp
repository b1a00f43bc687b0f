#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace refer::world {

enum class Shape { circle, square, triangle };
enum class Color { red, green, blue, yellow };
enum class SizeClass { small, large };
enum class Split { train, val, test };
enum class Provenance { real, pseudo };

std::string_view to_string(Shape s);
std::string_view to_string(Color c);
std::string_view to_string(SizeClass s);
std::string_view to_string(Split s);
std::string_view to_string(Provenance p);

std::optional<Shape> parse_shape(std::string_view s);
std::optional<Color> parse_color(std::string_view s);
std::optional<SizeClass> parse_size(std::string_view s);
std::optional<Split> parse_split(std::string_view s);
std::optional<Provenance> parse_provenance(std::string_view s);

/// Half-open pixel box [x0, x1) x [y0, y1).
struct BBox {
  int x0 = 0;
  int y0 = 0;
  int x1 = 0;
  int y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  long area() const { return x1 > x0 && y1 > y0 ? long(x1 - x0) * (y1 - y0) : 0L; }
  bool empty() const { return area() == 0; }
  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Row-major binary grid.
class Mask {
 public:
  Mask() = default;
  Mask(int width, int height);

  int width() const { return width_; }
  int height() const { return height_; }
  bool at(int x, int y) const { return cells_[std::size_t(y) * width_ + x] != 0; }
  void set(int x, int y, bool v) { cells_[std::size_t(y) * width_ + x] = v ? 1 : 0; }
  const std::vector<std::uint8_t>& cells() const { return cells_; }
  std::vector<std::uint8_t>& cells() { return cells_; }

  long count() const;
  /// Tight half-open box of the true cells; empty box when the mask is empty.
  BBox bounding_box() const;

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> cells_;
};

struct SceneObject {
  int id = 0;
  Shape shape = Shape::circle;
  Color color = Color::red;
  SizeClass size_class = SizeClass::small;
  BBox bbox;
  Mask mask;
  long area = 0;
};

struct Expression {
  int object_id = 0;
  std::vector<int> tokens;  // begin ... end
  std::string text;
  double weight = 1.0;
  Provenance provenance = Provenance::real;
};

/// Interleaved 8-bit RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;
};

struct Scene {
  std::string id;
  int width = 64;
  int height = 64;
  std::vector<SceneObject> objects;
  Image image;
  Split split = Split::train;
  bool annotated = false;
  std::vector<Expression> expressions;
};

/// Paints every object's mask in its color on a black background.
Image render(const Scene& scene);

}  // namespace refer::world
