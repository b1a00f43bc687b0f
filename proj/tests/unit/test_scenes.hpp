#pragma once

#include <vector>

#include "refer/world/scene.hpp"

namespace refer::testing {

/// Object whose mask fills its box.
inline world::SceneObject make_object(int id, world::Shape shape, world::Color color,
                                      world::SizeClass size, world::BBox box, int width = 64,
                                      int height = 64) {
  world::SceneObject o;
  o.id = id;
  o.shape = shape;
  o.color = color;
  o.size_class = size;
  o.mask = world::Mask(width, height);
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x) o.mask.set(x, y, true);
  o.bbox = box;
  o.area = o.mask.count();
  return o;
}

inline world::Scene make_scene(std::vector<world::SceneObject> objects, int width = 64, int height = 64) {
  world::Scene s;
  s.id = "t";
  s.width = width;
  s.height = height;
  s.objects = std::move(objects);
  s.image = world::render(s);
  return s;
}

}  // namespace refer::testing
