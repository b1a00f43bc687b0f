#include "refer/world/rle.hpp"

#include "refer/errors.hpp"

namespace refer::world {

std::vector<std::int64_t> encode_rle(const Mask& mask) {
  std::vector<std::int64_t> runs;
  std::uint8_t current = 0;
  std::int64_t length = 0;
  for (auto cell : mask.cells()) {
    if (cell != current) {
      runs.push_back(length);
      current = cell;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

Mask decode_rle(const std::vector<std::int64_t>& runs, int width, int height) {
  if (width <= 0 || height <= 0) throw FormatError("mask dimensions must be positive");
  const std::int64_t total = std::int64_t(width) * height;
  std::int64_t sum = 0;
  for (auto r : runs) {
    if (r < 0) throw FormatError("negative run length");
    sum += r;
  }
  if (sum != total)
    throw FormatError("run lengths sum to " + std::to_string(sum) + ", expected " +
                      std::to_string(total));
  Mask mask(width, height);
  auto& cells = mask.cells();
  std::size_t pos = 0;
  std::uint8_t value = 0;
  for (auto r : runs) {
    for (std::int64_t i = 0; i < r; ++i) cells[pos++] = value;
    value ^= 1;
  }
  return mask;
}

}  // namespace refer::world
