#pragma once

#include <cstdint>
#include <vector>

#include "refer/world/scene.hpp"

namespace refer::world {

/// Row-major run lengths, alternating zeros and ones, starting with a
/// (possibly empty) zero run.
std::vector<std::int64_t> encode_rle(const Mask& mask);

/// Throws FormatError when the runs do not sum to width * height.
Mask decode_rle(const std::vector<std::int64_t>& runs, int width, int height);

}  // namespace refer::world
