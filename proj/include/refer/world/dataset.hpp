#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "refer/world/grammar.hpp"
#include "refer/world/scene.hpp"

namespace refer::world {

struct GenerationParams {
  int width = 64;
  int height = 64;
  int min_objects = 2;
  int max_objects = 6;  // N_max
  /// Fraction of train scenes that carry expressions. Held-out scenes are
  /// always annotated.
  double annotated_fraction = 0.5;
  double train_fraction = 0.8;
  double val_fraction = 0.1;  // test gets the remainder
  int small_radius_min = 4;
  int small_radius_max = 5;
  int large_radius_min = 8;
  int large_radius_max = 10;
  double large_probability = 0.5;
  int min_gap = 2;  // pixels between object boxes
  int expressions_per_object = 3;  // attempts; duplicates are dropped
  Register reg = Register::plain;

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static GenerationParams from_json(const nlohmann::json& j);
};

/// Scene `index` of a dataset; depends only on (params, seed, index).
Scene generate_scene(const GenerationParams& params, std::uint64_t seed, int index, Split split,
                     bool annotated);

/// Scenes ordered by index. Train scenes come first, then val, then test;
/// the first round(annotated_fraction * n_train) train scenes are annotated.
std::vector<Scene> generate_dataset(int n_scenes, const GenerationParams& params,
                                    std::uint64_t seed);

std::size_t count_expressions(std::span<const Scene> scenes);

/// Downsamples an object mask to a grid by cell majority; the best-covered
/// cell is forced on so that no object vanishes.
Mask downsample_mask(const Mask& mask, int grid_w, int grid_h);

nlohmann::json scene_to_json(const Scene& scene);
/// Re-renders the image from the stored masks. Throws FormatError.
Scene scene_from_json(const nlohmann::json& j);

/// One JSON object per line.
std::string serialize_dataset(std::span<const Scene> scenes);
void write_dataset(const std::filesystem::path& path, std::span<const Scene> scenes);
std::vector<Scene> read_dataset(const std::filesystem::path& path);

void write_vocabulary(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary read_vocabulary(const std::filesystem::path& path);

/// RGB PNG bytes; `scale` > 1 upsamples by pixel replication.
std::vector<std::uint8_t> encode_png(const Image& image, int scale = 1);

}  // namespace refer::world
