#pragma once

#include "json.hpp"

namespace refer::model {

/// Architecture sizes shared by every module.
struct ModelConfig {
  int image_size = 64;  // square input, pixels
  int patch = 4;        // pixel-feature grid is image_size / patch per side
  int dim = 128;        // C
  int queries = 16;     // N
  int heads = 4;
  int ffn_mult = 2;     // feed-forward hidden width = ffn_mult * dim
  int pixel_layers = 1;  // residual 3x3 conv blocks
  int query_layers = 2;
  int text_layers = 2;
  int reg_layers = 4;
  int res_layers = 4;
  int vocab_size = 25;
  int max_len = 12;  // tokens including begin/end markers

  int grid() const { return image_size / patch; }
  int cells() const { return grid() * grid(); }
  int hidden() const { return ffn_mult * dim; }

  /// Throws ConfigError.
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

/// Loss weights for the proposal extractor; also used as matching costs.
struct ExtractorWeights {
  double mask_bce = 5.0;
  double dice = 5.0;
  double objectness = 2.0;
  double no_object = 0.1;  // relative weight of unmatched queries in the objectness term

  nlohmann::json to_json() const;
  static ExtractorWeights from_json(const nlohmann::json& j);
};

}  // namespace refer::model
