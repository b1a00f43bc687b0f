#include "refer/model/config.hpp"

#include <string>

#include "refer/errors.hpp"
#include "refer/json_util.hpp"

namespace refer::model {

void ModelConfig::validate() const {
  if (image_size <= 0 || patch <= 0 || image_size % patch != 0)
    throw ConfigError("image_size must be a positive multiple of patch");
  if (dim <= 0 || heads <= 0 || dim % heads != 0) throw ConfigError("dim must be a positive multiple of heads");
  if (queries < 1) throw ConfigError("queries must be >= 1");
  if (ffn_mult < 1) throw ConfigError("ffn_mult must be >= 1");
  if (pixel_layers < 0 || query_layers < 1 || text_layers < 1 || reg_layers < 1 || res_layers < 1)
    throw ConfigError("layer counts must be >= 1");
  if (vocab_size < 4) throw ConfigError("vocab_size must be >= 4");
  if (max_len < 3) throw ConfigError("max_len must be >= 3");
}

nlohmann::json ModelConfig::to_json() const {
  return {{"image_size", image_size}, {"patch", patch},           {"dim", dim},
          {"queries", queries},       {"heads", heads},           {"ffn_mult", ffn_mult},
          {"pixel_layers", pixel_layers},
          {"query_layers", query_layers}, {"text_layers", text_layers}, {"reg_layers", reg_layers},
          {"res_layers", res_layers}, {"vocab_size", vocab_size}, {"max_len", max_len}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  reject_unknown(j,
                 {"image_size", "patch", "dim", "queries", "heads", "ffn_mult", "pixel_layers", "query_layers", "text_layers",
                  "reg_layers", "res_layers", "vocab_size", "max_len"},
                 "model");
  ModelConfig c;
  try {
    c.image_size = j.value("image_size", c.image_size);
    c.patch = j.value("patch", c.patch);
    c.dim = j.value("dim", c.dim);
    c.queries = j.value("queries", c.queries);
    c.heads = j.value("heads", c.heads);
    c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
    c.pixel_layers = j.value("pixel_layers", c.pixel_layers);
    c.query_layers = j.value("query_layers", c.query_layers);
    c.text_layers = j.value("text_layers", c.text_layers);
    c.reg_layers = j.value("reg_layers", c.reg_layers);
    c.res_layers = j.value("res_layers", c.res_layers);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.max_len = j.value("max_len", c.max_len);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json ExtractorWeights::to_json() const {
  return {{"mask_bce", mask_bce}, {"dice", dice}, {"objectness", objectness}, {"no_object", no_object}};
}

ExtractorWeights ExtractorWeights::from_json(const nlohmann::json& j) {
  reject_unknown(j, {"mask_bce", "dice", "objectness", "no_object"}, "extractor weights");
  ExtractorWeights w;
  try {
    w.mask_bce = j.value("mask_bce", w.mask_bce);
    w.dice = j.value("dice", w.dice);
    w.objectness = j.value("objectness", w.objectness);
    w.no_object = j.value("no_object", w.no_object);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("extractor weights: ") + e.what());
  }
  if (w.mask_bce < 0 || w.dice < 0 || w.objectness < 0 || w.no_object < 0)
    throw ConfigError("extractor weights must be non-negative");
  return w;
}

}  // namespace refer::model
