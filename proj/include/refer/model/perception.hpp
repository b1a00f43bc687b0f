#pragma once

#include <random>
#include <vector>

#include <Eigen/Dense>

#include "refer/model/config.hpp"
#include "refer/nn/layers.hpp"
#include "refer/world/scene.hpp"

namespace refer::model {

using nn::Matrix;
using nn::Var;

/// N proposals with their objectness and per-cell mask logits. Values live
/// on the tape that produced them.
template <typename T>
struct ProposalSet {
  Var<T> proposals;          // N x C
  Var<T> objectness_logits;  // N x 1
  Var<T> mask_logits;        // N x cells

  int size() const { return int(proposals.rows()); }
  Matrix<T> objectness() const;
};

template <typename T>
struct PixelFeatures {
  Var<T> features;  // cells x C, row-major over the grid
  int grid = 0;
};

/// Injective map from GT rows to query columns.
struct Assignment {
  std::vector<int> query_of;  // per GT instance
  double cost = 0.0;
};

/// Minimum-cost assignment of every row of a K x N cost matrix (K <= N) to a
/// distinct column. Throws ContractViolation when K > N or a cost is not finite.
Assignment hungarian_match(const Eigen::MatrixXd& cost);

/// Flattened p x p RGB patches scaled to [0,1]: cells x 3p^2.
template <typename T>
Matrix<T> image_patches(const world::Image& image, int patch);

/// Fixed 2-D sinusoidal encoding for a grid x grid map of width dim.
template <typename T>
Matrix<T> grid_position_encoding(int grid, int dim);

/// GT masks downsampled to the feature grid, one row per object.
template <typename T>
Matrix<T> gt_mask_targets(const world::Scene& scene, int grid);

template <typename T>
class Perception {
 public:
  Perception() = default;
  Perception(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng);

  /// Throws ConfigError if the image shape does not match the config.
  std::pair<ProposalSet<T>, PixelFeatures<T>> extract(nn::Tape<T>& t, const world::Image& image) const;
  /// Same from a prepared patch matrix (cells x 3p^2).
  std::pair<ProposalSet<T>, PixelFeatures<T>> extract_patches(nn::Tape<T>& t, const Matrix<T>& patches) const;

 private:
  struct ConvBlock {
    nn::LayerNorm<T> norm;
    nn::Linear<T> conv;
  };

  ModelConfig cfg_;
  nn::Linear<T> patch_embed_;
  Matrix<T> position_;
  std::vector<ConvBlock> convs_;
  nn::LayerNorm<T> pixel_norm_;
  nn::Parameter<T>* queries_ = nullptr;
  std::vector<nn::DecoderLayer<T>> decoder_;
  nn::LayerNorm<T> query_norm_;
  nn::Linear<T> mask_embed_;
  nn::Linear<T> objectness_;
};

/// Mask logits as the product of proposals and pixel features.
template <typename T>
Matrix<T> mask_logits(const Matrix<T>& proposals, const Matrix<T>& pixels);

/// Binary masks (logit > 0) upsampled to width x height by nearest neighbour.
template <typename T>
std::vector<world::Mask> predict_masks(const Matrix<T>& mask_logits, int grid, int width, int height);

/// Same for a single row.
template <typename T>
world::Mask predict_mask(const Matrix<T>& mask_logits, int row, int grid, int width, int height);

template <typename T>
struct ExtractorLoss {
  Var<T> total;
  double mask_bce = 0.0;    // weighted components; total is their sum
  double dice = 0.0;
  double objectness = 0.0;
  Assignment assignment;
};

/// Pairwise matching cost between GT masks (K x cells) and predictions.
/// With `objectness_logits` non-empty the objectness term is included.
template <typename T>
Eigen::MatrixXd matching_cost(const Matrix<T>& targets, const Matrix<T>& mask_logits,
                              const Matrix<T>& objectness_logits, const ExtractorWeights& w);

/// Hungarian-matched mask BCE + Dice (averaged over GT instances) plus
/// objectness BCE over all queries (weighted mean, unmatched queries
/// down-weighted by no_object).
template <typename T>
ExtractorLoss<T> extractor_loss(nn::Tape<T>& t, const ProposalSet<T>& preds, const Matrix<T>& targets,
                                const ExtractorWeights& w);

/// Object index -> query index by mask cost only. Throws ContractViolation if
/// there are more objects than queries.
template <typename T>
std::vector<int> match_instances(const Matrix<T>& targets, const Matrix<T>& mask_logits,
                                 const ExtractorWeights& w = {});

}  // namespace refer::model
