#include "refer/model/perception.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "refer/errors.hpp"
#include "refer/world/dataset.hpp"

namespace refer::model {

template <typename T>
Matrix<T> ProposalSet<T>::objectness() const {
  return (T(1) / (T(1) + (-objectness_logits.value().array()).exp())).matrix();
}

Assignment hungarian_match(const Eigen::MatrixXd& cost) {
  const int n = int(cost.rows()), m = int(cost.cols());
  if (n > m) throw ContractViolation("hungarian_match: more rows than columns");
  if (!cost.allFinite()) throw ContractViolation("hungarian_match: non-finite cost");
  Assignment a;
  a.query_of.assign(std::size_t(n), -1);
  if (n == 0) return a;

  // Potentials method over 1-based rows/columns; column 0 is a sentinel.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(std::size_t(n) + 1, 0.0), v(std::size_t(m) + 1, 0.0);
  std::vector<int> p(std::size_t(m) + 1, 0), way(std::size_t(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(std::size_t(m) + 1, inf);
    std::vector<char> used(std::size_t(m) + 1, 0);
    do {
      used[std::size_t(j0)] = 1;
      int i0 = p[std::size_t(j0)], j1 = 0;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[std::size_t(j)]) continue;
        double cur = cost(i0 - 1, j - 1) - u[std::size_t(i0)] - v[std::size_t(j)];
        if (cur < minv[std::size_t(j)]) {
          minv[std::size_t(j)] = cur;
          way[std::size_t(j)] = j0;
        }
        if (minv[std::size_t(j)] < delta) {
          delta = minv[std::size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[std::size_t(j)]) {
          u[std::size_t(p[std::size_t(j)])] += delta;
          v[std::size_t(j)] -= delta;
        } else {
          minv[std::size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[std::size_t(j0)] != 0);
    do {
      int j1 = way[std::size_t(j0)];
      p[std::size_t(j0)] = p[std::size_t(j1)];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= m; ++j)
    if (p[std::size_t(j)]) a.query_of[std::size_t(p[std::size_t(j)] - 1)] = j - 1;
  for (int i = 0; i < n; ++i) a.cost += cost(i, a.query_of[std::size_t(i)]);
  return a;
}

template <typename T>
Matrix<T> image_patches(const world::Image& image, int patch) {
  if (patch <= 0 || image.width % patch || image.height % patch)
    throw ConfigError("image size is not a multiple of the patch size");
  const int gw = image.width / patch, gh = image.height / patch;
  Matrix<T> out(gw * gh, 3 * patch * patch);
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      int col = 0;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx) {
          std::size_t px = (std::size_t(gy * patch + dy) * std::size_t(image.width) + std::size_t(gx * patch + dx)) * 3;
          for (int c = 0; c < 3; ++c) out(gy * gw + gx, col++) = T(image.rgb[px + std::size_t(c)]) / T(255);
        }
    }
  return out;
}

template <typename T>
Matrix<T> grid_position_encoding(int grid, int dim) {
  // First half of the channels encodes y, second half x.
  Matrix<T> pe = Matrix<T>::Zero(grid * grid, dim);
  const int half = dim / 2;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      for (int c = 0; c < half; ++c) {
        double f = std::pow(100.0, -double(2 * (c / 2)) / double(std::max(half, 1)));
        pe(y * grid + x, c) = T(c % 2 ? std::cos(y * f) : std::sin(y * f));
        pe(y * grid + x, half + c) = T(c % 2 ? std::cos(x * f) : std::sin(x * f));
      }
    }
  return pe;
}

template <typename T>
Matrix<T> gt_mask_targets(const world::Scene& scene, int grid) {
  Matrix<T> out(Eigen::Index(scene.objects.size()), grid * grid);
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    world::Mask m = world::downsample_mask(scene.objects[i].mask, grid, grid);
    for (int c = 0; c < grid * grid; ++c) out(Eigen::Index(i), c) = m.cells()[std::size_t(c)] ? T(1) : T(0);
  }
  return out;
}

template <typename T>
Perception<T>::Perception(nn::ParameterStore<T>& store, const ModelConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  cfg_.validate();
  const int c = cfg.dim;
  patch_embed_ = nn::Linear<T>(store, "perception.patch", 3 * cfg.patch * cfg.patch, c, rng);
  position_ = grid_position_encoding<T>(cfg.grid(), c);
  for (int i = 0; i < cfg.pixel_layers; ++i) {
    std::string name = "perception.conv" + std::to_string(i);
    convs_.push_back({nn::LayerNorm<T>(store, name + ".norm", c, rng), nn::Linear<T>(store, name, 9 * c, c, rng)});
  }
  pixel_norm_ = nn::LayerNorm<T>(store, "perception.pixel_norm", c, rng);
  queries_ = &store.add("perception.queries", cfg.queries, c, nn::Init::normal, rng, 1.0);
  for (int i = 0; i < cfg.query_layers; ++i)
    decoder_.emplace_back(store, "perception.dec" + std::to_string(i), c, cfg.heads, cfg.hidden(), rng);
  query_norm_ = nn::LayerNorm<T>(store, "perception.query_norm", c, rng);
  mask_embed_ = nn::Linear<T>(store, "perception.mask_embed", c, c, rng);
  // Start with moderate mask logits: dot products of width-C vectors.
  mask_embed_.w->value *= T(1.0 / std::sqrt(double(c)));
  objectness_ = nn::Linear<T>(store, "perception.objectness", c, 1, rng);
}

template <typename T>
std::pair<ProposalSet<T>, PixelFeatures<T>> Perception<T>::extract(nn::Tape<T>& t, const world::Image& image) const {
  if (image.width != cfg_.image_size || image.height != cfg_.image_size ||
      image.rgb.size() != std::size_t(image.width) * std::size_t(image.height) * 3)
    throw ConfigError("image is " + std::to_string(image.width) + "x" + std::to_string(image.height) +
                      ", model expects " + std::to_string(cfg_.image_size));
  return extract_patches(t, image_patches<T>(image, cfg_.patch));
}

template <typename T>
std::pair<ProposalSet<T>, PixelFeatures<T>> Perception<T>::extract_patches(nn::Tape<T>& t,
                                                                           const Matrix<T>& patches) const {
  if (patches.rows() != cfg_.cells() || patches.cols() != 3 * cfg_.patch * cfg_.patch)
    throw ConfigError("patch matrix shape mismatch");
  const int g = cfg_.grid();
  Var<T> x = patch_embed_(t, t.constant(patches));
  x = nn::add(x, t.constant(position_));
  for (const auto& b : convs_) x = nn::add(x, nn::gelu(b.conv(t, nn::im2col3x3(b.norm(t, x), g, g))));
  Var<T> pix = pixel_norm_(t, x);

  Var<T> q = t.param(*queries_);
  for (const auto& layer : decoder_) q = layer(t, q, pix, false);
  Var<T> o = mask_embed_(t, query_norm_(t, q));

  ProposalSet<T> ps;
  ps.proposals = o;
  ps.objectness_logits = objectness_(t, o);
  ps.mask_logits = nn::matmul_nt(o, pix);
  return {ps, PixelFeatures<T>{pix, g}};
}

template <typename T>
Matrix<T> mask_logits(const Matrix<T>& proposals, const Matrix<T>& pixels) {
  if (proposals.cols() != pixels.cols()) throw ContractViolation("mask_logits: width mismatch");
  return proposals * pixels.transpose();
}

template <typename T>
world::Mask predict_mask(const Matrix<T>& logits, int row, int grid, int width, int height) {
  if (logits.cols() != Eigen::Index(grid) * grid) throw ContractViolation("predict_mask: grid mismatch");
  world::Mask m(width, height);
  for (int y = 0; y < height; ++y) {
    int gy = y * grid / height;
    for (int x = 0; x < width; ++x) {
      int gx = x * grid / width;
      if (logits(row, gy * grid + gx) > T(0)) m.set(x, y, true);
    }
  }
  return m;
}

template <typename T>
std::vector<world::Mask> predict_masks(const Matrix<T>& logits, int grid, int width, int height) {
  std::vector<world::Mask> out;
  out.reserve(std::size_t(logits.rows()));
  for (int r = 0; r < logits.rows(); ++r) out.push_back(predict_mask(logits, r, grid, width, height));
  return out;
}

namespace {

double softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

template <typename T>
Eigen::MatrixXd matching_cost(const Matrix<T>& targets, const Matrix<T>& logits, const Matrix<T>& objectness_logits,
                              const ExtractorWeights& w) {
  if (targets.cols() != logits.cols()) throw ContractViolation("matching_cost: cell count mismatch");
  const Eigen::Index k = targets.rows(), n = logits.rows(), cells = logits.cols();
  Eigen::MatrixXd cost(k, n);
  Eigen::MatrixXd p = logits.template cast<double>();
  Eigen::MatrixXd sp_pos = p.unaryExpr([](double x) { return softplus(-x); });  // -log sigmoid
  Eigen::MatrixXd sp_neg = p.unaryExpr([](double x) { return softplus(x); });   // -log(1 - sigmoid)
  Eigen::MatrixXd prob = p.unaryExpr([](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  Eigen::MatrixXd tg = targets.template cast<double>();
  for (Eigen::Index i = 0; i < k; ++i) {
    const double tsum = tg.row(i).sum();
    for (Eigen::Index j = 0; j < n; ++j) {
      double bce = (tg.row(i).array() * sp_pos.row(j).array() + (1.0 - tg.row(i).array()) * sp_neg.row(j).array())
                       .sum() /
                   double(cells);
      double num = 2.0 * prob.row(j).dot(tg.row(i)) + 1.0;
      double den = prob.row(j).sum() + tsum + 1.0;
      double c = w.mask_bce * bce + w.dice * (1.0 - num / den);
      if (objectness_logits.size()) c += w.objectness * softplus(-double(objectness_logits(j, 0)));
      cost(i, j) = c;
    }
  }
  return cost;
}

template <typename T>
ExtractorLoss<T> extractor_loss(nn::Tape<T>& t, const ProposalSet<T>& preds, const Matrix<T>& targets,
                                const ExtractorWeights& w) {
  const Eigen::Index k = targets.rows(), n = preds.size(), cells = preds.mask_logits.cols();
  if (k > n) throw ContractViolation("extractor_loss: more objects than queries");
  ExtractorLoss<T> out;
  out.assignment =
      hungarian_match(matching_cost<T>(targets, preds.mask_logits.value(), preds.objectness_logits.value(), w));

  std::vector<Var<T>> terms;
  Matrix<T> obj_target = Matrix<T>::Zero(n, 1);
  Matrix<T> obj_weight = Matrix<T>::Constant(n, 1, T(w.no_object));
  if (k > 0) {
    Matrix<T> per_cell = Matrix<T>::Constant(1, cells, T(1) / T(cells));
    Var<T> bce_sum, dice_sum;
    for (Eigen::Index i = 0; i < k; ++i) {
      int q = out.assignment.query_of[std::size_t(i)];
      obj_target(q, 0) = T(1);
      obj_weight(q, 0) = T(1);
      Var<T> row = nn::slice_rows(preds.mask_logits, q, 1);
      Matrix<T> tg = targets.row(i);
      Var<T> b = nn::bce_with_logits(row, tg, per_cell);
      Var<T> d = nn::dice_loss(row, tg);
      bce_sum = bce_sum.valid() ? nn::add(bce_sum, b) : b;
      dice_sum = dice_sum.valid() ? nn::add(dice_sum, d) : d;
    }
    Var<T> mb = nn::scale(bce_sum, T(w.mask_bce / double(k)));
    Var<T> md = nn::scale(dice_sum, T(w.dice / double(k)));
    out.mask_bce = double(mb.item());
    out.dice = double(md.item());
    terms.push_back(mb);
    terms.push_back(md);
  }
  const double wsum = double(obj_weight.sum());
  Var<T> ob = nn::scale(nn::bce_with_logits(preds.objectness_logits, obj_target, obj_weight),
                        T(w.objectness / (wsum > 0 ? wsum : 1.0)));
  out.objectness = double(ob.item());
  terms.push_back(ob);
  Var<T> total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = nn::add(total, terms[i]);
  out.total = total;
  return out;
}

template <typename T>
std::vector<int> match_instances(const Matrix<T>& targets, const Matrix<T>& logits, const ExtractorWeights& w) {
  if (targets.rows() > logits.rows()) throw ContractViolation("match_instances: more objects than queries");
  return hungarian_match(matching_cost<T>(targets, logits, Matrix<T>(), w)).query_of;
}

#define REFER_INSTANTIATE_PERCEPTION(T)                                                                          \
  template struct ProposalSet<T>;                                                                                \
  template class Perception<T>;                                                                                  \
  template Matrix<T> image_patches<T>(const world::Image&, int);                                                 \
  template Matrix<T> grid_position_encoding<T>(int, int);                                                        \
  template Matrix<T> gt_mask_targets<T>(const world::Scene&, int);                                               \
  template Matrix<T> mask_logits<T>(const Matrix<T>&, const Matrix<T>&);                                         \
  template world::Mask predict_mask<T>(const Matrix<T>&, int, int, int, int);                                    \
  template std::vector<world::Mask> predict_masks<T>(const Matrix<T>&, int, int, int);                           \
  template Eigen::MatrixXd matching_cost<T>(const Matrix<T>&, const Matrix<T>&, const Matrix<T>&,                \
                                            const ExtractorWeights&);                                            \
  template ExtractorLoss<T> extractor_loss<T>(nn::Tape<T>&, const ProposalSet<T>&, const Matrix<T>&,             \
                                              const ExtractorWeights&);                                          \
  template std::vector<int> match_instances<T>(const Matrix<T>&, const Matrix<T>&, const ExtractorWeights&);

REFER_INSTANTIATE_PERCEPTION(float)
REFER_INSTANTIATE_PERCEPTION(double)

}  // namespace refer::model
