#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "refer/nn/tape.hpp"

namespace refer::nn {

// Linear algebra.
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);     // a * b
template <typename T> Var<T> matmul_nt(Var<T> a, Var<T> b);  // a * b^T
template <typename T> Var<T> transpose(Var<T> a);

// Elementwise.
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
/// Adds a 1 x n row to every row of `a`.
template <typename T> Var<T> add_row(Var<T> a, Var<T> row);
template <typename T> Var<T> gelu(Var<T> a);  // tanh approximation
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> exp(Var<T> a);

// Shape.
template <typename T> Var<T> slice_rows(Var<T> a, Eigen::Index begin, Eigen::Index count);
template <typename T> Var<T> concat_rows(std::span<const Var<T>> parts);
/// Rows of `table` picked by `ids` (embedding lookup).
template <typename T> Var<T> gather_rows(Var<T> table, std::span<const int> ids);
/// Rows reordered: out[i] = a[order[i]].
template <typename T> Var<T> permute_rows(Var<T> a, std::span<const int> order);

// Reductions.
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

/// Row-wise layer normalisation with 1 x n gain and bias.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

/// Scaled dot-product attention over `heads` column groups.
///   q: Lq x C, k/v: Lk x C. `causal` masks keys after the query position;
///   `key_valid` (empty = all valid) masks padded keys. Rows whose keys are
///   all masked produce zeros.
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads, bool causal,
                 std::span<const std::uint8_t> key_valid = {});

/// 3x3 same-padded patches of an (h*w) x c row-major feature map, giving
/// (h*w) x 9c.
template <typename T> Var<T> im2col3x3(Var<T> x, int h, int w);

// Losses.
/// Sum over rows i of log softmax(logits_i)[targets_i] (1 x 1).
template <typename T> Var<T> sum_log_prob(Var<T> logits, std::span<const int> targets);
/// Sum of elementwise binary cross-entropy with logits, scaled by `weights`
/// (same shape, or empty for unit weights).
template <typename T>
Var<T> bce_with_logits(Var<T> logits, const Matrix<T>& targets, const Matrix<T>& weights = {});
/// 1 - (2 sum(p t) + 1) / (sum p + sum t + 1) with p = sigmoid(logits), for a
/// single row.
template <typename T> Var<T> dice_loss(Var<T> logits, const Matrix<T>& targets);

// Plain helpers shared with non-differentiable code.
template <typename T> Matrix<T> softmax_rows(const Matrix<T>& x);
template <typename T> Matrix<T> log_softmax_rows(const Matrix<T>& x);

}  // namespace refer::nn
