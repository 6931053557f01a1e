#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "docnmt/tensor.hpp"

namespace docnmt {

using TokenId = std::int32_t;

// [m x k] * [k x n] -> [m x n]. dA = dC B^T, dB = A^T dC.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

// Elementwise, shapes must agree exactly.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// x [R x N] plus bias [R] added to every column.
template <typename T>
Tensor<T> add_column_bias(const Tensor<T>& x, const Tensor<T>& bias);

template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x);

// Max-subtracted softmax along `axis`. Non-finite input throws NumericError.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// Per column of x [D x L]: gain * (x - mean) / sqrt(var + eps) + bias.
// Variance is the biased (population) estimate.
inline constexpr double kLayerNormEpsilon = 1e-6;
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double epsilon = kLayerNormEpsilon);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);

// Rows `ids` of table [V x D], returned as columns of a [D x ids.size()] matrix.
template <typename T>
Tensor<T> embedding_columns(const Tensor<T>& table, std::span<const TokenId> ids);

template <typename T>
Tensor<T> concat_columns(const std::vector<Tensor<T>>& parts);
template <typename T>
Tensor<T> slice_columns(const Tensor<T>& x, std::size_t begin, std::size_t end);

// Inverted dropout. rate == 0 returns x itself.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double rate, std::mt19937_64& rng);

// Sum over columns j with targets[j] != ignore of -log softmax(logits[:, j])[targets[j]].
// With smoothing > 0 the target distribution puts `smoothing` mass uniformly
// over the vocabulary.
template <typename T>
Tensor<T> nll_sum(const Tensor<T>& logits, std::span<const TokenId> targets, TokenId ignore,
                  double smoothing = 0.0);

// Column-wise log-softmax on plain values; no graph.
template <typename T>
std::vector<T> log_softmax_column(const Tensor<T>& logits, std::size_t column);

}  // namespace docnmt
