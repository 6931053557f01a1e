#pragma once

// Transformer building blocks shared by the context encoder, the sentence
// encoder and the decoder. Activations are [D x positions]; a batch of B
// padded sequences of length L occupies columns b * L + t.

#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "docnmt/ops.hpp"
#include "docnmt/parameters.hpp"
#include "docnmt/tensor.hpp"

namespace docnmt {

// Dropout applied to sub-layer outputs and embedding sums. Inactive when the
// rate is zero or no generator is attached (evaluation).
struct Dropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;

  bool active() const { return rate > 0.0 && rng != nullptr; }
  template <typename T>
  Tensor<T> operator()(const Tensor<T>& x) const {
    return active() ? dropout(x, rate, *rng) : x;
  }
};

struct AttentionMask {
  enum class Kind { none, padding, causal, padding_causal };

  Kind kind = Kind::none;
  std::size_t batch = 1;
  std::size_t query_len = 0;
  std::size_t key_len = 0;
  // valid key count per batch entry (padding kinds only)
  std::vector<std::size_t> key_lengths;

  static AttentionMask none(std::size_t query_len, std::size_t key_len, std::size_t batch = 1);
  static AttentionMask causal(std::size_t length, std::size_t batch = 1);
  static AttentionMask padding(std::size_t query_len, std::size_t key_len,
                               std::vector<std::size_t> key_lengths);
  static AttentionMask padding_causal(std::size_t length, std::vector<std::size_t> key_lengths);

  bool allowed(std::size_t b, std::size_t query, std::size_t key) const;
  // Every mask kind exposes a key prefix: key j is visible iff j < visible_keys(b, i).
  std::size_t visible_keys(std::size_t b, std::size_t query) const;
  // Boolean [query_len x key_len] matrix for batch entry b, true = visible.
  std::vector<std::vector<bool>> matrix(std::size_t b = 0) const;
};

// Scaled dot-product attention over already projected q [D x B*Lq],
// k, v [D x B*Lk], split into `heads` row blocks of D / heads.
// Masked keys get exactly zero weight; a query with no visible key is a
// ContractError. If `weights` is given it receives the attention matrices,
// laid out [batch][head][query][key].
template <typename T>
Tensor<T> scaled_dot_product_attention(const Tensor<T>& q, const Tensor<T>& k,
                                       const Tensor<T>& v, const AttentionMask& mask,
                                       std::size_t heads, std::vector<T>* weights = nullptr);

// Sinusoidal encoding, [dim x length]. Odd dim throws ConfigError.
template <typename T>
Tensor<T> positional_encoding(std::size_t length, std::size_t dim);

template <typename T>
struct EmbeddingTable {
  Tensor<T> weights;  // [vocab x D]

  std::size_t vocab_size() const { return weights.rows(); }
  std::size_t dim() const { return weights.cols(); }
};

// Word embedding plus positional encoding, one column per token.
template <typename T>
Tensor<T> embed(std::span<const TokenId> tokens, const EmbeddingTable<T>& table);

// Batched variant: `tokens` holds `batch` rows of `length` ids; positions
// restart at 0 for every row.
template <typename T>
Tensor<T> embed_batch(std::span<const TokenId> tokens, std::size_t batch, std::size_t length,
                      const EmbeddingTable<T>& table);

template <typename T>
struct MultiHeadAttention {
  std::size_t heads = 1;
  Tensor<T> w_q, w_k, w_v, w_o;  // [D x D] each

  std::size_t dim() const { return w_q.rows(); }
  std::size_t head_dim() const { return dim() / heads; }

  static MultiHeadAttention create(ParameterSet<T>& params, const std::string& prefix,
                                   Partition partition, std::size_t dim, std::size_t heads);
};

template <typename T>
struct ProjectedMemory {
  Tensor<T> keys;    // W_K k
  Tensor<T> values;  // W_V v
};

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionMask& mask, const MultiHeadAttention<T>& params,
                               std::vector<T>* weights = nullptr);

// Split form used by incremental decoding: keys/values projected once and
// reused for every query step.
template <typename T>
ProjectedMemory<T> project_memory(const Tensor<T>& k, const Tensor<T>& v,
                                  const MultiHeadAttention<T>& params);
template <typename T>
Tensor<T> attend(const Tensor<T>& q, const ProjectedMemory<T>& memory, const AttentionMask& mask,
                 const MultiHeadAttention<T>& params, std::vector<T>* weights = nullptr);

template <typename T>
struct FeedForward {
  Tensor<T> w1;  // [F x D]
  Tensor<T> b1;  // [F]
  Tensor<T> w2;  // [D x F]
  Tensor<T> b2;  // [D]

  static FeedForward create(ParameterSet<T>& params, const std::string& prefix,
                            Partition partition, std::size_t dim, std::size_t filter);
};

// W2 relu(W1 x + b1) + b2, independently per column.
template <typename T>
Tensor<T> feed_forward(const Tensor<T>& x, const FeedForward<T>& params);

template <typename T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNormParams create(ParameterSet<T>& params, const std::string& prefix,
                                Partition partition, std::size_t dim);
};

// layer_norm(h + sublayer_output)
template <typename T>
Tensor<T> residual_sublayer(const Tensor<T>& h, const Tensor<T>& sublayer_output,
                            const LayerNormParams<T>& norm);

}  // namespace docnmt
