#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "docnmt/transformer_core.hpp"

namespace docnmt {

template <typename T>
struct ContextEncoderLayer {
  MultiHeadAttention<T> self_attention;
  LayerNormParams<T> attention_norm;
  FeedForward<T> ffn;
  LayerNormParams<T> ffn_norm;
};

// N_c self-attentive layers over the preceding source sentences. Every
// parameter is document-level. Word embeddings are not owned here: the
// context shares the source embedding table.
template <typename T>
struct ContextEncoderParams {
  std::vector<ContextEncoderLayer<T>> layers;

  static ContextEncoderParams create(ParameterSet<T>& params, std::size_t dim, std::size_t filter,
                                     std::size_t heads, std::size_t layers);
};

// C^(N_c) for a batch of contexts. Columns follow the batch layout
// b * length + m; columns at m >= token_counts[b] are padding.
template <typename T>
struct ContextRepresentation {
  Tensor<T> matrix;  // [D x batch * length]
  std::size_t batch = 1;
  std::size_t length = 0;                 // M (padded)
  std::vector<std::size_t> token_counts;  // valid M per batch entry
  std::vector<TokenId> tokens;            // column -> context token id

  AttentionMask key_mask(std::size_t query_len) const;
};

// Single context sequence, M = context_tokens.size() >= 1.
template <typename T>
ContextRepresentation<T> encode_context(std::span<const TokenId> context_tokens,
                                        const ContextEncoderParams<T>& params,
                                        const EmbeddingTable<T>& embeddings,
                                        const Dropout& drop = {});

template <typename T>
ContextRepresentation<T> encode_context_batch(std::span<const TokenId> tokens, std::size_t batch,
                                              std::size_t length,
                                              std::vector<std::size_t> token_counts,
                                              const ContextEncoderParams<T>& params,
                                              const EmbeddingTable<T>& embeddings,
                                              const Dropout& drop = {});

}  // namespace docnmt
