#include "docnmt/context_encoder.hpp"

#include "docnmt/errors.hpp"

namespace docnmt {

template <typename T>
ContextEncoderParams<T> ContextEncoderParams<T>::create(ParameterSet<T>& params, std::size_t dim,
                                                        std::size_t filter, std::size_t heads,
                                                        std::size_t layers) {
  if (layers == 0) throw ConfigError("context encoder needs at least one layer");
  ContextEncoderParams out;
  for (std::size_t n = 0; n < layers; ++n) {
    const std::string prefix = "context_encoder.layer" + std::to_string(n);
    out.layers.push_back(
        {MultiHeadAttention<T>::create(params, prefix + ".self_attention", Partition::document, dim, heads),
         LayerNormParams<T>::create(params, prefix + ".attention_norm", Partition::document, dim),
         FeedForward<T>::create(params, prefix + ".ffn", Partition::document, dim, filter),
         LayerNormParams<T>::create(params, prefix + ".ffn_norm", Partition::document, dim)});
  }
  return out;
}

template <typename T>
AttentionMask ContextRepresentation<T>::key_mask(std::size_t query_len) const {
  return AttentionMask::padding(query_len, length, token_counts);
}

template <typename T>
ContextRepresentation<T> encode_context(std::span<const TokenId> context_tokens,
                                        const ContextEncoderParams<T>& params,
                                        const EmbeddingTable<T>& embeddings, const Dropout& drop) {
  return encode_context_batch(context_tokens, 1, context_tokens.size(), {context_tokens.size()},
                              params, embeddings, drop);
}

template <typename T>
ContextRepresentation<T> encode_context_batch(std::span<const TokenId> tokens, std::size_t batch,
                                              std::size_t length,
                                              std::vector<std::size_t> token_counts,
                                              const ContextEncoderParams<T>& params,
                                              const EmbeddingTable<T>& embeddings,
                                              const Dropout& drop) {
  if (length == 0 || token_counts.size() != batch) {
    throw ContractError("encode_context: context must be nonempty (insert BOS upstream)");
  }
  for (std::size_t count : token_counts) {
    if (count == 0 || count > length) {
      throw ContractError("encode_context: context must be nonempty (insert BOS upstream)");
    }
  }
  const AttentionMask mask = AttentionMask::padding(length, length, token_counts);
  Tensor<T> c = drop(embed_batch(tokens, batch, length, embeddings));
  for (const auto& layer : params.layers) {
    const Tensor<T> a = residual_sublayer(
        c, drop(multi_head_attention(c, c, c, mask, layer.self_attention)), layer.attention_norm);
    c = residual_sublayer(a, drop(feed_forward(a, layer.ffn)), layer.ffn_norm);
  }
  return {c, batch, length, std::move(token_counts), std::vector<TokenId>(tokens.begin(), tokens.end())};
}

#define DOCNMT_INSTANTIATE_CONTEXT(T)                                                          \
  template struct ContextEncoderParams<T>;                                                     \
  template struct ContextRepresentation<T>;                                                    \
  template ContextRepresentation<T> encode_context(std::span<const TokenId>,                   \
                                                   const ContextEncoderParams<T>&,             \
                                                   const EmbeddingTable<T>&, const Dropout&);  \
  template ContextRepresentation<T> encode_context_batch(                                      \
      std::span<const TokenId>, std::size_t, std::size_t, std::vector<std::size_t>,            \
      const ContextEncoderParams<T>&, const EmbeddingTable<T>&, const Dropout&);

DOCNMT_INSTANTIATE_CONTEXT(float)
DOCNMT_INSTANTIATE_CONTEXT(double)

}  // namespace docnmt
