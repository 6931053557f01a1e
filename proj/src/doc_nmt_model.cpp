#include "docnmt/doc_nmt_model.hpp"

#include "docnmt/errors.hpp"

namespace docnmt {

template <typename T>
GatingParams<T> GatingParams<T>::create(ParameterSet<T>& params, const std::string& prefix,
                                        std::size_t dim) {
  // zero weights start every gate at lambda = 0.5
  return {params.create(prefix + ".w_i", Partition::document, {dim, dim}, Init::zeros),
          params.create(prefix + ".w_s", Partition::document, {dim, dim}, Init::zeros)};
}

template <typename T>
GateOutput<T> context_gate(const Tensor<T>& h, const Tensor<T>& sublayer_out,
                           const GatingParams<T>& params) {
  if (h.shape() != sublayer_out.shape()) {
    throw DimensionError("context_gate: input " + shape_string(h.shape()) +
                         " and sub-layer output " + shape_string(sublayer_out.shape()) + " differ");
  }
  Tensor<T> lambda = sigmoid(add(matmul(params.w_i, h), matmul(params.w_s, sublayer_out)));
  // lambda * h + (1 - lambda) * s == s + lambda * (h - s)
  Tensor<T> blend = add(sublayer_out, mul(lambda, sub(h, sublayer_out)));
  return {blend, lambda};
}

namespace {

template <typename T>
ContextSublayer<T> make_context_sublayer(ParameterSet<T>& params, const std::string& prefix,
                                         const ModelConfig& c) {
  ContextSublayer<T> sub{
      MultiHeadAttention<T>::create(params, prefix + ".context_attention", Partition::document,
                                    c.hidden, c.heads),
      LayerNormParams<T>::create(params, prefix + ".context_norm", Partition::document, c.hidden),
      std::nullopt};
  if (c.gating) sub.gate = GatingParams<T>::create(params, prefix + ".gate", c.hidden);
  return sub;
}

}  // namespace

template <typename T>
DocTransformer<T>::DocTransformer(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), params_(seed) {
  config_.validate();
  const auto& c = config_;
  source_embeddings_.weights = params_.create("source_embedding", Partition::sentence,
                                              {c.source_vocab, c.hidden}, Init::embedding);
  target_embeddings_.weights = params_.create("target_embedding", Partition::sentence,
                                              {c.target_vocab, c.hidden}, Init::embedding);
  if (c.uses_context()) {
    context_encoder_ = ContextEncoderParams<T>::create(params_, c.hidden, c.filter, c.heads,
                                                       c.context_layers);
  }
  for (std::size_t n = 0; n < c.encoder_layers; ++n) {
    const std::string p = "encoder.layer" + std::to_string(n);
    EncoderLayerParams<T> layer{
        MultiHeadAttention<T>::create(params_, p + ".self_attention", Partition::sentence, c.hidden, c.heads),
        LayerNormParams<T>::create(params_, p + ".self_norm", Partition::sentence, c.hidden),
        std::nullopt,
        FeedForward<T>::create(params_, p + ".ffn", Partition::sentence, c.hidden, c.filter),
        LayerNormParams<T>::create(params_, p + ".ffn_norm", Partition::sentence, c.hidden)};
    if (c.integrate_encoder) layer.context = make_context_sublayer(params_, p, c);
    encoder_.push_back(std::move(layer));
  }
  for (std::size_t n = 0; n < c.decoder_layers; ++n) {
    const std::string p = "decoder.layer" + std::to_string(n);
    DecoderLayerParams<T> layer{
        MultiHeadAttention<T>::create(params_, p + ".self_attention", Partition::sentence, c.hidden, c.heads),
        LayerNormParams<T>::create(params_, p + ".self_norm", Partition::sentence, c.hidden),
        std::nullopt,
        MultiHeadAttention<T>::create(params_, p + ".encdec_attention", Partition::sentence, c.hidden, c.heads),
        LayerNormParams<T>::create(params_, p + ".encdec_norm", Partition::sentence, c.hidden),
        FeedForward<T>::create(params_, p + ".ffn", Partition::sentence, c.hidden, c.filter),
        LayerNormParams<T>::create(params_, p + ".ffn_norm", Partition::sentence, c.hidden)};
    if (c.integrate_decoder) layer.context = make_context_sublayer(params_, p, c);
    decoder_.push_back(std::move(layer));
  }
  output_.w_o = params_.create("output.w_o", Partition::sentence, {c.target_vocab, c.hidden},
                               Init::uniform_fan_in);
}

template <typename T>
Tensor<T> DocTransformer<T>::merge_context(const ContextSublayer<T>& sub, const Tensor<T>& h,
                                           const Tensor<T>& attended, GateTrace<T>* trace,
                                           const Sequence* positions) const {
  if (!sub.gate) return residual_sublayer(h, attended, sub.norm);
  GateOutput<T> g = context_gate(h, attended, *sub.gate);
  if (trace && positions) {
    const auto lambda = g.lambda.data();
    const std::size_t cols = g.lambda.cols();
    for (std::size_t i = 0; i < g.lambda.rows(); ++i)
      for (std::size_t b = 0; b < positions->batch; ++b)
        for (std::size_t t = 0; t < positions->lengths[b]; ++t)
          trace->values.push_back(lambda[i * cols + b * positions->length + t]);
  }
  return layer_norm(g.blend, sub.norm.gain, sub.norm.bias);
}

template <typename T>
Tensor<T> DocTransformer<T>::run_encoder(const Sequence& source,
                                         const ContextRepresentation<T>* context,
                                         ForwardMode mode, const Dropout& drop,
                                         GateTrace<T>* trace) const {
  if (source.length == 0) throw ContractError("encode_source: empty source sentence");
  const bool use_context = context_active(mode) && config_.integrate_encoder;
  if (use_context && !context) {
    throw ContractError("encode_source: encoder integration is on but no context was given");
  }
  if (use_context && context->batch != source.batch) {
    throw DimensionError("encode_source: context batch differs from source batch");
  }
  const AttentionMask self_mask = AttentionMask::padding(source.length, source.length, source.lengths);
  Tensor<T> s = drop(embed_batch(source.tokens, source.batch, source.length, source_embeddings_));
  for (const auto& layer : encoder_) {
    Tensor<T> h = residual_sublayer(
        s, drop(multi_head_attention(s, s, s, self_mask, layer.self_attention)), layer.self_norm);
    if (use_context && layer.context) {
      const Tensor<T> attended = drop(multi_head_attention(
          h, context->matrix, context->matrix, context->key_mask(source.length), layer.context->attention));
      h = merge_context(*layer.context, h, attended, trace, &source);
    }
    s = residual_sublayer(h, drop(feed_forward(h, layer.ffn)), layer.ffn_norm);
  }
  return s;
}

template <typename T>
Tensor<T> DocTransformer<T>::run_decoder(const Sequence& target, const Tensor<T>& source_repr,
                                         const std::vector<std::size_t>& source_lengths,
                                         std::size_t source_len,
                                         const ContextRepresentation<T>* context, ForwardMode mode,
                                         const Dropout& drop, GateTrace<T>* trace) const {
  if (target.length == 0) throw ContractError("decode: empty target prefix");
  const bool use_context = context_active(mode) && config_.integrate_decoder;
  if (use_context && !context) {
    throw ContractError("decode: decoder integration is on but no context was given");
  }
  const AttentionMask self_mask = AttentionMask::padding_causal(target.length, target.lengths);
  const AttentionMask source_mask = AttentionMask::padding(target.length, source_len, source_lengths);
  Tensor<T> t = drop(embed_batch(target.tokens, target.batch, target.length, target_embeddings_));
  for (const auto& layer : decoder_) {
    Tensor<T> h = residual_sublayer(
        t, drop(multi_head_attention(t, t, t, self_mask, layer.self_attention)), layer.self_norm);
    if (use_context && layer.context) {
      const Tensor<T> attended = drop(multi_head_attention(
          h, context->matrix, context->matrix, context->key_mask(target.length), layer.context->attention));
      h = merge_context(*layer.context, h, attended, trace, &target);
    }
    const Tensor<T> g = residual_sublayer(
        h, drop(multi_head_attention(h, source_repr, source_repr, source_mask, layer.encdec_attention)),
        layer.encdec_norm);
    t = residual_sublayer(g, drop(feed_forward(g, layer.ffn)), layer.ffn_norm);
  }
  return matmul(output_.w_o, t);
}

template <typename T>
std::optional<ContextRepresentation<T>> DocTransformer<T>::encode_context(const Batch& batch,
                                                                          ForwardMode mode,
                                                                          const Dropout& drop) const {
  if (!context_active(mode)) return std::nullopt;
  return encode_context_batch<T>(batch.context, batch.size, batch.context_len,
                                 batch.context_lengths, *context_encoder_, source_embeddings_, drop);
}

template <typename T>
Tensor<T> DocTransformer<T>::encode_source(const Batch& batch,
                                           const ContextRepresentation<T>* context,
                                           ForwardMode mode, const Dropout& drop,
                                           GateTrace<T>* trace) const {
  return run_encoder({batch.source, batch.size, batch.source_len, batch.source_lengths}, context,
                     mode, drop, trace);
}

template <typename T>
Tensor<T> DocTransformer<T>::decode(const Batch& batch, const Tensor<T>& source_repr,
                                    const ContextRepresentation<T>* context, ForwardMode mode,
                                    const Dropout& drop, GateTrace<T>* trace) const {
  return run_decoder({batch.target_in, batch.size, batch.target_len, batch.target_lengths},
                     source_repr, batch.source_lengths, batch.source_len, context, mode, drop, trace);
}

template <typename T>
Tensor<T> DocTransformer<T>::forward(const Batch& batch, ForwardMode mode, const Dropout& drop,
                                     GateTrace<T>* trace) const {
  const auto context = encode_context(batch, mode, drop);
  const ContextRepresentation<T>* ctx = context ? &*context : nullptr;
  const Tensor<T> source = encode_source(batch, ctx, mode, drop, trace);
  return decode(batch, source, ctx, mode, drop, trace);
}

template <typename T>
ContextRepresentation<T> DocTransformer<T>::encode_context(
    std::span<const TokenId> context_tokens) const {
  if (!context_encoder_) throw ContractError("encode_context: model has no context encoder");
  return docnmt::encode_context(context_tokens, *context_encoder_, source_embeddings_);
}

template <typename T>
Tensor<T> DocTransformer<T>::encode_source(std::span<const TokenId> source_tokens,
                                           const ContextRepresentation<T>* context,
                                           ForwardMode mode) const {
  return run_encoder({source_tokens, 1, source_tokens.size(), {source_tokens.size()}}, context,
                     mode, {}, nullptr);
}

template <typename T>
Tensor<T> DocTransformer<T>::decode_prefix(std::span<const TokenId> prefix,
                                           const Tensor<T>& source_repr,
                                           const ContextRepresentation<T>* context,
                                           ForwardMode mode) const {
  if (prefix.empty()) throw ContractError("decode_prefix: empty prefix");
  if (prefix.front() != kBos) throw ContractError("decode_prefix: prefix must start with BOS");
  return run_decoder({prefix, 1, prefix.size(), {prefix.size()}}, source_repr,
                     {source_repr.cols()}, source_repr.cols(), context, mode, {}, nullptr);
}

template <typename T>
EncodedSentence<T> DocTransformer<T>::encode_sentence(std::span<const TokenId> source_tokens,
                                                      std::span<const TokenId> context_tokens,
                                                      ForwardMode mode) const {
  NoGradGuard no_grad;
  EncodedSentence<T> out;
  out.mode = mode;
  if (context_active(mode)) out.context = encode_context(context_tokens);
  out.source = encode_source(source_tokens, out.context ? &*out.context : nullptr, mode);
  for (const auto& layer : decoder_) {
    out.source_memory.push_back(project_memory(out.source, out.source, layer.encdec_attention));
    if (out.context && config_.integrate_decoder && layer.context) {
      out.context_memory.push_back(
          project_memory(out.context->matrix, out.context->matrix, layer.context->attention));
    } else {
      out.context_memory.emplace_back();
    }
  }
  return out;
}

template <typename T>
DecoderState<T> DocTransformer<T>::start_state() const {
  DecoderState<T> state;
  state.self.resize(decoder_.size());
  return state;
}

template <typename T>
std::vector<T> DocTransformer<T>::decode_step(const EncodedSentence<T>& encoded,
                                              DecoderState<T>& state, TokenId token) const {
  NoGradGuard no_grad;
  const std::size_t pos = state.length;
  const TokenId ids[] = {token};
  const Tensor<T> pe = positional_encoding<T>(pos + 1, config_.hidden);
  Tensor<T> x = add(embedding_columns(target_embeddings_.weights, std::span<const TokenId>(ids)),
                    slice_columns(pe, pos, pos + 1));
  const bool use_context = context_active(encoded.mode) && config_.integrate_decoder;
  for (std::size_t n = 0; n < decoder_.size(); ++n) {
    const auto& layer = decoder_[n];
    auto& cache = state.self[n];
    const ProjectedMemory<T> fresh = project_memory(x, x, layer.self_attention);
    if (pos == 0) {
      cache = fresh;
    } else {
      cache.keys = concat_columns<T>({cache.keys, fresh.keys});
      cache.values = concat_columns<T>({cache.values, fresh.values});
    }
    Tensor<T> h = residual_sublayer(
        x, attend(x, cache, AttentionMask::none(1, pos + 1), layer.self_attention), layer.self_norm);
    if (use_context && layer.context) {
      const auto& memory = encoded.context_memory[n];
      const Tensor<T> attended =
          attend(h, memory, AttentionMask::none(1, memory.keys.cols()), layer.context->attention);
      h = merge_context(*layer.context, h, attended, nullptr, nullptr);
    }
    const auto& source_memory = encoded.source_memory[n];
    const Tensor<T> g = residual_sublayer(
        h, attend(h, source_memory, AttentionMask::none(1, source_memory.keys.cols()), layer.encdec_attention),
        layer.encdec_norm);
    x = residual_sublayer(g, feed_forward(g, layer.ffn), layer.ffn_norm);
  }
  ++state.length;
  return log_softmax_column(matmul(output_.w_o, x), 0);
}

template <typename T>
SentenceScore<T> sentence_log_prob(const TrainingExample& example, const DocTransformer<T>& model,
                                   ForwardMode mode) {
  NoGradGuard no_grad;
  for (TokenId t : example.target) {
    if (t < 0 || static_cast<std::size_t>(t) >= model.config().target_vocab) {
      throw ContractError("sentence_log_prob: target id " + std::to_string(t) +
                          " outside the target vocabulary");
    }
  }
  const Batch batch = make_batch(std::span<const TrainingExample>(&example, 1));
  const Tensor<T> logits = model.forward(batch, mode);
  SentenceScore<T> score;
  for (std::size_t j = 0; j < batch.target_lengths[0]; ++j) {
    const T lp = log_softmax_column(logits, j)[static_cast<std::size_t>(batch.target_out[j])];
    score.per_token.push_back(lp);
    score.total += lp;
  }
  return score;
}

#define DOCNMT_INSTANTIATE_MODEL(T)                                                           \
  template struct GatingParams<T>;                                                            \
  template GateOutput<T> context_gate(const Tensor<T>&, const Tensor<T>&, const GatingParams<T>&); \
  template class DocTransformer<T>;                                                           \
  template SentenceScore<T> sentence_log_prob(const TrainingExample&, const DocTransformer<T>&, \
                                              ForwardMode);

DOCNMT_INSTANTIATE_MODEL(float)
DOCNMT_INSTANTIATE_MODEL(double)

}  // namespace docnmt
