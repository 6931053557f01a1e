#pragma once

// The document-context Transformer. The sentence encoder and decoder are a
// standard post-norm Transformer; every layer additionally owns a context
// attention sub-layer over C^(N_c) whose output is merged either through a
// residual connection or through an elementwise context gate.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "docnmt/config.hpp"
#include "docnmt/context_encoder.hpp"
#include "docnmt/corpus.hpp"
#include "docnmt/transformer_core.hpp"

namespace docnmt {

// `sentence` inactivates every document-level module, which turns the model
// into the baseline Transformer regardless of the integration flags.
enum class ForwardMode { sentence, document };

template <typename T>
struct GatingParams {
  Tensor<T> w_i;  // [D x D], applied to the sub-layer input
  Tensor<T> w_s;  // [D x D], applied to the sub-layer output

  static GatingParams create(ParameterSet<T>& params, const std::string& prefix, std::size_t dim);
};

template <typename T>
struct GateOutput {
  Tensor<T> blend;   // lambda * h + (1 - lambda) * sublayer_out, before normalisation
  Tensor<T> lambda;  // [D x L], every entry in (0, 1)
};

template <typename T>
GateOutput<T> context_gate(const Tensor<T>& h, const Tensor<T>& sublayer_out,
                           const GatingParams<T>& params);

template <typename T>
struct ContextSublayer {
  MultiHeadAttention<T> attention;
  LayerNormParams<T> norm;
  std::optional<GatingParams<T>> gate;
};

template <typename T>
struct EncoderLayerParams {
  MultiHeadAttention<T> self_attention;
  LayerNormParams<T> self_norm;
  std::optional<ContextSublayer<T>> context;  // document-level
  FeedForward<T> ffn;
  LayerNormParams<T> ffn_norm;
};

template <typename T>
struct DecoderLayerParams {
  MultiHeadAttention<T> self_attention;
  LayerNormParams<T> self_norm;
  std::optional<ContextSublayer<T>> context;  // document-level
  MultiHeadAttention<T> encdec_attention;
  LayerNormParams<T> encdec_norm;
  FeedForward<T> ffn;
  LayerNormParams<T> ffn_norm;
};

template <typename T>
struct OutputProjection {
  Tensor<T> w_o;  // [|V_y| x D]
};

// Gate activations collected during a forward pass (non-padding positions).
template <typename T>
struct GateTrace {
  std::vector<T> values;
};

// Source sentence and context after encoding, plus the per-layer key/value
// projections the decoder reuses at every step.
template <typename T>
struct EncodedSentence {
  ForwardMode mode = ForwardMode::sentence;
  Tensor<T> source;  // S^(N_s), [D x I]
  std::optional<ContextRepresentation<T>> context;
  std::vector<ProjectedMemory<T>> source_memory;
  std::vector<ProjectedMemory<T>> context_memory;
};

// Self-attention keys/values of all previously fed target positions.
template <typename T>
struct DecoderState {
  std::vector<ProjectedMemory<T>> self;
  std::size_t length = 0;
};

template <typename T>
struct SentenceScore {
  T total = 0;
  std::vector<T> per_token;  // log P(y_j | ...), including EOS
};

template <typename T>
class DocTransformer {
 public:
  DocTransformer(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterSet<T>& parameters() { return params_; }
  const ParameterSet<T>& parameters() const { return params_; }

  const EmbeddingTable<T>& source_embeddings() const { return source_embeddings_; }
  const EmbeddingTable<T>& target_embeddings() const { return target_embeddings_; }
  const std::optional<ContextEncoderParams<T>>& context_encoder() const { return context_encoder_; }
  const std::vector<EncoderLayerParams<T>>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayerParams<T>>& decoder_layers() const { return decoder_; }
  const OutputProjection<T>& output() const { return output_; }

  bool context_active(ForwardMode mode) const {
    return mode == ForwardMode::document && config_.uses_context();
  }

  // Batched training path. Logits are [|V_y| x batch.size * batch.target_len].
  std::optional<ContextRepresentation<T>> encode_context(const Batch& batch, ForwardMode mode,
                                                         const Dropout& drop = {}) const;
  Tensor<T> encode_source(const Batch& batch, const ContextRepresentation<T>* context,
                          ForwardMode mode, const Dropout& drop = {},
                          GateTrace<T>* trace = nullptr) const;
  Tensor<T> decode(const Batch& batch, const Tensor<T>& source_repr,
                   const ContextRepresentation<T>* context, ForwardMode mode,
                   const Dropout& drop = {}, GateTrace<T>* trace = nullptr) const;
  Tensor<T> forward(const Batch& batch, ForwardMode mode, const Dropout& drop = {},
                    GateTrace<T>* trace = nullptr) const;

  // Single-sentence path.
  ContextRepresentation<T> encode_context(std::span<const TokenId> context_tokens) const;
  Tensor<T> encode_source(std::span<const TokenId> source_tokens,
                          const ContextRepresentation<T>* context, ForwardMode mode) const;
  // Logits [|V_y| x prefix.size()]; the prefix starts with BOS.
  Tensor<T> decode_prefix(std::span<const TokenId> prefix, const Tensor<T>& source_repr,
                          const ContextRepresentation<T>* context, ForwardMode mode) const;

  // Incremental decoding.
  EncodedSentence<T> encode_sentence(std::span<const TokenId> source_tokens,
                                     std::span<const TokenId> context_tokens,
                                     ForwardMode mode) const;
  DecoderState<T> start_state() const;
  // Feeds `token` at the next position and returns log-probabilities of the
  // following token.
  std::vector<T> decode_step(const EncodedSentence<T>& encoded, DecoderState<T>& state,
                             TokenId token) const;

 private:
  struct Sequence {
    std::span<const TokenId> tokens;
    std::size_t batch;
    std::size_t length;
    std::vector<std::size_t> lengths;
  };

  Tensor<T> run_encoder(const Sequence& source, const ContextRepresentation<T>* context,
                        ForwardMode mode, const Dropout& drop, GateTrace<T>* trace) const;
  Tensor<T> run_decoder(const Sequence& target, const Tensor<T>& source_repr,
                        const std::vector<std::size_t>& source_lengths, std::size_t source_len,
                        const ContextRepresentation<T>* context, ForwardMode mode,
                        const Dropout& drop, GateTrace<T>* trace) const;
  Tensor<T> merge_context(const ContextSublayer<T>& sub, const Tensor<T>& h,
                          const Tensor<T>& attended, GateTrace<T>* trace,
                          const Sequence* positions) const;

  ModelConfig config_;
  ParameterSet<T> params_;
  EmbeddingTable<T> source_embeddings_;
  EmbeddingTable<T> target_embeddings_;
  std::optional<ContextEncoderParams<T>> context_encoder_;
  std::vector<EncoderLayerParams<T>> encoder_;
  std::vector<DecoderLayerParams<T>> decoder_;
  OutputProjection<T> output_;
};

// log P(y | X_<k, x) summed over target tokens (EOS included).
template <typename T>
SentenceScore<T> sentence_log_prob(const TrainingExample& example, const DocTransformer<T>& model,
                                   ForwardMode mode);

extern template class DocTransformer<float>;
extern template class DocTransformer<double>;

}  // namespace docnmt
