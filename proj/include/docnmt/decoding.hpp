#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "docnmt/corpus.hpp"
#include "docnmt/doc_nmt_model.hpp"

namespace docnmt {

struct DecodeConfig {
  std::size_t beam_size = 4;
  double alpha = 0.6;
  // Generated tokens including EOS; 0 means 2 * source length + 10.
  std::size_t max_length = 0;
  // false recomputes the whole prefix at every step instead of reusing cached
  // keys and values.
  bool incremental = true;

  void validate() const;  // ConfigError
  std::size_t length_limit(std::size_t source_length) const;
};

// ((5 + length) / 6) ^ alpha, length counting generated tokens with EOS.
double length_penalty(std::size_t length, double alpha);

struct Hypothesis {
  TokenIds tokens;  // BOS first
  double log_prob = 0.0;
  bool finished = false;  // last token is EOS

  std::size_t length() const { return tokens.size() - 1; }
  double score(double alpha) const { return log_prob / length_penalty(length(), alpha); }
};

// Source and context are plain sentence ids (no EOS); the context of a first
// sentence is [BOS]. Returns the generated words without BOS/EOS.
template <typename T>
TokenIds beam_search(const DocTransformer<T>& model, std::span<const TokenId> source,
                     std::span<const TokenId> context, ForwardMode mode, const DecodeConfig& config);

// Full search state at the end, best first (finished before unfinished).
template <typename T>
std::vector<Hypothesis> beam_search_hypotheses(const DocTransformer<T>& model,
                                               std::span<const TokenId> source,
                                               std::span<const TokenId> context, ForwardMode mode,
                                               const DecodeConfig& config);

// Stepwise argmax (lowest id on ties) until EOS or the length limit.
template <typename T>
TokenIds greedy_decode(const DocTransformer<T>& model, std::span<const TokenId> source,
                       std::span<const TokenId> context, ForwardMode mode,
                       std::size_t max_length = 0);

// Translates every sentence of a document; the context of sentence k comes
// from the source sentences only, so sentences are independent given the
// document. `threads` > 1 translates sentences concurrently.
template <typename T>
std::vector<TokenIds> translate_document(const DocTransformer<T>& model,
                                         const std::vector<TokenIds>& source_sentences,
                                         ForwardMode mode, const DecodeConfig& config,
                                         std::size_t window, std::size_t threads = 1);

// DOCNMT_THREADS when set and positive, else 1.
std::size_t worker_threads();

}  // namespace docnmt
