#include "docnmt/decoding.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <optional>
#include <thread>

#include "docnmt/errors.hpp"

namespace docnmt {

void DecodeConfig::validate() const {
  if (beam_size < 1) throw ConfigError("decode: beam size must be >= 1");
  if (!(alpha >= 0.0)) throw ConfigError("decode: alpha must be >= 0");
}

std::size_t DecodeConfig::length_limit(std::size_t source_length) const {
  return max_length > 0 ? max_length : 2 * source_length + 10;
}

double length_penalty(std::size_t length, double alpha) {
  return std::pow((5.0 + static_cast<double>(length)) / 6.0, alpha);
}

namespace {

// Produces next-token log-probabilities for a hypothesis, either from cached
// decoder state or by recomputing the full prefix.
template <typename T>
class Scorer {
 public:
  Scorer(const DocTransformer<T>& model, std::span<const TokenId> source,
         std::span<const TokenId> context, ForwardMode mode, bool incremental)
      : model_(model), mode_(mode), incremental_(incremental) {
    if (source.empty()) throw ContractError("decode: empty source sentence");
    source_.assign(source.begin(), source.end());
    source_.push_back(kEos);
    context_.assign(context.begin(), context.end());
    if (context_.empty()) context_.push_back(kBos);
    if (incremental_) {
      encoded_ = model.encode_sentence(source_, context_, mode);
    } else {
      if (model.context_active(mode)) ctx_ = model.encode_context(std::span<const TokenId>(context_));
      source_repr_ = model.encode_source(source_, ctx_ ? &*ctx_ : nullptr, mode);
    }
  }

  struct State {
    DecoderState<T> cache;
  };

  State start() const { return {incremental_ ? model_.start_state() : DecoderState<T>{}}; }

  // Log-probabilities of the token following `prefix`; `state` has seen all
  // but the last prefix token.
  std::vector<T> next(const TokenIds& prefix, State& state) const {
    if (incremental_) return model_.decode_step(*encoded_, state.cache, prefix.back());
    NoGradGuard no_grad;
    const Tensor<T> logits =
        model_.decode_prefix(prefix, source_repr_, ctx_ ? &*ctx_ : nullptr, mode_);
    return log_softmax_column(logits, logits.cols() - 1);
  }

  std::size_t source_length() const { return source_.size() - 1; }

 private:
  const DocTransformer<T>& model_;
  ForwardMode mode_;
  bool incremental_;
  TokenIds source_, context_;
  std::optional<EncodedSentence<T>> encoded_;
  std::optional<ContextRepresentation<T>> ctx_;
  Tensor<T> source_repr_;
};

bool better(const Hypothesis& a, const Hypothesis& b, double alpha) {
  const double sa = a.score(alpha), sb = b.score(alpha);
  if (sa != sb) return sa > sb;
  return a.tokens < b.tokens;
}

TokenIds strip(const TokenIds& tokens) {
  TokenIds out;
  for (TokenId t : tokens)
    if (t != kBos && t != kEos && t != kPad) out.push_back(t);
  return out;
}

}  // namespace

template <typename T>
std::vector<Hypothesis> beam_search_hypotheses(const DocTransformer<T>& model,
                                               std::span<const TokenId> source,
                                               std::span<const TokenId> context, ForwardMode mode,
                                               const DecodeConfig& config) {
  config.validate();
  const Scorer<T> scorer(model, source, context, mode, config.incremental);
  const std::size_t limit = config.length_limit(scorer.source_length());
  const std::size_t vocab = model.config().target_vocab;

  struct Alive {
    Hypothesis hyp;
    typename Scorer<T>::State state;
  };
  struct Candidate {
    std::size_t parent;
    TokenId token;
    double log_prob;
  };

  std::vector<Alive> alive;
  alive.push_back({Hypothesis{{kBos}, 0.0, false}, scorer.start()});
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0; step < limit && !alive.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t i = 0; i < alive.size(); ++i) {
      const std::vector<T> lp = scorer.next(alive[i].hyp.tokens, alive[i].state);
      for (std::size_t v = 0; v < vocab; ++v) {
        if (v == static_cast<std::size_t>(kPad) || v == static_cast<std::size_t>(kBos)) continue;
        candidates.push_back({i, static_cast<TokenId>(v), alive[i].hyp.log_prob + lp[v]});
      }
    }
    // Raw log-prob decides within a step (all candidates share one length);
    // ties go to the lexicographically smaller sequence.
    const auto cmp = [&](const Candidate& a, const Candidate& b) {
      if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
      const auto& pa = alive[a.parent].hyp.tokens;
      const auto& pb = alive[b.parent].hyp.tokens;
      if (pa != pb) return pa < pb;
      return a.token < b.token;
    };
    const std::size_t width = config.beam_size - std::min(config.beam_size, finished.size());
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep),
                      candidates.end(), cmp);
    std::vector<Alive> next;
    for (std::size_t c = 0; c < keep; ++c) {
      const Candidate& cand = candidates[c];
      Hypothesis hyp = alive[cand.parent].hyp;
      hyp.tokens.push_back(cand.token);
      hyp.log_prob = cand.log_prob;
      if (cand.token == kEos) {
        hyp.finished = true;
        finished.push_back(std::move(hyp));
      } else {
        next.push_back({std::move(hyp), alive[cand.parent].state});
      }
    }
    alive = std::move(next);
  }

  const auto by_score = [&](const Hypothesis& a, const Hypothesis& b) {
    return better(a, b, config.alpha);
  };
  std::sort(finished.begin(), finished.end(), by_score);
  std::vector<Hypothesis> rest;
  for (auto& a : alive) rest.push_back(std::move(a.hyp));
  std::sort(rest.begin(), rest.end(), by_score);
  finished.insert(finished.end(), rest.begin(), rest.end());
  return finished;
}

template <typename T>
TokenIds beam_search(const DocTransformer<T>& model, std::span<const TokenId> source,
                     std::span<const TokenId> context, ForwardMode mode, const DecodeConfig& config) {
  const auto hyps = beam_search_hypotheses(model, source, context, mode, config);
  return hyps.empty() ? TokenIds{} : strip(hyps.front().tokens);
}

template <typename T>
TokenIds greedy_decode(const DocTransformer<T>& model, std::span<const TokenId> source,
                       std::span<const TokenId> context, ForwardMode mode, std::size_t max_length) {
  const Scorer<T> scorer(model, source, context, mode, true);
  DecodeConfig cfg;
  cfg.max_length = max_length;
  const std::size_t limit = cfg.length_limit(scorer.source_length());
  auto state = scorer.start();
  TokenIds tokens{kBos};
  for (std::size_t step = 0; step < limit; ++step) {
    const std::vector<T> lp = scorer.next(tokens, state);
    TokenId best = kEos;
    for (std::size_t v = 0; v < lp.size(); ++v) {
      if (v == static_cast<std::size_t>(kPad) || v == static_cast<std::size_t>(kBos)) continue;
      if (lp[v] > lp[static_cast<std::size_t>(best)] ||
          (lp[v] == lp[static_cast<std::size_t>(best)] && static_cast<TokenId>(v) < best)) {
        best = static_cast<TokenId>(v);
      }
    }
    tokens.push_back(best);
    if (best == kEos) break;
  }
  return strip(tokens);
}

template <typename T>
std::vector<TokenIds> translate_document(const DocTransformer<T>& model,
                                         const std::vector<TokenIds>& source_sentences,
                                         ForwardMode mode, const DecodeConfig& config,
                                         std::size_t window, std::size_t threads) {
  config.validate();
  const std::size_t count = source_sentences.size();
  std::vector<TokenIds> out(count);
  const auto translate_one = [&](std::size_t k) {
    const TokenIds context = extract_context(source_sentences, k + 1, window);
    if (source_sentences[k].empty()) return;  // an empty line stays empty
    out[k] = beam_search(model, source_sentences[k], context, mode, config);
  };
  threads = std::max<std::size_t>(1, std::min(threads, count));
  if (threads == 1) {
    for (std::size_t k = 0; k < count; ++k) translate_one(k);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t k = next++; k < count; k = next++) translate_one(k);
    });
  }
  for (auto& th : pool) th.join();
  return out;
}

std::size_t worker_threads() {
  if (const char* env = std::getenv("DOCNMT_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

#define DOCNMT_INSTANTIATE_DECODING(T)                                                          \
  template std::vector<Hypothesis> beam_search_hypotheses(                                      \
      const DocTransformer<T>&, std::span<const TokenId>, std::span<const TokenId>, ForwardMode, \
      const DecodeConfig&);                                                                     \
  template TokenIds beam_search(const DocTransformer<T>&, std::span<const TokenId>,             \
                                std::span<const TokenId>, ForwardMode, const DecodeConfig&);    \
  template TokenIds greedy_decode(const DocTransformer<T>&, std::span<const TokenId>,           \
                                  std::span<const TokenId>, ForwardMode, std::size_t);          \
  template std::vector<TokenIds> translate_document(const DocTransformer<T>&,                   \
                                                    const std::vector<TokenIds>&, ForwardMode,  \
                                                    const DecodeConfig&, std::size_t,           \
                                                    std::size_t);

DOCNMT_INSTANTIATE_DECODING(float)
DOCNMT_INSTANTIATE_DECODING(double)

}  // namespace docnmt
