#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "docnmt/ops.hpp"
#include "docnmt/transformer_core.hpp"

namespace docnmt {

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kUnk = 3;
inline constexpr std::size_t kReservedTokens = 4;

using Sentence = std::vector<std::string>;
using TokenIds = std::vector<TokenId>;

class Vocabulary {
 public:
  Vocabulary();

  // Ids are assigned from 4 upwards in the given order.
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  std::size_t size() const { return tokens_.size(); }
  TokenId id(std::string_view token) const;  // kUnk when absent
  const std::string& token(TokenId id) const;
  bool contains(std::string_view token) const;

  TokenIds encode(const Sentence& words) const;
  // Reserved PAD/BOS/EOS are dropped; UNK keeps its surface form.
  Sentence decode(std::span<const TokenId> ids) const;

  // One non-reserved token per line; the first line is id 4.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
};

// Whitespace tokenisation.
Sentence tokenize(std::string_view line);
std::string join(const Sentence& words);

struct TextDocument {
  std::size_t id = 0;
  std::vector<Sentence> source;
  std::vector<Sentence> target;
};

struct ParallelDocument {
  std::size_t id = 0;
  std::vector<TokenIds> source;
  std::vector<TokenIds> target;

  std::size_t size() const { return source.size(); }
};

// Documents are separated by blank lines, one sentence per line. Both sides
// must agree on document and per-document sentence counts (DataError
// otherwise, naming the document and line).
std::vector<TextDocument> load_document_corpus(const std::filesystem::path& source_path,
                                               const std::filesystem::path& target_path);
// One side only, e.g. the input of translation.
std::vector<std::vector<Sentence>> load_documents(const std::filesystem::path& path);
std::vector<std::vector<Sentence>> parse_documents(std::string_view text);
void write_documents(const std::filesystem::path& path, const std::vector<std::vector<Sentence>>& docs);

enum class CorpusSide { source, target };

// `max_size` non-reserved entries, most frequent first, ties lexicographic.
Vocabulary build_vocabulary(const std::vector<TextDocument>& corpus, CorpusSide side,
                            std::size_t max_size);
Vocabulary build_vocabulary(const std::vector<std::vector<Sentence>>& documents, std::size_t max_size);

std::vector<ParallelDocument> encode_corpus(const std::vector<TextDocument>& corpus,
                                            const Vocabulary& source_vocab,
                                            const Vocabulary& target_vocab);

// Source sentences max(1, k - window) .. k - 1 (1-based k) concatenated in
// document order, or [BOS] when that range is empty.
TokenIds extract_context(std::span<const TokenIds> source_sentences, std::size_t k,
                         std::size_t window);
TokenIds extract_context(const ParallelDocument& doc, std::size_t k, std::size_t window);

struct TrainingExample {
  TokenIds context;  // X_<k, never empty
  TokenIds source;   // x^(k) + EOS
  TokenIds target;   // BOS + y^(k) + EOS
};

TrainingExample make_example(TokenIds context, const TokenIds& source, const TokenIds& target);

// Document examples carry their window; sentence examples carry [BOS].
std::vector<TrainingExample> document_examples(const std::vector<ParallelDocument>& docs,
                                               std::size_t window);
std::vector<TrainingExample> sentence_examples(const std::vector<ParallelDocument>& docs);

// A padded mini-batch. Id matrices are row-major [size x length].
struct Batch {
  std::size_t size = 0;
  std::size_t source_len = 0;
  std::size_t context_len = 0;
  std::size_t target_len = 0;  // decoder steps = |y| + 1
  TokenIds source, context, target_in, target_out;
  std::vector<std::size_t> source_lengths, context_lengths, target_lengths;

  std::size_t target_tokens() const;  // non-PAD labels
  std::size_t padded_size() const;    // size * max(source_len, target_len)

  AttentionMask source_self_mask() const;
  AttentionMask source_memory_mask(std::size_t query_len) const;
  AttentionMask target_self_mask() const;
};

Batch make_batch(std::span<const TrainingExample> examples);

// Sorted by (target, source) length, packed greedily so that every batch's
// padded size stays within `token_budget`; batch order shuffled by `seed`.
std::vector<Batch> make_batches(const std::vector<TrainingExample>& examples,
                                std::size_t token_budget, std::uint64_t seed);

}  // namespace docnmt
